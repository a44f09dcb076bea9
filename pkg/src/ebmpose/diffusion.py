"""Variance-exploding noise schedule, DSM loss and a Dormand-Prince PF-ODE integrator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, NonFiniteLoss, StepSizeUnderflow


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 1.0
    eps: float = 1e-5

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if not (0 < self.eps < 1):
            raise ConfigError("eps must lie in (0, 1)")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def _check(self, t):
        t_arr = np.asarray(t, dtype=float)
        # tolerate round-off at the interval ends
        if np.any(t_arr < self.eps * (1 - 1e-9)) or np.any(t_arr > 1 + 1e-12) or not np.all(np.isfinite(t_arr)):
            raise DomainError(f"t outside [{self.eps}, 1]")

    def sigma_value(self, t):
        """sigma(t) without the domain check (valid for any real t)."""
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** np.asarray(t, dtype=float)

    def sigma(self, t):
        """``(sigma(t), sigma(t) * dsigma/dt)``; works elementwise on arrays."""
        self._check(t)
        s = self.sigma_value(t)
        return s, s * s * self.log_ratio

    def weight(self, t):
        """DSM weighting lambda(t) = sigma(t)^2."""
        s, _ = self.sigma(t)
        return s * s


def perturb(p0, t: float, schedule: NoiseSchedule, rng: np.random.Generator | None = None, z=None):
    """Sample ``p_t ~ N(p0, sigma(t)^2 I)``; returns ``(p_t, (p0 - p_t) / sigma^2)``.

    The perturbed vector is left as a free 9-vector.
    """
    p0 = np.asarray(p0, dtype=float)
    if z is None:
        z = rng.standard_normal(p0.shape)
    z = np.asarray(z, dtype=float)
    s, _ = schedule.sigma(t)
    s = np.asarray(s)[..., None] if np.ndim(s) else s
    pt = p0 + s * z
    return pt, (p0 - pt) / (s * s)


def dsm_loss(score, target, weight):
    """Mean over the batch of ``weight * ||score - target||^2``.

    Accepts numpy arrays or torch tensors (row-wise over the last axis).
    """
    diff = score - target
    per = weight * (diff * diff).sum(-1)
    loss = per.mean()
    value = loss.detach() if hasattr(loss, "detach") else loss
    if not math.isfinite(float(value)):
        raise NonFiniteLoss("DSM loss is not finite")
    return loss


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

MIN_STEP = 1e-12


@dataclass
class OdeReport:
    final_state: np.ndarray
    n_accepted_steps: int = 0
    n_rejected_steps: int = 0
    n_rhs_evals: int = 0
    failed: bool = False


def dopri_step(f, t, y, h, k1=None):
    """One Dormand-Prince step; returns ``(y5, err, k7, n_evals)``.

    ``f(y, t)`` acts row-wise; ``t`` and ``h`` may be per-row arrays.
    """
    h_col = np.asarray(h)[..., None] if np.ndim(h) else h
    n = 0
    if k1 is None:
        k1 = f(y, t)
        n += 1
    ks = [k1]
    for i in range(1, 7):
        yi = y + h_col * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
        ks.append(f(yi, t + _C[i] * np.asarray(h)))
        n += 1
    y5 = y + h_col * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
    err = h_col * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    return y5, err, ks[6], n


def integrate_fixed(f, y0, t0: float, t1: float, n_steps: int) -> np.ndarray:
    """Fixed-step fifth-order integration (used for order verification)."""
    y = np.asarray(y0, dtype=float)
    h = (t1 - t0) / n_steps
    t = t0
    for _ in range(n_steps):
        y, _, _, _ = dopri_step(f, t, y, h)
        t += h
    return y


def _rms(x):
    return np.sqrt(np.mean(x * x, axis=-1))


def integrate_batch(
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray],
    p_init,
    t0: float,
    t_end: float,
    tol=(1e-3, 1e-4),
    max_steps: int = 10_000,
    raise_on_underflow: bool = True,
) -> list[OdeReport]:
    """Integrate many independent states, each with its own adaptive step.

    ``rhs(states, times)`` receives only the still-active rows and their own
    times, and must treat rows independently.  Every row follows exactly the
    trajectory it would follow if integrated alone.
    """
    rtol, atol = tol
    if not (rtol > 0 and atol > 0):
        raise ConfigError("tolerances must be positive")
    if not t0 > t_end:
        raise ConfigError("need t0 > t_end")
    Y = np.array(p_init, dtype=float, ndmin=2)
    B, D = Y.shape
    direction = -1.0 if t_end < t0 else 1.0
    span = abs(t_end - t0)
    T = np.full(B, float(t0))
    reports = [OdeReport(Y[i].copy()) for i in range(B)]
    active = np.ones(B, dtype=bool)

    def evaluate(idx, y, t):
        out = np.asarray(rhs(y, t), dtype=float).reshape(len(idx), D)
        for i in idx:
            reports[i].n_rhs_evals += 1
        return out

    # Hairer's starting step heuristic, per row
    idx = np.arange(B)
    K1 = evaluate(idx, Y, T)
    sc = atol + rtol * np.abs(Y)
    d0, d1 = _rms(Y / sc), _rms(K1 / sc)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, span)
    Y1 = Y + direction * h0[:, None] * K1
    K2 = evaluate(idx, Y1, T + direction * h0)
    d2 = _rms((K2 - K1) / sc) / h0
    dmax = np.maximum(d1, d2)
    h1 = np.where(dmax <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dmax, 1e-300)) ** (1 / 5))
    H = np.minimum(np.minimum(100 * h0, h1), span)

    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        t, y, k1 = T[idx], Y[idx], K1[idx]
        h = np.minimum(H[idx], np.abs(t_end - t))
        hs = direction * h
        y5, err, k7, _ = dopri_step(lambda yy, tt: evaluate(idx, yy, tt), t, y, hs, k1)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        en = _rms(err / scale)
        ok = en <= 1.0
        fac = np.where(en == 0, 5.0, np.clip(0.9 * np.maximum(en, 1e-300) ** (-0.2), 0.2, 5.0))
        fac = np.where(ok, fac, np.minimum(fac, 1.0))
        for j, i in enumerate(idx):
            if ok[j]:
                reports[i].n_accepted_steps += 1
                Y[i] = y5[j]
                K1[i] = k7[j]
                T[i] = t_end if h[j] >= abs(t_end - t[j]) else t[j] + hs[j]
                if T[i] == t_end:
                    active[i] = False
            else:
                reports[i].n_rejected_steps += 1
            H[i] = h[j] * fac[j]
            if active[i] and H[i] < MIN_STEP:
                if raise_on_underflow:
                    raise StepSizeUnderflow(f"step size fell below {MIN_STEP} at t={T[i]:.6g}")
                reports[i].failed = True
                active[i] = False
    for i in range(B):
        reports[i].final_state = Y[i].copy()
    return reports


def integrate_pf_ode(rhs, p_init, t0: float, t_end: float, tol=(1e-3, 1e-4)) -> OdeReport:
    """Adaptive Dormand-Prince integration of ``dp/dt = rhs(p, t)`` from ``t0`` down to ``t_end``.

    ``rhs`` takes a single state vector and a scalar time.
    """
    p = np.asarray(p_init, dtype=float)
    report = integrate_batch(lambda y, t: np.asarray(rhs(y[0], float(t[0])))[None], p[None], t0, t_end, tol)[0]
    report.final_state = report.final_state.reshape(p.shape)
    return report


def pf_ode_rhs(score_fn, schedule: NoiseSchedule):
    """Wrap a batched score ``score_fn(P, t)`` into the PF-ODE drift ``-sigma * dsigma/dt * score``."""

    def rhs(P, t):
        _, g = schedule.sigma(t)
        return -np.asarray(g)[..., None] * score_fn(P, t)

    return rhs
