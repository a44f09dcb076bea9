"""Three-stage pose inference: energy pre-filtering, PF-ODE refinement, energy post-ranking.

Also the tracking variant (Gaussian prior around the last estimate, short
refinement) and grasp uncertainty from the spread of refined candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .diffusion import OdeReport, integrate_batch
from .energynet import DTYPE, EnergyModel, ObsBatch
from .errors import ConfigError, DegenerateMean, NoCandidates, RefinementFailed
from .geom import ObjectModel, PriorConfig, RigidPose, icosphere_prior_poses, mean_pose, pose_distance, pose_to_vec, vec_to_pose
from .simulator import TactileImprint


@dataclass
class StageFlags:
    prefilter: bool = True
    refine: bool = True
    postrank: bool = True


@dataclass
class PipelineConfig:
    K: int = 16
    t0_est: float = 0.6
    t0_track: float = 0.1
    sigma_track: float = 0.05
    stages: StageFlags = field(default_factory=StageFlags)
    ode_tol: tuple = (1e-3, 1e-4)
    prior: PriorConfig = field(default_factory=PriorConfig)
    rank_t: float | None = None  # None: the schedule's eps
    render_every: int = 1  # >1 reuses a render for that many score calls

    def check(self, eps: float) -> None:
        M = self.M
        if not (1 <= self.K <= M):
            raise ConfigError(f"need 1 <= K <= M, got K={self.K}, M={M}")
        if not (eps < self.t0_track <= self.t0_est <= 1.0):
            raise ConfigError("need eps < t0_track <= t0_est <= 1")
        if self.sigma_track < 0:
            raise ConfigError("sigma_track must be non-negative")

    @property
    def M(self) -> int:
        from .geom import icosphere

        if self.prior.M is not None:
            return int(self.prior.M)
        return len(icosphere(self.prior.level)) * self.prior.n_inplane


@dataclass
class EstimationResult:
    pose: RigidPose
    candidates: list  # refined RigidPoses (non-failed)
    energies: np.ndarray
    uncertainty: float
    ode_reports: list
    candidate_vecs: np.ndarray = None
    index: int = 0

    @property
    def rhs_evals(self) -> int:
        return int(sum(r.n_rhs_evals for r in self.ode_reports))


class Scorer:
    """Batched energy/score evaluation for one object and one observation."""

    def __init__(self, model: EnergyModel, obj: ObjectModel, obs: TactileImprint, render_every: int = 1):
        self.model = model
        self.obj = obj
        self.obs = obs
        self.render_every = max(1, int(render_every))
        self._calls = 0
        self._cache = None
        self.n_evals = 0

    def _batch(self, n):
        return ObsBatch.repeat(self.obj, self.obs, n)

    def energies(self, P: np.ndarray, t: float) -> np.ndarray:
        P = np.asarray(P, dtype=float).reshape(-1, 9)
        Pt = torch.as_tensor(P, dtype=DTYPE)
        tt = torch.full((len(P),), float(t), dtype=DTYPE)
        with torch.no_grad():
            return (self.model.phi(Pt, self._batch(len(P)), tt) * Pt).sum(dim=1).numpy()

    def scores(self, P: np.ndarray, t) -> np.ndarray:
        P = np.asarray(P, dtype=float).reshape(-1, 9)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(P),)).copy()
        batch = self._batch(len(P))
        rendered = None
        if self.render_every > 1:
            if self._cache is None or self._calls % self.render_every == 0 or len(self._cache) != len(P):
                self._cache = self.model.render(P, batch.objects, batch.obj_index, batch.gap)
            rendered = self._cache
            self._calls += 1
        self.n_evals += len(P)
        _, S = self.model.energy_and_score(
            torch.as_tensor(P, dtype=DTYPE), batch, torch.as_tensor(t, dtype=DTYPE), rendered=rendered
        )
        return S.detach().numpy()


def _rank_t(model: EnergyModel, config: PipelineConfig | None) -> float:
    if config is not None and config.rank_t is not None:
        return float(config.rank_t)
    return model.schedule.eps


def prefilter(model: EnergyModel, candidates: np.ndarray, obj: ObjectModel, obs: TactileImprint, K: int, t: float | None = None):
    """Keep the ``K`` highest-energy candidates, in descending energy order.

    Returns ``(kept, energies_of_kept, indices)``; ties go to the lower index.
    """
    candidates = np.asarray(candidates, dtype=float).reshape(-1, 9)
    if not 1 <= K <= len(candidates):
        raise ConfigError(f"K={K} must lie in [1, {len(candidates)}]")
    E = Scorer(model, obj, obs).energies(candidates, model.schedule.eps if t is None else t)
    order = top_k_indices(E, K)
    return candidates[order], E[order], order


def top_k_indices(E: np.ndarray, K: int) -> np.ndarray:
    return np.argsort(-np.asarray(E), kind="stable")[:K]


def refine_candidates(
    model: EnergyModel,
    candidates: np.ndarray,
    obj: ObjectModel,
    obs: TactileImprint,
    t0: float,
    tol=(1e-3, 1e-4),
    render_every: int = 1,
) -> tuple[np.ndarray, list[OdeReport]]:
    """Integrate each candidate's PF-ODE from ``t0`` down to eps; order preserved."""
    schedule = model.schedule
    if not (schedule.eps < t0 <= 1.0):
        raise ConfigError(f"t0={t0} outside (eps, 1]")
    scorer = Scorer(model, obj, obs, render_every)

    def rhs(P, t):
        _, g = schedule.sigma(np.clip(t, schedule.eps, 1.0))
        return -np.asarray(g)[:, None] * scorer.scores(P, t.clip(schedule.eps, 1.0))

    reports = integrate_batch(rhs, np.asarray(candidates, float).reshape(-1, 9), t0, schedule.eps, tol, raise_on_underflow=False)
    if all(r.failed for r in reports):
        raise RefinementFailed("every candidate hit the step-size floor")
    return np.stack([r.final_state for r in reports]), reports


def postrank(model: EnergyModel, refined: np.ndarray, obj: ObjectModel, obs: TactileImprint, t: float | None = None):
    """Highest-energy candidate (ties to the lowest index): ``(pose, index, energies)``."""
    refined = np.asarray(refined, dtype=float).reshape(-1, 9)
    if len(refined) == 0:
        raise NoCandidates("no candidates to rank")
    E = Scorer(model, obj, obs).energies(refined, model.schedule.eps if t is None else t)
    i = int(np.argmax(E))
    return vec_to_pose(refined[i], model.cfg.workspace), i, E


def estimate_uncertainty(candidates: Sequence[RigidPose], obj: ObjectModel) -> float:
    """Mean ADD/ADD-S (mm) of the candidates to their chordal mean pose."""
    if len(candidates) == 0:
        raise NoCandidates("uncertainty needs at least one candidate")
    center = mean_pose(candidates)
    return float(np.mean([pose_distance(c, center, obj) for c in candidates]))


def _spread(candidates: Sequence[RigidPose], obj: ObjectModel) -> float:
    # S^2 is a diagnostic: spread-out unrefined candidates may have no mean rotation
    try:
        return estimate_uncertainty(candidates, obj)
    except DegenerateMean:
        return float("nan")


def select_grasp(reports: Sequence[float]) -> int:
    """Index of the lowest-uncertainty grasp (ties to the lowest index)."""
    if len(reports) == 0:
        raise NoCandidates("no grasps to choose from")
    return int(np.argmin(np.asarray(reports, dtype=float)))


def _to_poses(P: np.ndarray, workspace: float) -> list[RigidPose]:
    return [vec_to_pose(p, workspace) for p in P]


def run_stages(
    model: EnergyModel,
    obj: ObjectModel,
    obs: TactileImprint,
    prior: np.ndarray,
    config: PipelineConfig,
    t0: float,
    rng: np.random.Generator,
) -> EstimationResult:
    """Apply the enabled stages to an explicit set of prior candidates."""
    W = model.cfg.workspace
    rank_t = _rank_t(model, config)
    K = min(config.K, len(prior))
    if config.stages.prefilter:
        cands, _, _ = prefilter(model, prior, obj, obs, K, rank_t)
    else:
        pick = np.sort(rng.choice(len(prior), size=K, replace=False))
        cands = prior[pick]
    if config.stages.refine:
        refined, reports = refine_candidates(model, cands, obj, obs, t0, config.ode_tol, config.render_every)
        refined = refined[[not r.failed for r in reports]]
    else:
        refined, reports = cands, []
    poses = _to_poses(refined, W)
    if config.stages.postrank:
        pose, idx, E = postrank(model, refined, obj, obs, rank_t)
    else:
        pose, idx = mean_pose(poses), -1
        E = Scorer(model, obj, obs).energies(refined, rank_t)
    return EstimationResult(
        pose=pose,
        candidates=poses,
        energies=E,
        uncertainty=_spread(poses, obj),
        ode_reports=reports,
        candidate_vecs=refined,
        index=idx,
    )


def estimate(model: EnergyModel, obj: ObjectModel, obs: TactileImprint, config: PipelineConfig, rng: np.random.Generator) -> EstimationResult:
    """Global pose estimate from the icosphere prior."""
    config.check(model.schedule.eps)
    prior = icosphere_prior_poses(config.prior, obj, rng)
    return run_stages(model, obj, obs, prior, config, config.t0_est, rng)


@dataclass
class TrackerState:
    last_pose: RigidPose
    step_index: int = 0
    last_result: EstimationResult | None = None


def track_step(
    model: EnergyModel,
    obj: ObjectModel,
    obs_new: TactileImprint,
    state: TrackerState,
    config: PipelineConfig,
    rng: np.random.Generator,
) -> tuple[RigidPose, TrackerState]:
    """One tracking update: Gaussian prior around the last pose, short refinement, max energy.

    The returned state carries the full :class:`EstimationResult` of the update.
    """
    W = model.cfg.workspace
    center = pose_to_vec(state.last_pose, W)
    prior = center + config.sigma_track * rng.standard_normal((config.K, 9))
    if config.stages.refine:
        refined, reports = refine_candidates(model, prior, obj, obs_new, config.t0_track, config.ode_tol, config.render_every)
        refined = refined[[not r.failed for r in reports]]
    else:
        refined, reports = prior, []
    pose, idx, E = postrank(model, refined, obj, obs_new, _rank_t(model, config))
    poses = _to_poses(refined, W)
    result = EstimationResult(pose, poses, E, _spread(poses, obj), reports, refined, idx)
    return pose, TrackerState(pose, state.step_index + 1, result)


def candidate_mean_error(result: EstimationResult, gt: RigidPose, obj: ObjectModel) -> float:
    """Average error of the refined candidates themselves (the post-rank-off reporting)."""
    return float(np.mean([pose_distance(c, gt, obj) for c in result.candidates]))
