"""Render-compare energy network.

``Phi(p, O, T, t)`` is a 9-vector; the energy is ``E = <Phi, p>`` and the score is
its exact input gradient ``Phi + J_Phi^T p``.  The rendered imprint enters the
network as data: the renderer is not differentiable, so the pose reaches the
score only through the direct pose input of the fusion MLP.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .diffusion import NoiseSchedule, dsm_loss
from .errors import ConfigError, CorruptCheckpoint, NonFiniteLoss, ShapeMismatch, VersionMismatch
from .geom import WORKSPACE_MM, ObjectModel, pose_to_vec, vecs_to_rt
from .simulator import NOMINAL_INDENTATION, Sample, SensorConfig, TactileImprint, augment_depth, draw_mask, render_batch

CKPT_HEADER = "ebmpose-ckpt v1"
DTYPE = torch.float64


@dataclass
class ArchConfig:
    n_sensors: int = 2
    grid_h: int = 16
    grid_w: int = 16
    pixel_pitch: float = 1.0
    max_depth: float = 1.0
    enc_hidden: int = 128
    enc_out: int = 128
    obj_hidden: int = 64
    obj_out: int = 128
    obj_points: int = 256
    time_dim: int = 64
    fusion_width: int = 256
    workspace: float = WORKSPACE_MM
    render_indentation: float = NOMINAL_INDENTATION
    sigma_min: float = 0.01
    sigma_max: float = 1.0
    eps: float = 1e-5
    time_input: bool = True  # False gives the regression baseline's encoder stack

    @property
    def sensor(self) -> SensorConfig:
        return SensorConfig(self.grid_h, self.grid_w, 5.0, self.pixel_pitch, self.max_depth, self.n_sensors)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.eps)

    @classmethod
    def for_sensor(cls, sensor: SensorConfig, schedule: NoiseSchedule = NoiseSchedule(), **kw) -> ArchConfig:
        return cls(
            n_sensors=sensor.n_sensors,
            grid_h=sensor.grid_h,
            grid_w=sensor.grid_w,
            pixel_pitch=sensor.pixel_pitch,
            max_depth=sensor.max_depth,
            sigma_min=schedule.sigma_min,
            sigma_max=schedule.sigma_max,
            eps=schedule.eps,
            **kw,
        )


def _mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class ImprintEncoder(nn.Module):
    """Two-layer MLP over one flattened imprint plus the plate half-gap."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.net = _mlp([cfg.grid_h * cfg.grid_w + 1, cfg.enc_hidden, cfg.enc_out])
        self.workspace = cfg.workspace

    def forward(self, depth: torch.Tensor, gap: torch.Tensor, present: torch.Tensor) -> torch.Tensor:
        B, k = depth.shape[:2]
        x = torch.cat([depth.reshape(B, k, -1), (gap / self.workspace)[:, None, None].expand(B, k, 1)], dim=2)
        feats = self.net(x) * present[..., None]
        return feats.reshape(B, -1)


class PointEncoder(nn.Module):
    """Per-point MLP followed by max pooling."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.net = _mlp([3, cfg.obj_hidden, cfg.obj_out])
        self.workspace = cfg.workspace

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.net(points / self.workspace).max(dim=-2).values


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        half = dim // 2
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(100.0), half, dtype=DTYPE)) * math.pi)
        self.proj = nn.Linear(2 * half, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        a = t[:, None] * self.freqs
        return self.proj(torch.cat([torch.sin(a), torch.cos(a)], dim=1))


class EnergyModel(nn.Module):
    def __init__(self, cfg: ArchConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or ArchConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.obs_encoder = ImprintEncoder(cfg)
        self.ren_encoder = ImprintEncoder(cfg)
        self.object_encoder = PointEncoder(cfg)
        width = 2 * cfg.n_sensors * cfg.enc_out + cfg.obj_out + 9
        if cfg.time_input:
            self.time_embed = TimeEmbedding(cfg.time_dim)
            width += cfg.time_dim
        else:
            self.time_embed = None
        self.fusion = _mlp([width, cfg.fusion_width, cfg.fusion_width, 9])
        torch.random.set_rng_state(gen_state)
        self.to(DTYPE)
        self._object_cache: dict[int, tuple[ObjectModel, torch.Tensor]] = {}

    @property
    def schedule(self) -> NoiseSchedule:
        return self.cfg.schedule

    @property
    def sensor(self) -> SensorConfig:
        return self.cfg.sensor

    # -- feature pieces -------------------------------------------------------

    def object_points(self, obj: ObjectModel) -> torch.Tensor:
        key = id(obj)
        hit = self._object_cache.get(key)
        if hit is None or hit[0] is not obj:
            hit = (obj, torch.as_tensor(obj.encoder_points, dtype=DTYPE))
            self._object_cache[key] = hit
        return hit[1]

    def render(self, P: np.ndarray, objects: Sequence[ObjectModel], obj_index: np.ndarray, gap: np.ndarray) -> np.ndarray:
        """Imprints at the orthonormalized poses ``P`` at the nominal indentation."""
        R, t = vecs_to_rt(P, self.cfg.workspace)
        out = np.zeros((len(P), self.cfg.n_sensors, self.cfg.grid_h, self.cfg.grid_w))
        for j, obj in enumerate(objects):
            rows = np.flatnonzero(obj_index == j)
            if rows.size:
                out[rows] = render_batch(obj.points, R[rows], t[rows], self.sensor, gap[rows], self.cfg.render_indentation)
        return out

    def phi(
        self,
        P: torch.Tensor,
        obs: ObsBatch,
        t: torch.Tensor,
        rendered: np.ndarray | None = None,
        ren_features: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Batched ``Phi``; ``rendered`` defaults to a fresh render at ``P``."""
        B = P.shape[0]
        if obs.depth.shape[1:] != (self.cfg.n_sensors, self.cfg.grid_h, self.cfg.grid_w):
            raise ShapeMismatch(f"observation shape {tuple(obs.depth.shape[1:])} does not match the model")
        if P.shape != (B, 9) or obs.depth.shape[0] != B or t.shape != (B,):
            raise ShapeMismatch("batch dimensions disagree")
        present = obs.present_t
        gap = obs.gap_t
        f_obs = self.obs_encoder(obs.depth_t, gap, present)
        if ren_features is None:
            if rendered is None:
                rendered = self.render(P.detach().numpy(), obs.objects, obs.obj_index, obs.gap)
            ren_features = self.ren_encoder(torch.as_tensor(rendered, dtype=DTYPE), gap, present)
        obj_feats = torch.stack([self.object_encoder(self.object_points(o)) for o in obs.objects])
        f_obj = obj_feats[torch.as_tensor(obs.obj_index)]
        parts = [f_obs, ren_features, f_obj]
        if self.time_embed is not None:
            parts.append(self.time_embed(t))
        parts.append(P)
        out = self.fusion(torch.cat(parts, dim=1))
        if self.time_embed is not None:
            sigma = self.cfg.sigma_min * (self.cfg.sigma_max / self.cfg.sigma_min) ** t
            out = out / sigma[:, None]
        return out

    def energy_and_score(self, P, obs, t, create_graph=False, rendered=None):
        return energy_and_score(lambda q: self.phi(q, obs, t, rendered=rendered), P, create_graph)


def energy_and_score(phi_fn: Callable[[torch.Tensor], torch.Tensor], P: torch.Tensor, create_graph: bool = False):
    """``E = <phi(P), P>`` row-wise and its exact gradient with respect to ``P``."""
    with torch.enable_grad():
        if not P.requires_grad:
            P = P.detach().requires_grad_(True)
        E = (phi_fn(P) * P).sum(dim=1)
        (S,) = torch.autograd.grad(E.sum(), P, create_graph=create_graph)
    return E, S


# ---------------------------------------------------------------------------
# observation batches


@dataclass
class ObsBatch:
    """Observations for a batch of rows; each row references one of ``objects``."""

    depth: np.ndarray  # (B, k, H, W)
    present: np.ndarray  # (B, k)
    gap: np.ndarray  # (B,)
    objects: list
    obj_index: np.ndarray  # (B,)

    @property
    def depth_t(self):
        return torch.as_tensor(self.depth, dtype=DTYPE)

    @property
    def present_t(self):
        return torch.as_tensor(self.present, dtype=DTYPE)

    @property
    def gap_t(self):
        return torch.as_tensor(self.gap, dtype=DTYPE)

    @classmethod
    def repeat(cls, obj: ObjectModel, imprint: TactileImprint, n: int) -> ObsBatch:
        return cls(
            np.broadcast_to(imprint.depth, (n,) + imprint.depth.shape).copy(),
            np.broadcast_to(imprint.present, (n, imprint.k)).copy(),
            np.full(n, imprint.plate_half_gap),
            [obj],
            np.zeros(n, dtype=int),
        )

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], objects: dict[str, ObjectModel]) -> ObsBatch:
        ids = list(dict.fromkeys(s.object_id for s in samples))
        lookup = {oid: j for j, oid in enumerate(ids)}
        return cls(
            np.stack([s.imprint.depth for s in samples]),
            np.stack([s.imprint.present for s in samples]),
            np.array([s.imprint.plate_half_gap for s in samples], dtype=float),
            [objects[oid] for oid in ids],
            np.array([lookup[s.object_id] for s in samples], dtype=int),
        )

    def take(self, rows) -> ObsBatch:
        rows = np.asarray(rows)
        return ObsBatch(self.depth[rows], self.present[rows], self.gap[rows], self.objects, self.obj_index[rows])


# ---------------------------------------------------------------------------
# single-input API


def _single(model: EnergyModel, p, obj: ObjectModel, obs: TactileImprint, t: float):
    P = torch.as_tensor(np.asarray(p, dtype=float).reshape(1, 9), dtype=DTYPE)
    return P, ObsBatch.repeat(obj, obs, 1), torch.full((1,), float(t), dtype=DTYPE)


def phi_forward(model: EnergyModel, p, obj: ObjectModel, obs: TactileImprint, t: float) -> np.ndarray:
    model.schedule._check(t)
    P, batch, tt = _single(model, p, obj, obs, t)
    with torch.no_grad():
        return model.phi(P, batch, tt)[0].numpy()


def energy(model: EnergyModel, p, obj: ObjectModel, obs: TactileImprint, t: float) -> float:
    model.schedule._check(t)
    P, batch, tt = _single(model, p, obj, obs, t)
    with torch.no_grad():
        return float((model.phi(P, batch, tt) * P).sum())


def score(model: EnergyModel, p, obj: ObjectModel, obs: TactileImprint, t: float) -> np.ndarray:
    model.schedule._check(t)
    P, batch, tt = _single(model, p, obj, obs, t)
    _, S = model.energy_and_score(P, batch, tt)
    return S[0].detach().numpy()


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 128
    n_steps: int = 50_000
    learning_rate: float = 1e-4
    aug: bool = True
    mask_prob: float = 0.0
    seed: int = 0
    fixed_present: tuple | None = None  # e.g. (True, False) for the single-sensor variant
    lr_final: float | None = None  # cosine decay to this rate over n_steps; None keeps lr constant

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_final is not None and not (0.0 <= self.lr_final <= self.learning_rate):
            raise ConfigError("lr_final must lie in [0, learning_rate]")
        if not (0.0 <= self.mask_prob <= 0.5):
            raise ConfigError("mask_prob must lie in [0, 0.5]")


@dataclass
class DsmBatch:
    """A fully drawn training batch: clean poses, noise, times and observations."""

    p0: np.ndarray
    z: np.ndarray
    t: np.ndarray
    obs: ObsBatch


def draw_batch(
    samples: Sequence[Sample],
    objects: dict[str, ObjectModel],
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
    workspace: float = WORKSPACE_MM,
) -> DsmBatch:
    idx = rng.integers(len(samples), size=config.batch_size)
    chosen = [samples[i] for i in idx]
    obs = ObsBatch.from_samples(chosen, objects)
    k = obs.depth.shape[1]
    if config.fixed_present is not None:
        obs.present = np.broadcast_to(np.asarray(config.fixed_present, bool), obs.present.shape).copy()
    elif config.mask_prob > 0:
        obs.present = np.stack([draw_mask(k, config.mask_prob, rng) for _ in chosen])
    if config.aug:
        obs.depth = augment_depth(obs.depth, rng)
    p0 = np.stack([pose_to_vec(s.pose, workspace) for s in chosen])
    t = rng.uniform(schedule.eps, 1.0, size=len(chosen))
    z = rng.standard_normal(p0.shape)
    return DsmBatch(p0, z, t, obs)


def batch_loss(model: EnergyModel, batch: DsmBatch, create_graph: bool = True) -> torch.Tensor:
    """DSM objective on a drawn batch (differentiable in the parameters)."""
    schedule = model.schedule
    sigma = schedule.sigma_value(batch.t)
    pt = batch.p0 + sigma[:, None] * batch.z
    target = (batch.p0 - pt) / (sigma * sigma)[:, None]
    P = torch.as_tensor(pt, dtype=DTYPE)
    tt = torch.as_tensor(batch.t, dtype=DTYPE)
    _, S = model.energy_and_score(P, batch.obs, tt, create_graph=create_graph)
    weight = torch.as_tensor(sigma * sigma, dtype=DTYPE)
    return dsm_loss(S, torch.as_tensor(target, dtype=DTYPE), weight)


@dataclass
class Trainer:
    """Holds a model with its Adam state; ``step`` is one DSM update."""

    model: nn.Module
    config: TrainConfig
    optimizer: torch.optim.Optimizer = None
    history: list = field(default_factory=list)
    scheduler: object = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        if self.config.lr_final is not None and self.scheduler is None:
            self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, T_max=max(1, self.config.n_steps), eta_min=self.config.lr_final)

    def step(self, batch, loss_fn=batch_loss) -> float:
        self.optimizer.zero_grad(set_to_none=True)
        loss = loss_fn(self.model, batch)
        loss.backward()
        for p in self.model.parameters():
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                raise NonFiniteLoss("non-finite parameter gradient")
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        value = float(loss.detach())
        self.history.append(value)
        return value


def train_step(model, batch, trainer: Trainer) -> float:
    return trainer.step(batch)


def train_energy_model(
    model: EnergyModel,
    samples: Sequence[Sample],
    objects: dict[str, ObjectModel],
    config: TrainConfig,
    log_every: int = 0,
    log: Callable[[str], None] = print,
) -> list[float]:
    """Run ``config.n_steps`` DSM updates; returns the per-step loss curve."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
    trainer = Trainer(model, config)
    for i in range(config.n_steps):
        batch = draw_batch(samples, objects, model.schedule, config, rng, model.cfg.workspace)
        loss = trainer.step(batch)
        if log_every and (i + 1) % log_every == 0:
            recent = trainer.history[-log_every:]
            log(f"step {i + 1:6d}  loss {np.mean(recent):.4f}")
    return trainer.history


# ---------------------------------------------------------------------------
# checkpoints


def _arch_to_json(model: nn.Module) -> str:
    return json.dumps({"class": type(model).__name__, "arch": dataclasses.asdict(model.cfg)}, sort_keys=True)


def save_checkpoint(model: nn.Module, path) -> None:
    """Versioned text header followed by parameters as little-endian float64."""
    state = model.state_dict()
    names = list(state.keys())
    blob = b"".join(state[n].detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes() for n in names)
    header = {
        "config": json.loads(_arch_to_json(model)),
        "tensors": [[n, list(state[n].shape)] for n in names],
        "nbytes": len(blob),
        "crc32": zlib.crc32(blob),
    }
    with open(path, "wb") as fh:
        fh.write((CKPT_HEADER + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(blob)


def load_checkpoint(path) -> nn.Module:
    with open(path, "rb") as fh:
        data = fh.read()
    first, _, rest = data.partition(b"\n")
    magic = first.decode(errors="replace").strip()
    if magic != CKPT_HEADER:
        if magic.startswith("ebmpose-ckpt"):
            raise VersionMismatch(f"unsupported checkpoint version {magic!r}")
        raise CorruptCheckpoint("not an ebmpose checkpoint")
    line, sep, blob = rest.partition(b"\n")
    if not sep:
        raise CorruptCheckpoint("missing checkpoint header")
    try:
        header = json.loads(line)
    except json.JSONDecodeError:
        raise CorruptCheckpoint("unreadable checkpoint header") from None
    if not isinstance(header, dict) or not {"config", "tensors", "nbytes", "crc32"} <= set(header):
        raise CorruptCheckpoint("incomplete checkpoint header")
    if len(blob) != header["nbytes"]:
        raise CorruptCheckpoint(f"expected {header['nbytes']} parameter bytes, found {len(blob)}")
    if zlib.crc32(blob) != header["crc32"]:
        raise CorruptCheckpoint("parameter CRC mismatch")
    try:
        conf = header["config"]
        cfg = ArchConfig(**conf["arch"])
        if conf["class"] == "EnergyModel":
            model = EnergyModel(cfg)
        elif conf["class"] == "RegressorModel":
            from .baselines import RegressorModel

            model = RegressorModel(cfg)
        else:
            raise CorruptCheckpoint(f"unknown model class {conf['class']!r}")
        values = np.frombuffer(blob, dtype="<f8")
        state = {}
        offset = 0
        for name, shape in header["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            state[name] = torch.as_tensor(values[offset : offset + n].copy().reshape(shape), dtype=DTYPE)
            offset += n
        model.load_state_dict(state)
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CorruptCheckpoint(f"inconsistent checkpoint: {exc}") from None
    return model
