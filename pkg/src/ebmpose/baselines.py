"""Comparison methods: direct regression, point-to-point ICP and imprint-space grid matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .energynet import DTYPE, ArchConfig, ImprintEncoder, ObsBatch, PointEncoder, TrainConfig, Trainer, _mlp, draw_batch
from .errors import DegenerateAlignment, NoCandidates
from .geom import ObjectModel, RigidPose, axis_angle_matrix, vec_to_pose
from .simulator import NOMINAL_INDENTATION, GraspSpec, Sample, SensorConfig, TactileImprint, compose_grasp_pose, default_grasps, render_batch


# ---------------------------------------------------------------------------
# regression


class RegressorModel(nn.Module):
    """Observation and object encoders feeding a head that outputs the pose vector."""

    def __init__(self, cfg: ArchConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ArchConfig(time_input=False)
        if cfg.time_input:
            cfg = ArchConfig(**{**cfg.__dict__, "time_input": False})
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.obs_encoder = ImprintEncoder(cfg)
        self.object_encoder = PointEncoder(cfg)
        width = cfg.n_sensors * cfg.enc_out + cfg.obj_out
        self.head = _mlp([width, cfg.fusion_width, cfg.fusion_width, 9])
        torch.random.set_rng_state(gen_state)
        self.to(DTYPE)

    def forward(self, obs: ObsBatch) -> torch.Tensor:
        f_obs = self.obs_encoder(obs.depth_t, obs.gap_t, obs.present_t)
        pts = [torch.as_tensor(o.encoder_points, dtype=DTYPE) for o in obs.objects]
        obj_feats = torch.stack([self.object_encoder(p) for p in pts])
        return self.head(torch.cat([f_obs, obj_feats[torch.as_tensor(obs.obj_index)]], dim=1))


def regression_loss(model: RegressorModel, batch) -> torch.Tensor:
    """Translation MSE plus 6D-rotation MSE, averaged over the batch."""
    pred = model(batch.obs)
    target = torch.as_tensor(batch.p0, dtype=DTYPE)
    d = (pred - target) ** 2
    return (d[:, :6].sum(dim=1) + d[:, 6:].sum(dim=1)).mean()


def train_regressor(
    samples: Sequence[Sample],
    objects: dict[str, ObjectModel],
    config: TrainConfig,
    arch: ArchConfig | None = None,
    log_every: int = 0,
    log: Callable[[str], None] = print,
    model: RegressorModel | None = None,
) -> RegressorModel:
    """Fit the regressor with the same batching, optimizer and augmentation as the energy model."""
    if len(samples) == 0:
        raise NoCandidates("empty training set")
    model = model or RegressorModel(arch)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
    trainer = Trainer(model, config)
    for i in range(config.n_steps):
        batch = draw_batch(samples, objects, model.cfg.schedule, config, rng, model.cfg.workspace)
        trainer.step(batch, regression_loss)
        if log_every and (i + 1) % log_every == 0:
            log(f"step {i + 1:6d}  loss {np.mean(trainer.history[-log_every:]):.5f}")
    model.history = trainer.history
    return model


def regress(model: RegressorModel, obj: ObjectModel, obs: TactileImprint) -> RigidPose:
    with torch.no_grad():
        p = model(ObsBatch.repeat(obj, obs, 1))[0].numpy()
    return vec_to_pose(p, model.cfg.workspace)


# ---------------------------------------------------------------------------
# ICP stand-in


def contact_points(obs: TactileImprint, sensor: SensorConfig) -> np.ndarray:
    """Back-project contact pixels to TCP-frame surface points.

    The indentation is not observed, so each sensor's deepest pixel is taken to
    touch the undeformed plate plane.
    """
    H, W, pp = sensor.grid_h, sensor.grid_w, sensor.pixel_pitch
    g = obs.plate_half_gap
    out = []
    for s in range(obs.k):
        if not obs.present[s]:
            continue
        d = obs.depth[s]
        rows, cols = np.nonzero(d > 0)
        if rows.size == 0:
            continue
        clear = d.max() - d[rows, cols]
        x = -g + clear if s == 0 else g - clear
        y = (cols + 0.5 - W / 2) * pp
        z = (rows + 0.5 - H / 2) * pp
        out.append(np.stack([x, y, z], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 3))


def visible_points(model: ObjectModel, pose: RigidPose, obs: TactileImprint, sensor: SensorConfig, indentation: float) -> np.ndarray:
    """Model points (object frame) that land on a contact pixel within reach of that plate."""
    H, W, pp = sensor.grid_h, sensor.grid_w, sensor.pixel_pitch
    X = pose.apply(model.points)
    col = np.floor(X[:, 1] / pp + W / 2).astype(int)
    row = np.floor(X[:, 2] / pp + H / 2).astype(int)
    inside = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    keep = np.zeros(len(X), dtype=bool)
    g = obs.plate_half_gap
    for s, clear in enumerate((X[:, 0] + g, g - X[:, 0])):
        if s >= obs.k or not obs.present[s]:
            continue
        hit = np.zeros(len(X), dtype=bool)
        hit[inside] = obs.depth[s][row[inside], col[inside]] > 0
        keep |= hit & (clear <= indentation)
    return model.points[keep]


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``R, t`` with ``R @ src_i + t ~ dst_i``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - cs, dst - cd
    if np.linalg.matrix_rank(A, tol=1e-9) < 2 or np.linalg.matrix_rank(B, tol=1e-9) < 2:
        raise DegenerateAlignment("correspondences are collinear or coincident")
    U, _, Vt = np.linalg.svd(B.T @ A)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, cd - R @ cs


@dataclass
class IcpResult:
    pose: RigidPose
    n_iter: int
    objective: list = field(default_factory=list)  # mean squared residual after each alignment


def icp_refine(
    obs_points: np.ndarray,
    model: ObjectModel,
    init: RigidPose,
    max_iter: int = 50,
    target: np.ndarray | None = None,
    tol: float = 1e-4,
) -> IcpResult:
    """Point-to-point ICP of TCP-frame contact points against the object cloud.

    ``target`` selects the object-frame cloud to match (the full model for the
    Global variant, a visible subset for Partial).  The objective is
    non-increasing across iterations.
    """
    obs_points = np.asarray(obs_points, dtype=float).reshape(-1, 3)
    if len(obs_points) < 3:
        raise DegenerateAlignment(f"need at least 3 contact points, got {len(obs_points)}")
    target = model.points if target is None else np.asarray(target, dtype=float)
    if len(target) < 3:
        raise DegenerateAlignment("target cloud has fewer than 3 points")
    tree = cKDTree(target)
    R, t = init.rotation.copy(), init.translation.copy()
    history = []
    n = 0
    for n in range(1, max_iter + 1):
        local = (obs_points - t) @ R  # into the object frame
        _, nn_idx = tree.query(local)
        matched = target[nn_idx]
        R_new, t_new = kabsch(matched, obs_points)
        res = obs_points - (matched @ R_new.T + t_new)
        history.append(float(np.mean(np.sum(res * res, axis=1))))
        dt = np.linalg.norm(t_new - t)
        cos = np.clip((np.trace(R_new.T @ R) - 1) / 2, -1.0, 1.0)
        R, t = R_new, t_new
        if dt < tol and np.arccos(cos) < tol:
            break
    return IcpResult(RigidPose(R, t), n, history)


def perturb_pose(pose: RigidPose, rng: np.random.Generator, sigma_mm: float = 2.0, sigma_deg: float = 5.0) -> RigidPose:
    """Noisy initialization: Gaussian translation and a random-axis Gaussian-angle rotation."""
    axis = rng.standard_normal(3)
    angle = np.deg2rad(sigma_deg) * rng.standard_normal()
    dR = axis_angle_matrix(axis / np.linalg.norm(axis), angle)
    return RigidPose(dR @ pose.rotation, pose.translation + sigma_mm * rng.standard_normal(3))


# ---------------------------------------------------------------------------
# grid matching


@dataclass
class PoseGrid:
    """Poses on a regular grid over the grasp distribution.

    For each approach axis the in-plane angle steps by ``deg`` over a full turn
    and the (y, z) offset by ``mm`` over the grasp's offset range; the closing
    axis is centred, as in grasp synthesis.
    """

    poses: list
    gaps: np.ndarray
    mm: float
    deg: float

    def __len__(self):
        return len(self.poses)

    def render(self, model: ObjectModel, sensor: SensorConfig, indentation: float = NOMINAL_INDENTATION, chunk: int = 512) -> np.ndarray:
        R = np.stack([p.rotation for p in self.poses])
        t = np.stack([p.translation for p in self.poses])
        out = [
            render_batch(model.points, R[i : i + chunk], t[i : i + chunk], sensor, self.gaps[i : i + chunk], indentation)
            for i in range(0, len(self.poses), chunk)
        ]
        return np.concatenate(out)


def _axis_values(b: float, step: float) -> np.ndarray:
    n = int(np.floor(2 * b / step + 1e-9))
    return (np.arange(n + 1) - n / 2) * step


def make_pose_grid(model: ObjectModel, mm: float = 2.5, deg: float = 6.0, grasps: Sequence[GraspSpec] | None = None) -> PoseGrid:
    grasps = list(grasps) if grasps is not None else default_grasps(model)
    poses, gaps = [], []
    for g in grasps:
        r = g.inplane_rot_range
        n_theta = max(1, int(round(2 * r / np.deg2rad(deg)))) if r > 0 else 1
        thetas = -r + np.arange(n_theta) * (2 * r / n_theta) if r > 0 else [0.0]
        ys, zs = _axis_values(g.xy_range[0], mm), _axis_values(g.xy_range[1], mm)
        for th in thetas:
            for y in ys:
                for z in zs:
                    pose, gap = compose_grasp_pose(model, g, float(th), (y, z))
                    poses.append(pose)
                    gaps.append(gap)
    return PoseGrid(poses, np.asarray(gaps), mm, deg)


def imprint_distances(obs: TactileImprint, rendered: np.ndarray) -> np.ndarray:
    """Squared L2 distance between ``obs`` and each rendered imprint over present sensors."""
    m = obs.present.astype(float)[None, :, None, None]
    d = (rendered - obs.depth[None]) * m
    return d.reshape(len(rendered), -1).__pow__(2).sum(axis=1)


def grid_match(
    model: ObjectModel,
    obs: TactileImprint,
    grid: PoseGrid,
    sensor: SensorConfig,
    rendered: np.ndarray | None = None,
) -> RigidPose:
    """Grid pose whose rendered imprint is closest to ``obs`` (ties to the lowest index)."""
    if len(grid) == 0:
        raise NoCandidates("empty pose grid")
    if rendered is None:
        rendered = grid.render(model, sensor)
    return grid.poses[int(np.argmin(imprint_distances(obs, rendered)))]
