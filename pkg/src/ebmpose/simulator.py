"""Rigid-plate tactile imprint simulator.

The gripper closes along the TCP x-axis.  The left plate sits at ``x = -gap`` with
its inward normal along +x, the right plate at ``x = +gap`` facing -x.  Both
plates image the TCP (y, z) plane on the same ``grid_h x grid_w`` pixel lattice
(rows along z, columns along y) centred on the TCP origin.  A pixel reads how far
the plate, advanced by the indentation, presses past the nearest object point in
that pixel's column.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BadSpec, ConfigError, ParseError, RejectionBudgetExceeded, VersionMismatch
from .geom import REVOLUTE_STEPS, ObjectModel, RigidPose, Symmetry, axis_angle_matrix

DATASET_HEADER = "ebmpose-dataset v1"
NOMINAL_INDENTATION = 0.6
MIN_CONTACT_FRACTION = 0.05
MAX_CONSECUTIVE_REJECTIONS = 1000


@dataclass(frozen=True)
class SensorConfig:
    grid_h: int = 16
    grid_w: int = 16
    plate_half_gap: float = 5.0
    pixel_pitch: float = 1.0
    max_depth: float = 1.0
    n_sensors: int = 2

    def __post_init__(self):
        if self.grid_h < 4 or self.grid_w < 4:
            raise ConfigError("sensor grid must be at least 4x4")
        if not (self.pixel_pitch > 0 and self.max_depth > 0):
            raise ConfigError("pixel_pitch and max_depth must be positive")
        if self.n_sensors not in (1, 2):
            raise ConfigError("n_sensors must be 1 or 2")


@dataclass(eq=False)
class TactileImprint:
    depth: np.ndarray  # (k, H, W) mm
    present: np.ndarray  # (k,) bool
    plate_half_gap: float  # gripper half-opening at contact, mm
    contact_fraction: np.ndarray = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.present = np.asarray(self.present, dtype=bool)
        self.plate_half_gap = float(self.plate_half_gap)
        if self.contact_fraction is None:
            self.contact_fraction = contact_fractions(self.depth)

    @property
    def k(self) -> int:
        return self.depth.shape[0]

    def masked(self, present) -> TactileImprint:
        return TactileImprint(self.depth, np.asarray(present, dtype=bool), self.plate_half_gap, self.contact_fraction)

    def __eq__(self, other):
        if not isinstance(other, TactileImprint):
            return NotImplemented
        return (
            np.array_equal(self.depth, other.depth)
            and np.array_equal(self.present, other.present)
            and self.plate_half_gap == other.plate_half_gap
        )


@dataclass(eq=False)
class Sample:
    pose: RigidPose
    imprint: TactileImprint
    object_id: str = "object"
    indentation: float = NOMINAL_INDENTATION

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.object_id == other.object_id
            and np.array_equal(self.pose.rotation, other.pose.rotation)
            and np.array_equal(self.pose.translation, other.pose.translation)
            and self.imprint == other.imprint
            and self.indentation == other.indentation
        )


def contact_fractions(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth)
    return (depth > 0).reshape(depth.shape[0], -1).mean(axis=1)


# ---------------------------------------------------------------------------
# parametric shapes


@dataclass(frozen=True)
class ShapeSpec:
    """``kind`` is one of box, cylinder, tube, l_bracket, notched_plate."""

    kind: str
    dims: tuple
    n_points: int = 2048
    object_id: str | None = None


def _face_grid(n_u: int, n_v: int, half_u: float, half_v: float):
    # edges included so the sampled box keeps its true corners (and diameter)
    u = np.linspace(-half_u, half_u, n_u + 1)
    v = np.linspace(-half_v, half_v, n_v + 1)
    return np.meshgrid(u, v, indexing="ij")


def _box_surface(half: np.ndarray, spacing: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    pts = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        n_a = max(1, int(round(2 * half[a] / spacing)))
        n_b = max(1, int(round(2 * half[b] / spacing)))
        ga, gb = _face_grid(n_a, n_b, half[a], half[b])
        for sign in (-1.0, 1.0):
            face = np.zeros((ga.size, 3))
            face[:, a] = ga.ravel()
            face[:, b] = gb.ravel()
            face[:, axis] = sign * half[axis]
            pts.append(face)
    # faces share their edge rows
    return np.unique(np.concatenate(pts), axis=0) + np.asarray(center, float)


def _inside_box(pts: np.ndarray, half: np.ndarray, center, tol: float = 1e-9) -> np.ndarray:
    return np.all(np.abs(pts - np.asarray(center, float)) < np.asarray(half) - tol, axis=1)


def _n_angular(r: float, spacing: float) -> int:
    # multiples of the revolute discretization keep the sampling closed under it
    q = REVOLUTE_STEPS
    return q * max(1, int(np.ceil(2 * np.pi * r / spacing / q)))


def _ring_points(r_lo: float, r_hi: float, spacing: float) -> np.ndarray:
    n_r = max(1, int(round((r_hi - r_lo) / spacing)))
    out = []
    for j in range(n_r):
        r = r_lo + (j + 0.5) * (r_hi - r_lo) / n_r
        n_t = _n_angular(r, spacing)
        th = 2 * np.pi * np.arange(n_t) / n_t
        out.append(np.column_stack([r * np.cos(th), r * np.sin(th)]))
    return np.concatenate(out)


def _cylinder_side(r: float, half_h: float, spacing: float) -> np.ndarray:
    n_t = _n_angular(r, spacing)
    n_z = max(1, int(round(2 * half_h / spacing)))
    th = 2 * np.pi * np.arange(n_t) / n_t
    z = -half_h + (np.arange(n_z) + 0.5) * (2 * half_h / n_z)
    T, Z = np.meshgrid(th, z, indexing="ij")
    return np.column_stack([r * np.cos(T.ravel()), r * np.sin(T.ravel()), Z.ravel()])


def _caps(r_lo: float, r_hi: float, half_h: float, spacing: float) -> np.ndarray:
    ring = _ring_points(r_lo, r_hi, spacing)
    top = np.column_stack([ring, np.full(len(ring), half_h)])
    bottom = np.column_stack([ring, np.full(len(ring), -half_h)])
    return np.concatenate([top, bottom])


def _sample_shape(kind: str, d: Sequence[float], spacing: float):
    """Surface points, symmetry and grasp axes for a shape at a given point spacing."""
    ex, ey, ez = np.eye(3)
    if kind == "box":
        l, w, h = d
        half = np.array([l, w, h]) / 2
        pts = _box_surface(half, spacing)
        if np.isclose(l, w) and np.isclose(w, h):
            sym = Symmetry("quarter_turn", (0, 0, 1))
        elif np.isclose(l, w):
            sym = Symmetry("quarter_turn", (0, 0, 1))
        elif np.isclose(w, h):
            sym = Symmetry("quarter_turn", (1, 0, 0))
        elif np.isclose(l, h):
            sym = Symmetry("quarter_turn", (0, 1, 0))
        else:
            sym = Symmetry("half_turn", (0, 0, 1))
        return pts, sym, (tuple(ex), tuple(ey), tuple(ez))
    if kind == "cylinder":
        r, h = d
        pts = np.concatenate([_cylinder_side(r, h / 2, spacing), _caps(0.0, r, h / 2, spacing)])
        return pts, Symmetry("revolute", (0, 0, 1)), (tuple(ex), tuple(ez))
    if kind == "tube":
        r_out, r_in, h = d
        if r_in >= r_out:
            raise BadSpec("tube inner radius must be smaller than outer radius")
        pts = np.concatenate(
            [_cylinder_side(r_out, h / 2, spacing), _cylinder_side(r_in, h / 2, spacing), _caps(r_in, r_out, h / 2, spacing)]
        )
        return pts, Symmetry("revolute", (0, 0, 1)), (tuple(ex), tuple(ez))
    if kind == "l_bracket":
        # base plate l x w x t in the xy-plane, upright flange w x h x t along one edge
        l, w, h, t = d
        if t >= min(l, h):
            raise BadSpec("l_bracket thickness must be smaller than its legs")
        base_half, base_c = np.array([l, w, t]) / 2, np.array([0.0, 0.0, t / 2])
        up_half, up_c = np.array([t, w, h]) / 2, np.array([-l / 2 + t / 2, 0.0, h / 2])
        a = _box_surface(base_half, spacing, base_c)
        b = _box_surface(up_half, spacing, up_c)
        pts = np.concatenate([a[~_inside_box(a, up_half, up_c)], b[~_inside_box(b, base_half, base_c)]])
        return pts, Symmetry("none"), (tuple(ex), tuple(ey), tuple(ez))
    if kind == "notched_plate":
        # plate l x w x h with a rectangular notch nl x nw cut from the +x edge, off-centre in y
        l, w, h, nl, nw = d
        if nl >= l or nw >= w:
            raise BadSpec("notch must be smaller than the plate")
        half = np.array([l, w, h]) / 2
        yc = 0.5 * (w / 2 - nw / 2)
        n_half, n_c = np.array([nl, nw / 2, h]), np.array([l / 2, yc, 0.0])
        a = _box_surface(half, spacing)
        walls = _box_surface(n_half, spacing, n_c)
        walls = walls[np.all(np.abs(walls) <= half + 1e-9, axis=1)]
        pts = np.concatenate([a[~_inside_box(a, n_half, n_c)], walls])
        return pts, Symmetry("none"), (tuple(ex), tuple(ey), tuple(ez))
    raise BadSpec(f"unknown shape kind {kind!r}")


_SHAPE_ARITY = {"box": 3, "cylinder": 2, "tube": 3, "l_bracket": 4, "notched_plate": 5}
_SHAPE_AREA = {
    "box": lambda d: 2 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2]),
    "cylinder": lambda d: 2 * np.pi * d[0] * d[1] + 2 * np.pi * d[0] ** 2,
    "tube": lambda d: 2 * np.pi * (d[0] + d[1]) * d[2] + 2 * np.pi * (d[0] ** 2 - d[1] ** 2),
    "l_bracket": lambda d: 2 * (d[0] * d[1] + d[1] * d[2]) + 2 * d[3] * (d[0] + d[2] + 2 * d[1]),
    "notched_plate": lambda d: 2 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2]),
}


def make_shape(spec: ShapeSpec) -> ObjectModel:
    """Quasi-uniform surface point cloud of a parametric stand-in part (mm)."""
    if spec.kind not in _SHAPE_ARITY:
        raise BadSpec(f"unknown shape kind {spec.kind!r}")
    dims = tuple(float(v) for v in spec.dims)
    if len(dims) != _SHAPE_ARITY[spec.kind]:
        raise BadSpec(f"{spec.kind} takes {_SHAPE_ARITY[spec.kind]} dimensions, got {len(dims)}")
    if not all(v > 0 for v in dims):
        raise BadSpec("shape dimensions must be positive")
    target = max(int(spec.n_points), 1024)
    spacing = np.sqrt(_SHAPE_AREA[spec.kind](dims) / target)
    pts, sym, axes = _sample_shape(spec.kind, dims, spacing)
    while len(pts) < 1024:
        spacing *= 0.85
        pts, sym, axes = _sample_shape(spec.kind, dims, spacing)
    pts = pts - pts.mean(axis=0)
    name = spec.object_id or f"{spec.kind}_" + "x".join(f"{v:g}" for v in dims)
    model = ObjectModel(points=pts, symmetry=sym, grasp_axes=axes, object_id=name)
    model.check()
    return model


def parse_shape(text: str) -> ShapeSpec:
    """Parse ``kind:d1,d2,...`` (e.g. ``box:20,10,6``)."""
    try:
        kind, rest = text.split(":", 1)
        dims = tuple(float(v) for v in rest.split(","))
    except ValueError:
        raise BadSpec(f"cannot parse shape {text!r}; expected kind:d1,d2,...") from None
    return ShapeSpec(kind.strip(), dims)


# ---------------------------------------------------------------------------
# rendering


def render_batch(points: np.ndarray, R: np.ndarray, t: np.ndarray, sensor: SensorConfig, gap, indentation) -> np.ndarray:
    """Render ``(B, 2, H, W)`` depth imprints for ``B`` poses of one object.

    ``R`` is ``(B, 3, 3)``, ``t`` is ``(B, 3)`` in mm; ``gap`` and ``indentation`` are
    scalars or length-``B`` arrays.  Pixel columns act as a uniform spatial hash
    over the model points, so each point only touches the pixel it falls in.
    """
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    t = np.asarray(t, dtype=float).reshape(-1, 3)
    B = R.shape[0]
    H, W, pp = sensor.grid_h, sensor.grid_w, sensor.pixel_pitch
    gap = np.broadcast_to(np.asarray(gap, dtype=float), (B,))
    ind = np.broadcast_to(np.asarray(indentation, dtype=float), (B,))
    X = np.matmul(points[None, :, :], np.transpose(R, (0, 2, 1))) + t[:, None, :]
    col = np.floor(X[..., 1] / pp + W / 2).astype(np.int64)
    row = np.floor(X[..., 2] / pp + H / 2).astype(np.int64)
    ok = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    b_idx = np.broadcast_to(np.arange(B)[:, None], ok.shape)[ok]
    pix = (row * W + col)[ok]
    x = X[..., 0][ok]
    g = gap[b_idx]
    clearance = np.full(B * 2 * H * W, np.inf)
    np.minimum.at(clearance, (b_idx * 2) * (H * W) + pix, x + g)
    np.minimum.at(clearance, (b_idx * 2 + 1) * (H * W) + pix, g - x)
    clearance = clearance.reshape(B, 2, H, W)
    lim = np.minimum(ind, sensor.max_depth)[:, None, None, None]
    depth = np.clip(ind[:, None, None, None] - clearance, 0.0, lim)
    return depth[:, : sensor.n_sensors]


def render_imprint(model: ObjectModel, pose: RigidPose, sensor: SensorConfig, indentation: float, gap: float | None = None) -> TactileImprint:
    """Deterministic imprint of ``model`` at ``pose`` pressed by ``indentation`` mm.

    ``gap`` defaults to ``sensor.plate_half_gap``.
    """
    if not (0 < indentation <= sensor.max_depth):
        raise ConfigError(f"indentation {indentation} outside (0, {sensor.max_depth}]")
    g = sensor.plate_half_gap if gap is None else gap
    depth = render_batch(model.points, pose.rotation[None], pose.translation[None], sensor, g, indentation)[0]
    return TactileImprint(depth, np.ones(sensor.n_sensors, dtype=bool), g)


def render_oracle(model: ObjectModel, pose: RigidPose, sensor: SensorConfig, indentation: float, gap: float) -> np.ndarray:
    """Exhaustive per-pixel reference renderer (slow; used by tests)."""
    H, W, pp = sensor.grid_h, sensor.grid_w, sensor.pixel_pitch
    X = pose.apply(model.points)
    out = np.zeros((2, H, W))
    for i in range(H):
        z_lo = (i - H / 2) * pp
        for j in range(W):
            y_lo = (j - W / 2) * pp
            inside = (X[:, 1] / pp + W / 2 >= j) & (X[:, 1] / pp + W / 2 < j + 1)
            inside &= (X[:, 2] / pp + H / 2 >= i) & (X[:, 2] / pp + H / 2 < i + 1)
            if not inside.any():
                continue
            xs = X[inside, 0]
            for s, clear in enumerate((np.min(xs + gap), np.min(gap - xs))):
                out[s, i, j] = min(max(indentation - clear, 0.0), indentation, sensor.max_depth)
    return out[: sensor.n_sensors]


# ---------------------------------------------------------------------------
# grasp synthesis


@dataclass(frozen=True)
class GraspSpec:
    approach_axis: tuple
    indentation_range: tuple = (0.2, 1.0)
    xy_range: tuple = (5.0, 5.0)
    inplane_rot_range: float = np.pi


def align_rotation(axis) -> np.ndarray:
    """Fixed rotation taking the object-frame ``axis`` onto the TCP grasp (+x) axis."""
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    v = np.cross(helper, a)
    v /= np.linalg.norm(v)
    w = np.cross(a, v)
    return np.stack([a, v, w])  # rows: a -> x, v -> y, w -> z


def default_grasps(model: ObjectModel, inplane_rot_range: float = np.pi) -> list[GraspSpec]:
    """One grasp per approach axis, in-plane offsets spanning the object's half-extents."""
    out = []
    for a in model.grasp_axes:
        local = model.points @ align_rotation(a).T
        b = np.abs(local[:, 1:]).max(axis=0)
        out.append(GraspSpec(tuple(a), (0.2, 1.0), (float(b[0]), float(b[1])), inplane_rot_range))
    return out


def compose_grasp_pose(model: ObjectModel, grasp: GraspSpec, theta: float, offset) -> tuple[RigidPose, float]:
    """Pose for a grasp with in-plane rotation ``theta`` and (y, z) offset; returns pose and plate half-gap."""
    R = axis_angle_matrix([1.0, 0.0, 0.0], theta) @ align_rotation(grasp.approach_axis)
    x = model.points @ R[0]
    lo, hi = float(x.min()), float(x.max())
    t = np.array([-(lo + hi) / 2, offset[0], offset[1]])
    return RigidPose(R, t), (hi - lo) / 2


def validate_grasp(model: ObjectModel, grasp: GraspSpec, sensor: SensorConfig) -> None:
    lo, hi = grasp.indentation_range
    if not (0 < lo <= hi <= sensor.max_depth):
        raise ConfigError(f"indentation range {grasp.indentation_range} outside (0, {sensor.max_depth}]")
    local = np.abs(model.points @ align_rotation(grasp.approach_axis).T).max(axis=0)
    if np.any(np.asarray(grasp.xy_range, float) > local[1:] + 1e-9) or np.any(np.asarray(grasp.xy_range, float) < 0):
        raise ConfigError("grasp offset range exceeds the object's extent in the plate plane")


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    return np.round(depth, 4)


def synthesize_grasp(
    model: ObjectModel,
    grasp: GraspSpec,
    sensor: SensorConfig,
    rng: np.random.Generator,
    present=None,
) -> Sample | None:
    """One randomized grasp; ``None`` when the contact filter rejects it."""
    validate_grasp(model, grasp, sensor)
    b = np.asarray(grasp.xy_range, dtype=float)
    offset = rng.uniform(-b, b) if np.any(b > 0) else np.zeros(2)
    r = float(grasp.inplane_rot_range)
    theta = float(rng.uniform(-r, r)) if r > 0 else 0.0
    lo, hi = grasp.indentation_range
    ind = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    pose, gap = compose_grasp_pose(model, grasp, theta, offset)
    depth = render_batch(model.points, pose.rotation[None], pose.translation[None], sensor, gap, ind)[0]
    depth = quantize_depth(depth)
    if present is None:
        present = np.ones(sensor.n_sensors, dtype=bool)
    imprint = TactileImprint(depth, present, gap)
    if not np.any(imprint.contact_fraction[imprint.present] >= MIN_CONTACT_FRACTION):
        return None
    return Sample(pose, imprint, model.object_id, ind)


def draw_mask(k: int, mask_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Mask each sensor independently with ``mask_prob``, keeping at least one."""
    if mask_prob <= 0 or k == 1:
        return np.ones(k, dtype=bool)
    while True:
        present = rng.random(k) >= mask_prob
        if present.any():
            return present


def draw_sample(
    model: ObjectModel,
    grasps: Sequence[GraspSpec],
    sensor: SensorConfig,
    rng: np.random.Generator,
    mask_prob: float = 0.0,
    present=None,
) -> Sample:
    """Rejection-sample an accepted grasp, choosing uniformly among ``grasps``."""
    for _ in range(MAX_CONSECUTIVE_REJECTIONS):
        g = grasps[int(rng.integers(len(grasps)))]
        mask = draw_mask(sensor.n_sensors, mask_prob, rng) if present is None else np.asarray(present, bool)
        s = synthesize_grasp(model, g, sensor, rng, mask)
        if s is not None:
            return s
    raise RejectionBudgetExceeded(f"{MAX_CONSECUTIVE_REJECTIONS} consecutive grasps rejected for {model.object_id}")


def sample_seed(master_seed: int, index: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(stream), int(index)])


def generate_dataset(
    model: ObjectModel,
    n: int,
    sensor: SensorConfig,
    seed: int,
    mask_prob: float = 0.0,
    present=None,
    grasps: Sequence[GraspSpec] | None = None,
    aug: bool = False,
    stream: int = 0,
) -> list[Sample]:
    """``n`` accepted samples; sample ``i`` depends only on ``(seed, stream, i)``."""
    grasps = list(grasps) if grasps is not None else default_grasps(model)
    out = []
    for i in range(n):
        rng = np.random.default_rng(sample_seed(seed, i, stream))
        s = draw_sample(model, grasps, sensor, rng, mask_prob, present)
        if aug:
            depth = quantize_depth(augment_depth(s.imprint.depth, rng))
            s = dataclasses.replace(s, imprint=TactileImprint(depth, s.imprint.present, s.imprint.plate_half_gap))
        out.append(s)
    return out


def augment_depth(depth: np.ndarray, rng: np.random.Generator, noise: float = 0.05, gain: float = 0.1) -> np.ndarray:
    """Gain jitter plus additive Gaussian depth noise, clipped at zero."""
    lead = depth.shape[:-2]
    g = rng.uniform(1 - gain, 1 + gain, size=lead + (1, 1))
    return np.maximum(depth * g + rng.normal(scale=noise, size=depth.shape), 0.0)


def rerender(model: ObjectModel, sample: Sample, pose: RigidPose, sensor: SensorConfig) -> Sample:
    """Same grasp (gap, indentation, mask) with the object moved to ``pose``."""
    depth = render_batch(
        model.points, pose.rotation[None], pose.translation[None], sensor, sample.imprint.plate_half_gap, sample.indentation
    )[0]
    imprint = TactileImprint(quantize_depth(depth), sample.imprint.present, sample.imprint.plate_half_gap)
    return Sample(pose, imprint, sample.object_id, sample.indentation)


def generate_trajectory(
    model: ObjectModel,
    n_steps: int,
    step_scale=(0.5, 0.02),
    sensor: SensorConfig = SensorConfig(),
    rng: np.random.Generator | None = None,
    grasps: Sequence[GraspSpec] | None = None,
) -> list[Sample]:
    """In-hand slip trajectory: bounded random walk in the plate plane and about the grasp axis.

    Each step translates by at most ``step_scale[0]`` mm in the (y, z) plane and
    rotates by at most ``step_scale[1]`` rad about the grasp axis through the
    object centroid.  Gap and indentation stay fixed.
    """
    if n_steps < 2:
        raise ConfigError("trajectory needs at least 2 steps")
    rng = rng if rng is not None else np.random.default_rng()
    grasps = list(grasps) if grasps is not None else default_grasps(model)
    first = draw_sample(model, grasps, sensor, rng)
    d_max, a_max = float(step_scale[0]), float(step_scale[1])
    out = [first]
    pose = first.pose
    for _ in range(n_steps - 1):
        for _attempt in range(MAX_CONSECUTIVE_REJECTIONS):
            phi = rng.uniform(0, 2 * np.pi)
            mag = rng.uniform(0, d_max) if d_max > 0 else 0.0
            ang = rng.uniform(-a_max, a_max) if a_max > 0 else 0.0
            Rz = axis_angle_matrix([1.0, 0.0, 0.0], ang)
            t = pose.translation + np.array([0.0, mag * np.cos(phi), mag * np.sin(phi)])
            cand = RigidPose(Rz @ pose.rotation, t)
            s = rerender(model, first, cand, sensor)
            if np.any(s.imprint.contact_fraction[s.imprint.present] >= MIN_CONTACT_FRACTION):
                break
        else:
            raise RejectionBudgetExceeded("trajectory lost contact")
        out.append(s)
        pose = cand
    return out


# ---------------------------------------------------------------------------
# dataset IO


def _sample_record(s: Sample) -> dict:
    im = s.imprint
    return {
        "object_id": s.object_id,
        "pose": [float(v) for v in s.pose.rotation.ravel()] + [float(v) for v in s.pose.translation],
        "indentation": float(s.indentation),
        "imprint": {
            "k": int(im.k),
            "present": [int(v) for v in im.present],
            "grid": [int(im.depth.shape[1]), int(im.depth.shape[2])],
            "gap": float(im.plate_half_gap),
            "depth": [float(f"{v:.4f}") for v in im.depth.ravel()],
        },
    }


def _record_sample(rec: dict, lineno: int) -> Sample:
    try:
        pose = np.asarray(rec["pose"], dtype=float)
        im = rec["imprint"]
        k = int(im["k"])
        h, w = (int(v) for v in im["grid"])
        depth = np.asarray(im["depth"], dtype=float)
        if pose.shape != (12,):
            raise ParseError("pose must have 12 values", lineno)
        if depth.size != k * h * w:
            raise ParseError(f"depth has {depth.size} values, expected {k * h * w}", lineno)
        present = np.asarray(im["present"], dtype=bool)
        if present.shape != (k,):
            raise ParseError("present mask length does not match k", lineno)
        imprint = TactileImprint(depth.reshape(k, h, w), present, float(im["gap"]))
        return Sample(RigidPose(pose[:9].reshape(3, 3), pose[9:]), imprint, str(rec["object_id"]), float(rec["indentation"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad record: {exc}", lineno) from None


def write_dataset(samples: Iterable[Sample], path) -> None:
    with open(path, "w") as fh:
        fh.write(DATASET_HEADER + "\n")
        for s in samples:
            fh.write(json.dumps(_sample_record(s), separators=(",", ":")) + "\n")


def read_dataset(path) -> list[Sample]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != DATASET_HEADER:
            if header.startswith("ebmpose-dataset"):
                raise VersionMismatch(f"unsupported dataset format {header!r}")
            raise ParseError(f"expected header {DATASET_HEADER!r}", 1)
        out = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed record ({exc.msg})", lineno) from None
            out.append(_record_sample(rec, lineno))
    return out
