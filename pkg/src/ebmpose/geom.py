"""Rigid poses, the 9-D diffusion pose vector, object models and pose metrics.

Pose vectors ("Pose9") are plain ``(9,)`` or ``(B, 9)`` float arrays laid out as
``[rx, ry, t / W]``: the first two rotation columns followed by the translation
divided by the workspace half-extent ``W`` (mm).  Keeping them as arrays lets the
diffusion and network code treat them as ordinary vectors.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .errors import ConfigError, DegenerateMean, DegenerateRotation, NotARotation, ParseError, VersionMismatch

WORKSPACE_MM = 30.0
REVOLUTE_STEPS = 72
SYMMETRY_KINDS = ("none", "half_turn", "quarter_turn", "revolute")
OBJECT_HEADER = "ebmpose-object v1"


# ---------------------------------------------------------------------------
# rotations


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` (normalized internally)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot6d_to_matrix(rx, ry) -> np.ndarray:
    """Gram-Schmidt a pair of 3-vectors into a rotation matrix.

    Columns are ``normalize(rx)``, the normalized component of ``ry`` orthogonal
    to it, and their cross product.
    """
    rx = np.asarray(rx, dtype=float)
    ry = np.asarray(ry, dtype=float)
    nx = np.linalg.norm(rx)
    ny = np.linalg.norm(ry)
    if not (np.all(np.isfinite(rx)) and np.all(np.isfinite(ry))):
        raise DegenerateRotation("non-finite rotation columns")
    if nx <= 1e-8 or ny <= 1e-8:
        raise DegenerateRotation(f"rotation column norm too small ({nx:.3g}, {ny:.3g})")
    if np.linalg.norm(np.cross(rx, ry)) / (nx * ny) < 1e-6:
        raise DegenerateRotation("rotation columns are parallel")
    c1 = rx / nx
    c2 = ry - (ry @ c1) * c1
    c2 -= (c2 @ c1) * c1  # second pass restores orthogonality lost to cancellation
    c2 /= np.linalg.norm(c2)
    return np.column_stack([c1, c2, np.cross(c1, c2)])


def rot6d_to_matrix_batch(r6: np.ndarray) -> np.ndarray:
    """Vectorized Gram-Schmidt for ``(B, 6)`` input; no degeneracy checks."""
    rx = r6[:, 0:3]
    ry = r6[:, 3:6]
    c1 = rx / np.maximum(np.linalg.norm(rx, axis=1, keepdims=True), 1e-12)
    c2 = ry - np.sum(ry * c1, axis=1, keepdims=True) * c1
    c2 = c2 - np.sum(c2 * c1, axis=1, keepdims=True) * c1
    c2 = c2 / np.maximum(np.linalg.norm(c2, axis=1, keepdims=True), 1e-12)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=2)


def is_rotation(R, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.abs(R @ R.T - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def matrix_to_rot6d(R) -> tuple[np.ndarray, np.ndarray]:
    R = np.asarray(R, dtype=float)
    if not is_rotation(R, 1e-6):
        raise NotARotation("matrix is not orthonormal with det +1")
    return R[:, 0].copy(), R[:, 1].copy()


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Orthogonal polar factor of ``M`` with det forced to +1."""
    u, s, vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Object-to-TCP transform; translation in millimeters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> RigidPose:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: RigidPose) -> RigidPose:
        """``self ∘ other`` (apply ``other`` first)."""
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidPose:
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __repr__(self):
        return f"RigidPose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def pose_to_vec(pose: RigidPose, workspace: float = WORKSPACE_MM) -> np.ndarray:
    rx, ry = pose.rotation[:, 0], pose.rotation[:, 1]
    return np.concatenate([rx, ry, pose.translation / workspace])


def vec_to_pose(vec, workspace: float = WORKSPACE_MM) -> RigidPose:
    """Orthonormalize a 9-vector into a rigid pose (raises on degenerate rotation)."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (9,):
        raise ValueError(f"pose vector must have shape (9,), got {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise DegenerateRotation("non-finite pose vector")
    return RigidPose(rot6d_to_matrix(vec[0:3], vec[3:6]), vec[6:9] * workspace)


def vecs_to_rt(vecs: np.ndarray, workspace: float = WORKSPACE_MM) -> tuple[np.ndarray, np.ndarray]:
    """Batch version of :func:`vec_to_pose` returning ``(R, t)`` arrays."""
    vecs = np.asarray(vecs, dtype=float).reshape(-1, 9)
    return rot6d_to_matrix_batch(vecs[:, :6]), vecs[:, 6:9] * workspace


def normalize_vec(vec, workspace: float = WORKSPACE_MM) -> np.ndarray:
    """``pose_to_vec(vec_to_pose(vec))``: project a free 9-vector onto valid poses."""
    return pose_to_vec(vec_to_pose(vec, workspace), workspace)


# ---------------------------------------------------------------------------
# object models


@dataclass(frozen=True)
class Symmetry:
    kind: str = "none"
    axis: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.kind not in SYMMETRY_KINDS:
            raise ConfigError(f"unknown symmetry kind {self.kind!r}")
        a = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(a)
        if not n > 0:
            raise ConfigError("symmetry axis must be nonzero")
        object.__setattr__(self, "axis", tuple(float(v) for v in a / n))

    @property
    def angle(self) -> float:
        return {"none": 0.0, "half_turn": np.pi, "quarter_turn": np.pi / 2, "revolute": 2 * np.pi / REVOLUTE_STEPS}[self.kind]

    def generator(self) -> np.ndarray:
        return axis_angle_matrix(self.axis, self.angle)

    def rotations(self) -> list[np.ndarray]:
        """All distinct rotations of the (discretized) cyclic group."""
        n = {"none": 1, "half_turn": 2, "quarter_turn": 4, "revolute": REVOLUTE_STEPS}[self.kind]
        return [axis_angle_matrix(self.axis, 2 * np.pi * k / n) for k in range(n)]


@dataclass(frozen=True, eq=False)
class ObjectModel:
    points: np.ndarray
    symmetry: Symmetry = Symmetry()
    grasp_axes: tuple = ((0.0, 0.0, 1.0),)
    diameter: float = 0.0
    bbox_half_extents: np.ndarray = None
    object_id: str = "object"

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "points", pts)
        if not self.diameter:
            object.__setattr__(self, "diameter", point_set_diameter(pts))
        if self.bbox_half_extents is None:
            object.__setattr__(self, "bbox_half_extents", np.abs(pts).max(axis=0))
        else:
            object.__setattr__(self, "bbox_half_extents", np.asarray(self.bbox_half_extents, dtype=float))
        axes = tuple(tuple(float(v) for v in np.asarray(a, float) / np.linalg.norm(a)) for a in self.grasp_axes)
        object.__setattr__(self, "grasp_axes", axes)

    def check(self) -> None:
        """Validate the model invariants (point count, centering, symmetry)."""
        if len(self.points) < 64:
            raise ConfigError(f"object model needs at least 64 points, has {len(self.points)}")
        if np.linalg.norm(self.points.mean(axis=0)) > 1e-6 * self.diameter:
            raise ConfigError("object model is not centered at its centroid")
        if self.symmetry.kind != "none":
            moved = self.points @ self.symmetry.generator().T
            if chamfer_distance(moved, self.points) >= 0.01 * self.diameter:
                raise ConfigError(f"declared symmetry {self.symmetry.kind} does not map the point set to itself")

    @functools.cached_property
    def symmetric_tree(self) -> cKDTree:
        """KD-tree over the point set closed under the (discretized) symmetry."""
        if self.symmetry.kind == "revolute":
            pts = np.concatenate([self.points @ R.T for R in self.symmetry.rotations()])
        else:
            pts = self.points
        return cKDTree(pts)

    @functools.cached_property
    def encoder_points(self) -> np.ndarray:
        return farthest_point_subsample(self.points, 256)


def point_set_diameter(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) > 64:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # flat or degenerate sets: fall back to all points
            pass
    best = 0.0
    for i in range(0, len(pts), 512):
        d = np.linalg.norm(pts[i : i + 512, None, :] - pts[None, :, :], axis=2)
        best = max(best, float(d.max()))
    return best


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (da.mean() + db.mean())


def farthest_point_subsample(points: np.ndarray, n: int) -> np.ndarray:
    """Deterministic farthest-point sampling, seeded at the point farthest from the centroid."""
    pts = np.asarray(points, dtype=float)
    if len(pts) <= n:
        return pts.copy()
    centered = pts - pts.mean(axis=0)
    idx = np.empty(n, dtype=int)
    idx[0] = int(np.argmax(np.einsum("ij,ij->i", centered, centered)))
    dist = np.linalg.norm(pts - pts[idx[0]], axis=1)
    for i in range(1, n):
        idx[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(pts - pts[idx[i]], axis=1))
    return pts[idx]


# ---------------------------------------------------------------------------
# metrics


def add_distance(est: RigidPose, gt: RigidPose, points: np.ndarray) -> float:
    return float(np.linalg.norm(est.apply(points) - gt.apply(points), axis=1).mean())


def adds_distance(est: RigidPose, gt: RigidPose, model: ObjectModel) -> float:
    # Express the estimated points in the ground-truth canonical frame; distances
    # are preserved, and the nearest-point tree can then be built once per model.
    rel = gt.inverse().compose(est)
    d, _ = model.symmetric_tree.query(rel.apply(model.points))
    return float(d.mean())


def pose_distance(est: RigidPose, gt: RigidPose, model: ObjectModel) -> float:
    """ADD for asymmetric objects, ADD-S (nearest model point) otherwise. Millimeters."""
    if len(model.points) == 0:
        raise ValueError("empty object model")
    if model.symmetry.kind == "none":
        return add_distance(est, gt, model.points)
    return adds_distance(est, gt, model)


def metric_kind(model: ObjectModel) -> str:
    return "ADD" if model.symmetry.kind == "none" else "ADD-S"


# ---------------------------------------------------------------------------
# prior sampling


def icosphere(level: int) -> np.ndarray:
    """Unit vertices of a subdivided icosahedron (12, 42, 162, ... vertices)."""
    if level < 0:
        raise ConfigError("icosphere level must be >= 0")
    phi = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]  # fmt: skip
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]  # fmt: skip
    verts = [np.asarray(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts)


def look_at_rotation(direction) -> np.ndarray:
    """A rotation whose third column is ``direction``."""
    z = np.asarray(direction, float)
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    return np.column_stack([x, np.cross(z, x), z])


@dataclass
class PriorConfig:
    level: int = 1
    n_inplane: int = 6
    sigma_prior: float = 0.2  # fraction of the workspace half-extent
    M: int | None = None  # None: one candidate per (view, in-plane) pair
    replicate: bool = True
    workspace: float = WORKSPACE_MM


def icosphere_prior_poses(config: PriorConfig, model: ObjectModel | None, rng: np.random.Generator) -> np.ndarray:
    """Global pose hypotheses as an ``(M, 9)`` array of pose vectors.

    Each icosphere vertex is treated as a camera viewpoint looking at the object
    centre; the view rotation is spun about the view axis ``n_inplane`` times and
    inverted into an object-to-TCP rotation, so row 2 of each rotation is the
    viewpoint direction.  Translations are Gaussian, clipped
    to the workspace.  ``model`` is accepted for interface symmetry with other
    priors and is not needed by the isotropic grid.
    """
    if config.n_inplane < 1:
        raise ConfigError("n_inplane must be >= 1")
    views = icosphere(config.level)
    rots = []
    for v in views:
        # camera z-axis points from the object centre to the camera (it looks along -z)
        cam_to_obj = look_at_rotation(v)
        for k in range(config.n_inplane):
            spin = axis_angle_matrix([0.0, 0.0, 1.0], 2 * np.pi * k / config.n_inplane)
            rots.append((cam_to_obj @ spin).T)
    grid = len(rots)
    M = grid if config.M is None else int(config.M)
    if M < 1:
        raise ConfigError("M must be >= 1")
    if M > grid and not config.replicate:
        raise ConfigError(f"M={M} exceeds the {grid}-pose prior grid and replication is disabled")
    W = config.workspace
    trans = rng.normal(scale=config.sigma_prior * W, size=(M, 3))
    trans = np.clip(trans, -W, W)
    out = np.empty((M, 9))
    for i in range(M):
        R = rots[i % grid]
        out[i] = np.concatenate([R[:, 0], R[:, 1], trans[i] / W])
    return out


# ---------------------------------------------------------------------------
# aggregation


def mean_pose(candidates: Sequence[RigidPose]) -> RigidPose:
    """Arithmetic-mean translation and chordal L2 mean rotation."""
    if len(candidates) == 0:
        raise DegenerateMean("mean of zero poses")
    if len(candidates) == 1:
        return RigidPose(candidates[0].rotation.copy(), candidates[0].translation.copy())
    Rm = np.mean([c.rotation for c in candidates], axis=0)
    s = np.linalg.svd(Rm, compute_uv=False)
    if s.min() < 1e-9:
        raise DegenerateMean("averaged rotation matrix is rank deficient")
    t = np.mean([c.translation for c in candidates], axis=0)
    return RigidPose(project_to_so3(Rm), t)


# ---------------------------------------------------------------------------
# object file IO


def format_object(model: ObjectModel) -> str:
    sym = model.symmetry
    lines = [
        OBJECT_HEADER,
        f"object_id {model.object_id}",
        f"symmetry {sym.kind} {sym.axis[0]!r} {sym.axis[1]!r} {sym.axis[2]!r}",
        f"diameter {model.diameter!r}",
        "bbox " + " ".join(repr(float(v)) for v in model.bbox_half_extents),
        f"grasp_axes {len(model.grasp_axes)}",
    ]
    lines += [" ".join(repr(float(v)) for v in a) for a in model.grasp_axes]
    lines.append(f"points {len(model.points)}")
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in model.points.tolist()]
    return "\n".join(lines) + "\n"


def write_object(model: ObjectModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_object(model))


def parse_object(text: str) -> ObjectModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != OBJECT_HEADER:
        got = lines[0].strip() if lines else ""
        if got.startswith("ebmpose-object"):
            raise VersionMismatch(f"unsupported object format {got!r}")
        raise ParseError(f"expected header {OBJECT_HEADER!r}", 1)
    pos = 1

    def take(key):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, expected {key!r}", pos + 1)
        parts = lines[pos].split()
        if not parts or parts[0] != key:
            raise ParseError(f"expected {key!r}", pos + 1)
        pos += 1
        return parts[1:]

    def rows(n, width):
        nonlocal pos
        out = []
        for _ in range(n):
            if pos >= len(lines):
                raise ParseError("truncated row block", pos + 1)
            try:
                vals = [float(v) for v in lines[pos].split()]
            except ValueError:
                raise ParseError("non-numeric value", pos + 1) from None
            if len(vals) != width:
                raise ParseError(f"expected {width} values", pos + 1)
            out.append(vals)
            pos += 1
        return np.array(out, dtype=float).reshape(n, width)

    try:
        object_id = take("object_id")[0]
        sym = take("symmetry")
        symmetry = Symmetry(sym[0], tuple(float(v) for v in sym[1:4]))
        diameter = float(take("diameter")[0])
        bbox = np.array([float(v) for v in take("bbox")])
        n_axes = int(take("grasp_axes")[0])
        axes = rows(n_axes, 3)
        n_pts = int(take("points")[0])
        points = rows(n_pts, 3)
    except (IndexError, ValueError, ConfigError) as exc:
        raise ParseError(str(exc), pos + 1) from None
    return ObjectModel(
        points=points,
        symmetry=symmetry,
        grasp_axes=tuple(map(tuple, axes)),
        diameter=diameter,
        bbox_half_extents=bbox,
        object_id=object_id,
    )


def read_object(path) -> ObjectModel:
    with open(path) as fh:
        return parse_object(fh.read())


def with_points(model: ObjectModel, points: np.ndarray) -> ObjectModel:
    return dataclasses.replace(model, points=points, diameter=0.0, bbox_half_extents=None)
