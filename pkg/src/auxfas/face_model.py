"""Linear 3D face model, pose alignment and Z-buffer depth rendering.

Coordinates are image aligned: x to the right, y down, and +z toward the
camera, so after depth normalization the nearest vertex has depth 1.
Projection is scaled orthographic: a posed vertex (x, y, z) lands on image
pixel (x, y) regardless of z.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

MAP_SIZE = 32
NONE = -1


class DegenerateShapeError(ValueError):
    pass


class PoseError(ValueError):
    pass


@dataclass
class FaceBasis:
    mean: np.ndarray            # (3, Q)
    id_bases: np.ndarray        # (N_id, 3, Q)
    exp_bases: np.ndarray       # (N_exp, 3, Q)
    forehead: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.id_bases = np.asarray(self.id_bases, dtype=np.float64)
        self.exp_bases = np.asarray(self.exp_bases, dtype=np.float64)
        self.forehead = np.asarray(self.forehead, dtype=np.int64)
        q = self.mean.shape[1]
        if self.mean.shape != (3, q):
            raise ValueError(f"mean shape must be 3xQ, got {self.mean.shape}")
        for name, b in (("id", self.id_bases), ("exp", self.exp_bases)):
            if b.ndim != 3 or b.shape[1:] != (3, q) or b.shape[0] < 1:
                raise ValueError(f"{name} bases must be N x 3 x {q}, got {b.shape}")

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[1]

    @property
    def n_id(self) -> int:
        return self.id_bases.shape[0]

    @property
    def n_exp(self) -> int:
        return self.exp_bases.shape[0]


@dataclass
class ShapeParams:
    alpha_id: np.ndarray
    alpha_exp: np.ndarray

    @classmethod
    def zeros(cls, basis: FaceBasis) -> "ShapeParams":
        return cls(np.zeros(basis.n_id), np.zeros(basis.n_exp))


@dataclass
class Pose:
    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        if not self.s > 0:
            raise PoseError(f"scale must be positive, got {self.s}")
        if self.R.shape != (3, 3):
            raise PoseError("R must be 3x3")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9, rtol=0):
            raise PoseError("R is not orthogonal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise PoseError("det(R) must be 1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(1.0, np.eye(3), np.zeros(3))


@dataclass
class VertexIndexMap:
    m: np.ndarray  # (32, 32) int64, NONE where no vertex projects

    @property
    def K(self) -> int:
        return int((self.m != NONE).sum())

    @property
    def valid(self) -> np.ndarray:
        return self.m != NONE


def rotation(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rotation matrix from angles in radians (about y, x and z respectively)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


def canonical_pose(height: int = MAP_SIZE, width: int = MAP_SIZE) -> Pose:
    """Frontal pose placing the model face (2 units tall) centered at 80% of the image height."""
    return Pose(0.4 * min(height, width), np.eye(3), np.array([width / 2.0, height / 2.0, 0.0]))


def synthesize_shape(basis: FaceBasis, params: ShapeParams) -> np.ndarray:
    a_id = np.asarray(params.alpha_id, dtype=np.float64)
    a_exp = np.asarray(params.alpha_exp, dtype=np.float64)
    if a_id.shape != (basis.n_id,) or a_exp.shape != (basis.n_exp,):
        raise ValueError(f"expected {basis.n_id} id / {basis.n_exp} exp params, "
                         f"got {a_id.shape} / {a_exp.shape}")
    return (basis.mean
            + np.tensordot(a_id, basis.id_bases, axes=1)
            + np.tensordot(a_exp, basis.exp_bases, axes=1))


def pose_transform(shape: np.ndarray, pose: Pose) -> np.ndarray:
    pose.validate()
    return pose.s * (pose.R @ shape) + pose.t[:, None]


def normalize_depth(shape: np.ndarray) -> np.ndarray:
    z = shape[2]
    lo, hi = z.min(), z.max()
    if not hi > lo:
        raise DegenerateShapeError("all vertices share one depth; cannot normalize")
    out = shape.copy()
    out[2] = (z - lo) / (hi - lo)
    return out


def _bin(shape: np.ndarray, height: int, width: int, size: int):
    col = np.floor(shape[0] * size / width).astype(np.int64)
    row = np.floor(shape[1] * size / height).astype(np.int64)
    inside = (col >= 0) & (col < size) & (row >= 0) & (row < size)
    return row, col, inside


def zbuffer(shape: np.ndarray, height: int, width: int, size: int = MAP_SIZE):
    """Per-pixel nearest vertex: returns (depth, vertex index) grids, NONE/0 when empty.

    Ties on z keep the lowest vertex index.
    """
    row, col, inside = _bin(shape, height, width, size)
    depth = np.zeros((size, size))
    owner = np.full((size, size), NONE, dtype=np.int64)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return depth, owner
    pix = row[idx] * size + col[idx]
    # sort by pixel, then z ascending, then index descending: last entry per pixel wins
    order = np.lexsort((-idx, shape[2, idx], pix))
    pix_s = pix[order]
    last = np.r_[pix_s[1:] != pix_s[:-1], True]
    win = idx[order][last]
    depth.reshape(-1)[pix_s[last]] = shape[2, win]
    owner.reshape(-1)[pix_s[last]] = win
    return depth, owner


def render_depth(shape: np.ndarray, height: int, width: int, size: int = MAP_SIZE) -> np.ndarray:
    """Z-buffer a depth-normalized posed shape into a size x size map."""
    depth, owner = zbuffer(shape, height, width, size)
    if (owner == NONE).all():
        warnings.warn("no vertex projects inside the image; depth map is empty", RuntimeWarning,
                      stacklevel=2)
    return np.clip(depth, 0.0, 1.0)


def build_vertex_index_map(basis: FaceBasis, size: int = MAP_SIZE) -> VertexIndexMap:
    shape = pose_transform(basis.mean, canonical_pose(size, size))
    _, owner = zbuffer(shape, size, size, size)
    return VertexIndexMap(owner)


def ground_truth_depth(basis: FaceBasis, params: ShapeParams, pose: Pose,
                       height: int, width: int) -> np.ndarray:
    posed = pose_transform(synthesize_shape(basis, params), pose)
    return render_depth(normalize_depth(posed), height, width)


# ---------------------------------------------------------------------------
# procedural basis

def _gauss(u, v, cu, cv, su, sv):
    return np.exp(-((u - cu) ** 2 / (2 * su ** 2) + (v - cv) ** 2 / (2 * sv ** 2)))


def face_grid(n_grid: int) -> tuple[np.ndarray, np.ndarray]:
    """Parametric (u, v) samples on the unit disc; v grows toward the chin."""
    g = np.linspace(-1.0, 1.0, n_grid)
    u, v = np.meshgrid(g, g)
    keep = u ** 2 + v ** 2 <= 1.0
    return u[keep], v[keep]


def _mean_surface(u, v):
    cap = np.sqrt(np.clip(1.0 - u ** 2 - v ** 2, 0.0, None))
    z = (0.55 * cap
         + 0.28 * _gauss(u, v, 0.0, 0.05, 0.09, 0.22)
         - 0.06 * _gauss(u, v, -0.35, -0.2, 0.12, 0.07)
         - 0.06 * _gauss(u, v, 0.35, -0.2, 0.12, 0.07)
         + 0.03 * _gauss(u, v, 0.0, 0.5, 0.2, 0.05))
    return np.stack([0.75 * u, v, z])


def _id_fields(u, v, n_id, rng):
    cap = np.sqrt(np.clip(1.0 - u ** 2 - v ** 2, 0.0, None))
    zero = np.zeros_like(u)
    fields = [
        np.stack([0.1 * u, zero, zero]),                                     # width
        np.stack([zero, 0.1 * v, zero]),                                     # height
        np.stack([zero, zero, 0.1 * cap]),                                   # face depth
        np.stack([zero, zero, 0.08 * _gauss(u, v, 0.0, 0.05, 0.09, 0.22)]),  # nose
        np.stack([zero, 0.08 * np.clip(v, 0, None) ** 2, zero]),             # chin
    ]
    while len(fields) < n_id:
        c = rng.normal(scale=0.03, size=(3, 6))
        basis = np.stack([u, v, u * v, u ** 2, v ** 2, cap])
        fields.append(c @ basis)
    return np.stack(fields[:n_id])


def _exp_fields(u, v, n_exp, rng):
    zero = np.zeros_like(u)
    mouth = _gauss(u, v, 0.0, 0.55, 0.25, 0.12)
    fields = [
        np.stack([zero, 0.08 * mouth * np.clip(v - 0.5, -0.1, None) * 5, zero]),       # jaw open
        np.stack([0.06 * mouth * np.sign(u) * np.abs(u) * 3, -0.03 * mouth, zero]),     # smile
        np.stack([zero, -0.05 * _gauss(u, v, 0.0, -0.45, 0.4, 0.1), zero]),             # brow raise
        np.stack([zero, zero, 0.05 * (_gauss(u, v, -0.45, 0.25, 0.15, 0.15)
                                      + _gauss(u, v, 0.45, 0.25, 0.15, 0.15))]),      # cheek puff
        np.stack([zero, zero, -0.04 * mouth]),                                          # lip press
    ]
    while len(fields) < n_exp:
        c = rng.normal(scale=0.02, size=(3, 4))
        fields.append(c @ np.stack([u, v, u * v, mouth]))
    return np.stack(fields[:n_exp])


def procedural_basis(n_grid: int = 50, n_id: int = 10, n_exp: int = 5, seed: int = 0) -> FaceBasis:
    """Ellipsoidal head-front basis with a nose, eye sockets and smooth deformation modes.

    The same (n_id, n_exp, seed) evaluated at a different ``n_grid`` describes
    the same surface sampled more or less densely.
    """
    rng = np.random.default_rng(seed)
    u, v = face_grid(n_grid)
    forehead = np.flatnonzero((np.abs(u) <= 0.35) & (v >= -0.75) & (v <= -0.45))
    return FaceBasis(_mean_surface(u, v), _id_fields(u, v, n_id, rng), _exp_fields(u, v, n_exp, rng),
                     forehead)
