"""Rigid motions and point-map geometry.

Poses are camera-to-world: a camera-frame point ``p`` maps to ``R @ p + t``
in the world. The relative pose ``i <- j`` maps camera ``j`` coordinates
into camera ``i`` coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import Tensor


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self * other: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PointMap:
    points: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class NormalMap:
    normals: np.ndarray
    valid: np.ndarray


# ---------------------------------------------------------------- SO(3)


def is_rotation(m, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=np.float64)
    return (
        m.shape == (3, 3)
        and np.allclose(m.T @ m, np.eye(3), atol=tol, rtol=0)
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


def svd_orthogonalize(raw9) -> np.ndarray:
    """Nearest rotation (Frobenius) to the row-major 3x3 reshape of ``raw9``."""
    raw = np.asarray(raw9, dtype=np.float64)
    with tc.no_grad():
        return tc.svd_orthogonalize(Tensor(raw.reshape(raw.shape[:-1] + (9,)))).data


def axis_angle(axis, angle: float) -> np.ndarray:
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def rot_x(a: float) -> np.ndarray:
    return axis_angle((1, 0, 0), a)


def rot_y(a: float) -> np.ndarray:
    return axis_angle((0, 1, 0), a)


def rot_z(a: float) -> np.ndarray:
    return axis_angle((0, 0, 1), a)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def geodesic_angle(a, b) -> float | np.ndarray:
    """Rotation angle of a^T b in radians, in [0, pi]. Works on stacks (..., 3, 3)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    tr = (a * b).sum(axis=(-2, -1))
    out = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform from camera ``b``'s frame to camera ``a``'s frame."""
    rt = a.rotation.T
    return Pose(rt @ b.rotation, rt @ (b.translation - a.translation))


def relative_rotations(rots: np.ndarray, i, j) -> np.ndarray:
    return np.swapaxes(rots[i], -1, -2) @ rots[j]


def relative_translations(rots: np.ndarray, trans: np.ndarray, i, j) -> np.ndarray:
    return (np.swapaxes(rots[i], -1, -2) @ (trans[j] - trans[i])[..., None])[..., 0]


def ordered_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = ii != jj
    return ii[keep], jj[keep]


# ---------------------------------------------------------------- point maps


def depth_of(pm: PointMap) -> np.ndarray:
    """z channel; invalid pixels are NaN."""
    return np.where(pm.valid, pm.points[..., 2], np.nan)


_QUADRANTS = ((0, 1), (1, 2), (2, 3), (3, 0))  # (right, down), (down, left), (left, up), (up, right)


def pointmap_normals_t(points: Tensor, valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Differentiable four-quadrant normals for point maps of shape (..., H, W, 3).

    Each quadrant normal is the normalized cross product of two neighbor
    differences; quadrants are flipped into the camera-facing (negative z)
    hemisphere, averaged over the valid ones and renormalized.
    """
    points = tc.as_tensor(points)
    valid = np.asarray(valid, dtype=bool)
    lead = points.ndim - 3
    h, w = points.shape[lead], points.shape[lead + 1]
    pad_pts = tc.pad(points, [(0, 0)] * lead + [(1, 1), (1, 1), (0, 0)])
    pad_val = np.pad(valid, [(0, 0)] * lead + [(1, 1), (1, 1)])
    lb = (slice(None),) * lead
    offsets = ((1, 2), (2, 1), (1, 0), (0, 1))  # right, down, left, up in padded coordinates
    diffs, nvalid = [], []
    for r0, c0 in offsets:
        idx = lb + (slice(r0, r0 + h), slice(c0, c0 + w))
        diffs.append(pad_pts[idx] - points)
        nvalid.append(pad_val[idx] & valid)

    acc = None
    any_valid = np.zeros(valid.shape, dtype=bool)
    for a, b in _QUADRANTS:
        n = tc.l2_normalize(tc.cross3(diffs[a], diffs[b]))
        qv = nvalid[a] & nvalid[b]
        sign = np.where(n.data[..., 2] > 0, -1.0, 1.0)
        m = np.broadcast_to((sign * qv)[..., None], n.shape)
        term = n * np.array(m)
        acc = term if acc is None else acc + term
        any_valid |= qv
    normals = tc.l2_normalize(acc)
    norm_ok = np.sqrt((acc.data ** 2).sum(axis=-1)) > 1e-12
    return normals, any_valid & norm_ok


def pointmap_normals(pm: PointMap) -> NormalMap:
    with tc.no_grad():
        n, v = pointmap_normals_t(Tensor(pm.points), pm.valid)
    return NormalMap(np.where(v[..., None], n.data, 0.0), v)
