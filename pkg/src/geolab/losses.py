"""Visual-geometry training losses.

Point, camera and normal terms plus the optimal-scale solver and loss
clipping. Prediction inputs are :class:`~geolab.tensor.Tensor` objects;
ground truth is plain numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tc
from .geometry import ordered_pairs, pointmap_normals_t, relative_rotations, relative_translations
from .tensor import Tensor

RATIO_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_cam: float = 0.2
    lambda_normal: float = 1.0
    lambda_trans: float = 200.0
    huber_delta: float = 1.0
    clip_threshold: float = 10.0
    align_subsample: int = 4096
    lambda_global: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cam", "lambda_normal", "lambda_trans", "clip_threshold", "lambda_global"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")
        if self.align_subsample < 1:
            raise ValueError(f"align_subsample must be >= 1, got {self.align_subsample}")


@dataclass
class GeometryOutput:
    rotations: Tensor  # (N, 3, 3)
    translations: Tensor  # (N, 3)
    points: Tensor  # (N, H, W, 3) camera frame
    global_points: Tensor | None = None  # (N, H, W, 3) world frame, training only


@dataclass
class LossReport:
    total: Tensor
    points: Tensor
    cam: Tensor
    rot: Tensor
    trans: Tensor
    normal: Tensor
    s_star: float
    clipped: bool = False
    global_points: Tensor | None = None
    lambda_global: float = 1.0

    @property
    def objective(self) -> Tensor:
        """What training minimizes: the total plus the auxiliary global-point term."""
        if self.global_points is None or self.clipped:
            return self.total
        return self.total + self.lambda_global * self.global_points

    def scalars(self) -> dict[str, float]:
        out = {k: getattr(self, k).item() for k in ("total", "points", "cam", "rot", "trans", "normal")}
        out["global_points"] = self.global_points.item() if self.global_points is not None else float("nan")
        out["s_star"] = self.s_star
        out["clipped"] = int(self.clipped)
        return out


# ---------------------------------------------------------------- optimal scale


def weighted_median(values, weights) -> float:
    """Smallest v with cumulative weight >= half the total (a minimizer of sum w|s - v|)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("weighted_median: empty input")
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(weights[order])
    k = int(np.searchsorted(cw, 0.5 * cw[-1], side="left"))
    return float(values[order[min(k, values.size - 1)]])


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def optimal_scale(pred, gt, valid, weights=None, subsample: int = 4096, seed: int = 0) -> float:
    """Exact minimizer of sum_pixels w * || s * pred - gt ||_1 over s.

    ``weights`` defaults to the inverse ground-truth depth. When more than
    ``subsample`` pixels are valid a seeded uniform subset is used.
    """
    pred = _as_array(pred).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    valid = np.asarray(valid, dtype=bool).ravel()
    if pred.shape != gt.shape or valid.shape[0] != pred.shape[0]:
        raise ValueError(f"optimal_scale: shape mismatch {pred.shape} vs {gt.shape}")
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ValueError("optimal_scale: no valid pixels")
    if idx.size > subsample:
        idx = np.sort(np.random.default_rng(seed).choice(idx, size=subsample, replace=False))
    if weights is None:
        z = gt[idx, 2]
        if np.any(z <= 0):
            raise ValueError("optimal_scale: ground-truth depth must be positive on valid pixels")
        w = 1.0 / z
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()[idx]
    p, g = pred[idx], gt[idx]
    coef = np.abs(p) * w[:, None]
    usable = np.abs(p) > RATIO_EPS
    if not usable.any():
        raise ValueError("optimal_scale: all predicted coordinates are ~0")
    ratios = g[usable] / p[usable]
    return weighted_median(ratios, coef[usable])


# ---------------------------------------------------------------- individual terms


def point_loss(pred: Tensor, gt, valid, s_star: float) -> Tensor:
    """(1 / 3NHW) * sum over valid pixels of (1/z) * ||s* pred - gt||_1; s* held constant."""
    pred = tc.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or valid.shape != gt.shape[:-1]:
        raise ValueError(f"point_loss: shape mismatch {pred.shape} vs {gt.shape} (mask {valid.shape})")
    z = np.where(valid, gt[..., 2], 1.0)
    w = np.broadcast_to((valid / z)[..., None], gt.shape)
    resid = tc.abs_(pred * float(s_star) - gt)
    return tc.sum_(resid * np.array(w)) * (1.0 / gt[..., 0].size / 3.0)


def rotation_loss(pred_rel: Tensor, gt_rel) -> Tensor:
    """Geodesic angle between rotation stacks (..., 3, 3) -> (...)."""
    pred_rel = tc.as_tensor(pred_rel)
    gt_rel = np.asarray(gt_rel, dtype=np.float64)
    if pred_rel.shape != gt_rel.shape:
        raise ValueError(f"rotation_loss: shape mismatch {pred_rel.shape} vs {gt_rel.shape}")
    tr = tc.sum_(pred_rel * gt_rel, axis=(-2, -1))
    return tc.arccos((tr - 1.0) * 0.5)


def translation_loss(pred_t: Tensor, gt_t, s_star: float, delta: float = 1.0) -> Tensor:
    """Component-summed Huber of s* pred - gt over the last axis."""
    pred_t = tc.as_tensor(pred_t)
    gt_t = np.asarray(gt_t, dtype=np.float64)
    if pred_t.shape != gt_t.shape:
        raise ValueError(f"translation_loss: shape mismatch {pred_t.shape} vs {gt_t.shape}")
    return tc.sum_(tc.huber(pred_t * float(s_star) - gt_t, delta), axis=-1)


def _camera_terms(pred_rot: Tensor, pred_trans: Tensor, gt_rot, gt_trans, s_star, w: LossWeights):
    n = pred_rot.shape[0]
    if n < 2:
        raise ValueError(f"camera_loss: need at least 2 views, got {n}")
    gt_rot = np.asarray(gt_rot, dtype=np.float64)
    gt_trans = np.asarray(gt_trans, dtype=np.float64)
    ii, jj = ordered_pairs(n)
    ri, rj = tc.take(pred_rot, ii), tc.take(pred_rot, jj)
    ri_t = tc.swapaxes(ri, -1, -2)
    rel_r = ri_t @ rj
    ti, tj = tc.take(pred_trans, ii), tc.take(pred_trans, jj)
    rel_t = (ri_t @ tc.reshape(tj - ti, (len(ii), 3, 1))).reshape(len(ii), 3)
    rot = rotation_loss(rel_r, relative_rotations(gt_rot, ii, jj))
    trans = translation_loss(rel_t, relative_translations(gt_rot, gt_trans, ii, jj), s_star, w.huber_delta)
    rot_m, trans_m = tc.mean(rot), tc.mean(trans)
    return rot_m + trans_m * w.lambda_trans, rot_m, trans_m


def camera_loss(pred_rot: Tensor, pred_trans: Tensor, gt_rot, gt_trans, s_star: float,
                w: LossWeights = LossWeights()) -> Tensor:
    """Mean over ordered pairs i != j of rot + lambda_trans * trans on relative poses."""
    return _camera_terms(tc.as_tensor(pred_rot), tc.as_tensor(pred_trans), gt_rot, gt_trans, s_star, w)[0]


def normal_loss(pred_normals: Tensor, pred_valid, gt_normals, gt_valid) -> Tensor:
    """Mean angle between normals over jointly valid pixels (0 when none are)."""
    pred_normals = tc.as_tensor(pred_normals)
    gt_normals = np.asarray(gt_normals, dtype=np.float64)
    if pred_normals.shape != gt_normals.shape:
        raise ValueError(f"normal_loss: shape mismatch {pred_normals.shape} vs {gt_normals.shape}")
    joint = np.asarray(pred_valid, dtype=bool) & np.asarray(gt_valid, dtype=bool)
    count = int(joint.sum())
    if count == 0:
        return tc.sum_(pred_normals * 0.0)
    safe_gt = np.where(joint[..., None], gt_normals, 0.0)
    cosang = tc.sum_(pred_normals * safe_gt, axis=-1)
    ang = tc.arccos(cosang)
    return tc.sum_(ang * joint.astype(np.float64)) * (1.0 / count)


# ---------------------------------------------------------------- composite


def world_points(rotations, translations, points) -> np.ndarray:
    r = np.asarray(rotations)
    t = np.asarray(translations)
    return np.einsum("nij,nhwj->nhwi", r, points) + t[:, None, None, :]


def vg_loss(pred: GeometryOutput, gt, w: LossWeights = LossWeights(), seed: int = 0) -> LossReport:
    """Total = points + lambda_cam * cam + lambda_normal * normal.

    ``gt`` needs ``points``, ``valid``, ``normal_valid``, ``rotations`` and
    ``translations`` arrays. Predicted and target normals both come from
    point maps through the four-quadrant construction.
    """
    s = optimal_scale(pred.points, gt.points, gt.valid, subsample=w.align_subsample, seed=seed)
    lp = point_loss(pred.points, gt.points, gt.valid, s)
    cam, rot, trans = _camera_terms(pred.rotations, pred.translations, gt.rotations, gt.translations, s, w)
    pn, pv = pointmap_normals_t(pred.points, gt.valid)
    # targets use the same construction on the ground-truth points, so a
    # perfect point map scores zero even on curved surfaces
    with tc.no_grad():
        tn, tv = pointmap_normals_t(Tensor(np.asarray(gt.points, dtype=np.float64)), gt.valid)
    ln = normal_loss(pn, pv, tn.data, tv & gt.normal_valid)
    total = lp + cam * w.lambda_cam + ln * w.lambda_normal

    glob = None
    if pred.global_points is not None:
        gw = world_points(gt.rotations, gt.translations, gt.points)
        z = np.where(gt.valid, gt.points[..., 2], 1.0)
        sg = optimal_scale(pred.global_points, gw, gt.valid, weights=1.0 / z,
                           subsample=w.align_subsample, seed=seed + 1)
        glob = point_loss_weighted(pred.global_points, gw, gt.valid, 1.0 / z, sg)
    return LossReport(total=total, points=lp, cam=cam, rot=rot, trans=trans, normal=ln, s_star=s,
                      global_points=glob, lambda_global=w.lambda_global)


def point_loss_weighted(pred: Tensor, target, valid, weights, s_star: float) -> Tensor:
    """Point-loss form with explicit per-pixel weights (used for world-frame targets)."""
    target = np.asarray(target, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    wpix = np.broadcast_to((valid * np.asarray(weights))[..., None], target.shape)
    resid = tc.abs_(tc.as_tensor(pred) * float(s_star) - target)
    return tc.sum_(resid * np.array(wpix)) * (1.0 / target[..., 0].size / 3.0)


def clip_loss(report: LossReport, threshold: float = 10.0) -> LossReport:
    """Zero out a step whose total exceeds ``threshold``.

    The replacement total is a detached constant, so nothing downstream
    receives gradient; trainers skip the update when ``clipped`` is set.
    """
    if math.isinf(threshold) or not report.total.item() > threshold:
        return report
    return replace(report, total=Tensor(0.0), clipped=True)
