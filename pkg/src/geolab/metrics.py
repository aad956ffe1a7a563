"""Depth, point-cloud and camera-pose evaluation.

Depth metrics use per-image median(gt/pred) scale alignment. Point metrics
align the predicted world cloud to the ground-truth one with a similarity
transform (Umeyama on pixel correspondences, then ICP) before measuring
accuracy and completion. Pose metrics compare relative poses over all
ordered frame pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointMap, Pose, geodesic_angle, is_rotation, ordered_pairs

MIN_GT_TRANSLATION = 1e-9
POSE_FRAMES = 10
POSE_THRESHOLDS = (5, 15, 30)
AUC_THRESHOLD = 30


class DegenerateError(ValueError):
    pass


# ---------------------------------------------------------------- depth


def _depth_inputs(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not pred.shape == gt.shape == mask.shape:
        raise ValueError(f"depth shapes differ: {pred.shape}, {gt.shape}, {mask.shape}")
    if not mask.any():
        raise ValueError("depth metric on an empty mask")
    if np.any(gt[mask] <= 0):
        raise ValueError("ground-truth depth must be positive on the mask")
    return pred, gt, mask


def median_scale(pred, gt, mask) -> float:
    """median(gt / pred) over masked pixels with positive prediction (1.0 if there are none)."""
    pred, gt, mask = _depth_inputs(pred, gt, mask)
    use = mask & (pred > 0)
    return float(np.median(gt[use] / pred[use])) if use.any() else 1.0


def abs_rel(pred_depth, gt_depth, mask, align: bool = True) -> float:
    """Mean |d_aligned - d| / d over the mask."""
    pred, gt, mask = _depth_inputs(pred_depth, gt_depth, mask)
    s = median_scale(pred, gt, mask) if align else 1.0
    return float(np.mean(np.abs(s * pred[mask] - gt[mask]) / gt[mask]))


def delta_accuracy(pred_depth, gt_depth, mask, threshold: float = 1.25, align: bool = True) -> float:
    """Fraction of masked pixels with max(d_hat/d, d/d_hat) < threshold; non-positive d_hat fails."""
    pred, gt, mask = _depth_inputs(pred_depth, gt_depth, mask)
    s = median_scale(pred, gt, mask) if align else 1.0
    p, g = s * pred[mask], gt[mask]
    ok = p > 0
    ratio = np.full(p.shape, np.inf)
    ratio[ok] = np.maximum(p[ok] / g[ok], g[ok] / p[ok])
    return float(np.mean(ratio < threshold))


# ---------------------------------------------------------------- Sim(3)


@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be > 0, got {self.scale}")
        if not is_rotation(self.rotation, tol=1e-6):
            raise ValueError("Sim3 rotation is not in SO(3)")

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def umeyama_sim3(source, target, with_scale: bool = True) -> Sim3:
    """Least-squares similarity with target ~ s R source + t (reflection-corrected)."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"umeyama_sim3: shape mismatch {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateError(f"umeyama_sim3: need >= 3 correspondences, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateError("umeyama_sim3: source points are coincident or collinear")
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = (u * sign) @ vt
    var_s = (xs * xs).sum() / len(src)
    s = float((d * sign).sum() / var_s) if with_scale else 1.0
    if not s > 0:
        raise DegenerateError(f"umeyama_sim3: non-positive scale {s}")
    return Sim3(s, r, mu_d - s * r @ mu_s)


@dataclass
class IcpResult:
    transform: Sim3
    residuals: list  # mean nearest-neighbor distance after each accepted iterate, starting with init
    iterations: int


def _nn_residual(tree: cKDTree, pts) -> tuple[float, np.ndarray]:
    dist, idx = tree.query(pts, k=1)
    return float(np.mean(dist)), idx


def icp_refine(source, target, init: Sim3 | None = None, max_iter: int = 50, tol: float = 1e-9,
               tree: cKDTree | None = None, fit_scale: bool = False) -> IcpResult:
    """Nearest-neighbor ICP with Umeyama updates.

    An iterate is accepted only if it lowers the mean nearest-neighbor
    distance by more than ``tol``, so the residual sequence never increases.
    By default the scale stays at ``init.scale``: with a free scale the
    one-sided nearest-neighbor residual is minimized by shrinking the source
    onto a single target point.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("icp_refine: empty point cloud")
    tree = tree or cKDTree(dst)
    cur = init or Sim3.identity()
    res, idx = _nn_residual(tree, cur.apply(src))
    history = [res]
    it = 0
    for it in range(1, max_iter + 1):
        try:
            if fit_scale:
                cand = umeyama_sim3(src, dst[idx])
            else:
                rigid = umeyama_sim3(cur.scale * src, dst[idx], with_scale=False)
                cand = Sim3(cur.scale, rigid.rotation, rigid.translation)
        except DegenerateError:
            break
        new_res, new_idx = _nn_residual(tree, cand.apply(src))
        if not new_res < res - tol:
            break
        cur, res, idx = cand, new_res, new_idx
        history.append(res)
    return IcpResult(cur, history, it)


def acc_comp(pred_cloud, gt_cloud) -> tuple[float, float]:
    """(mean pred->gt nearest distance, mean gt->pred nearest distance)."""
    p = np.asarray(pred_cloud, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_cloud, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("acc_comp: empty point cloud")
    acc = float(np.mean(cKDTree(g).query(p, k=1)[0]))
    comp = float(np.mean(cKDTree(p).query(g, k=1)[0]))
    return acc, comp


# ---------------------------------------------------------------- poses


@dataclass
class PoseErrors:
    rot_deg: np.ndarray  # (pairs,)
    trans_deg: np.ndarray  # (pairs,), NaN where the pair was skipped
    pairs: np.ndarray  # (pairs, 2)

    @property
    def skipped(self) -> int:
        return int(np.isnan(self.trans_deg).sum())

    def rra(self, tau: float) -> float:
        return float(np.mean(self.rot_deg < tau))

    def rta(self, tau: float) -> float:
        t = self.trans_deg[~np.isnan(self.trans_deg)]
        return float(np.mean(t < tau)) if t.size else float("nan")

    def combined(self) -> np.ndarray:
        """Per-pair max(rot, trans) over pairs with a usable translation."""
        keep = ~np.isnan(self.trans_deg)
        return np.maximum(self.rot_deg[keep], self.trans_deg[keep])


def direction_angle_deg(a, b) -> np.ndarray:
    """Angle between vectors via atan2(|a x b|, a.b); 180 when ``a`` is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), (a * b).sum(-1)))
    return np.where(np.linalg.norm(a, axis=-1) > 0, ang, 180.0)


def pose_errors(pred: list[Pose], gt: list[Pose]) -> PoseErrors:
    if len(pred) != len(gt):
        raise ValueError(f"pose_errors: {len(pred)} predicted vs {len(gt)} ground-truth poses")
    if len(gt) < 2:
        raise ValueError("pose metrics need at least 2 poses")
    pr = np.stack([p.rotation for p in pred])
    pt = np.stack([p.translation for p in pred])
    gr = np.stack([p.rotation for p in gt])
    gtt = np.stack([p.translation for p in gt])
    ii, jj = ordered_pairs(len(gt))
    rel_pr = np.swapaxes(pr[ii], -1, -2) @ pr[jj]
    rel_gr = np.swapaxes(gr[ii], -1, -2) @ gr[jj]
    rot = np.degrees(geodesic_angle(rel_pr, rel_gr))
    rel_pt = np.einsum("nji,nj->ni", pr[ii], pt[jj] - pt[ii])
    rel_gt = np.einsum("nji,nj->ni", gr[ii], gtt[jj] - gtt[ii])
    trans = direction_angle_deg(rel_pt, rel_gt)
    trans = np.where(np.linalg.norm(rel_gt, axis=-1) < MIN_GT_TRANSLATION, np.nan, trans)
    return PoseErrors(np.atleast_1d(rot), trans, np.stack([ii, jj], axis=1))


def pose_metrics(pred: list[Pose], gt: list[Pose], thresholds=POSE_THRESHOLDS) -> dict:
    """RRA@tau and RTA@tau for each threshold (degrees), as fractions."""
    e = pose_errors(pred, gt)
    out = {}
    for tau in thresholds:
        out[f"rra@{tau:g}"] = e.rra(tau)
        out[f"rta@{tau:g}"] = e.rta(tau)
    return out


def auc(rot_deg, trans_deg, max_threshold: float = AUC_THRESHOLD) -> float:
    """Mean over integer thresholds 1..max_threshold of the fraction of pairs with max(rot, trans) < tau.

    Pairs whose translation error is NaN (skipped) are ignored.
    """
    if not max_threshold > 0:
        raise ValueError("auc: max_threshold must be > 0")
    r = np.asarray(rot_deg, dtype=np.float64).ravel()
    t = np.asarray(trans_deg, dtype=np.float64).ravel()
    keep = ~np.isnan(t)
    err = np.maximum(r[keep], t[keep])
    if err.size == 0:
        return float("nan")
    taus = np.arange(1, int(math.floor(max_threshold)) + 1)
    return float(np.mean([(err < tau).mean() for tau in taus]))


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def flat(self) -> dict:
        out = dict(self.values)
        out.update({f"n_{k}": v for k, v in self.counts.items()})
        out.update({f"diag_{k}": v for k, v in self.diagnostics.items()})
        return out

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.flat()), sort_keys=True, indent=2) + "\n"

    def csv_header(self) -> list[str]:
        return sorted(self.flat())

    def csv_row(self) -> list[str]:
        flat = self.flat()
        return [_fmt(flat[k]) for k in self.csv_header()]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, float)):
            v = float(v)
            out[k] = v if math.isfinite(v) else None
        elif isinstance(v, (np.integer, int)):
            out[k] = int(v)
        else:
            out[k] = v
    return out


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Mean of each value over scenes (NaN-aware); counts are summed."""
    if not reports:
        raise ValueError("aggregate: no reports")
    keys = sorted(set().union(*(r.values for r in reports)))
    vals = {}
    for k in keys:
        xs = np.array([r.values.get(k, np.nan) for r in reports], dtype=np.float64)
        vals[k] = float(np.mean(xs[~np.isnan(xs)])) if (~np.isnan(xs)).any() else float("nan")
    counts = {k: int(sum(r.counts.get(k, 0) for r in reports)) for k in sorted(set().union(*(r.counts for r in reports)))}
    return MetricsReport(vals, counts, {"scenes": len(reports)})


# ---------------------------------------------------------------- full protocol


def _world(poses, maps, valid):
    return np.concatenate([(m.points[v] @ p.rotation.T + p.translation) for p, m, v in zip(poses, maps, valid)])


def align_clouds(pred_pts, gt_pts, subsample: int = 4096, seed: int = 0, max_iter: int = 50,
                 tol: float = 1e-9) -> tuple[Sim3, dict]:
    """Umeyama on pixel correspondences, then scale-fixed ICP.

    The Umeyama estimate is only used when it lowers the symmetric chamfer
    distance relative to leaving the prediction as is.
    """
    rng = np.random.default_rng(seed)
    idx = np.arange(len(pred_pts))
    if len(idx) > subsample:
        idx = np.sort(rng.choice(idx, size=subsample, replace=False))
    tree = cKDTree(gt_pts)
    init, used_umeyama = Sim3.identity(), False
    try:
        cand = umeyama_sim3(pred_pts[idx], gt_pts[idx])
        # symmetric chamfer, so a shrunken cloud cannot win by hiding inside the target
        if sum(acc_comp(cand.apply(pred_pts), gt_pts)) < sum(acc_comp(pred_pts, gt_pts)):
            init, used_umeyama = cand, True
    except DegenerateError:
        pass
    res = icp_refine(pred_pts, gt_pts, init, max_iter=max_iter, tol=tol, tree=tree)
    diag = {"umeyama_used": int(used_umeyama), "icp_iterations": res.iterations,
            "sim3_scale": res.transform.scale, "align_residual": res.residuals[-1]}
    return res.transform, diag


def evaluate_scene(pred_poses: list[Pose], pred_maps: list[PointMap], sample, seed: int = 0,
                   pose_frames: int = POSE_FRAMES, thresholds=POSE_THRESHOLDS, auc_threshold: float = AUC_THRESHOLD,
                   subsample: int = 4096, icp_iters: int = 50, icp_tol: float = 1e-9) -> MetricsReport:
    """Depth, point-cloud and pose metrics for one scene."""
    n = sample.images.shape[0]
    if len(pred_poses) != n or len(pred_maps) != n:
        raise ValueError(f"evaluate_scene: {len(pred_poses)} poses / {len(pred_maps)} maps for {n} frames")
    vals, counts = {}, {}

    # depth, aligned per frame
    ar, dl, npx = [], [], 0
    usable = []
    for i in range(n):
        m = sample.valid[i] & np.isfinite(pred_maps[i].points).all(axis=-1)
        usable.append(m)
        if m.any():
            pz = pred_maps[i].points[..., 2]
            ar.append(abs_rel(pz, sample.depth[i], m))
            dl.append(delta_accuracy(pz, sample.depth[i], m))
            npx += int(m.sum())
    vals["abs_rel"] = float(np.mean(ar)) if ar else float("nan")
    vals["delta_125"] = float(np.mean(dl)) if dl else float("nan")
    counts["pixels"] = npx

    # point clouds in world frame, predicted poses for the prediction
    gt_poses = [Pose(r, t) for r, t in zip(sample.rotations, sample.translations)]
    gt_maps = [PointMap(sample.points[i], sample.valid[i]) for i in range(n)]
    pred_cloud = _world(pred_poses, pred_maps, usable)
    gt_cloud = _world(gt_poses, gt_maps, usable)
    sim, diag = align_clouds(pred_cloud, gt_cloud, subsample, seed, icp_iters, icp_tol)
    vals["acc"], vals["comp"] = acc_comp(sim.apply(pred_cloud), gt_cloud)
    counts["points"] = len(gt_cloud)

    # poses on a seeded frame subset
    k = min(pose_frames, n)
    frames = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    e = pose_errors([pred_poses[i] for i in frames], [gt_poses[i] for i in frames])
    for tau in thresholds:
        vals[f"rra@{tau:g}"] = e.rra(tau)
        vals[f"rta@{tau:g}"] = e.rta(tau)
    vals[f"auc@{auc_threshold:g}"] = auc(e.rot_deg, e.trans_deg, auc_threshold)
    counts["pairs"] = len(e.rot_deg)
    counts["skipped_pairs"] = e.skipped
    return MetricsReport(vals, counts, diag)


def evaluate_ground_truth(sample, **kw) -> MetricsReport:
    """Evaluate the scene's own ground truth as if it were a prediction."""
    poses = [Pose(r, t) for r, t in zip(sample.rotations, sample.translations)]
    maps = [PointMap(sample.points[i], sample.valid[i]) for i in range(sample.images.shape[0])]
    return evaluate_scene(poses, maps, sample, **kw)
