from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geolab.geometry import Pose, axis_angle, random_rotation, rot_z
from geolab.metrics import (DegenerateError, MetricsReport, Sim3, abs_rel, acc_comp, aggregate, auc, delta_accuracy,
                            direction_angle_deg, evaluate_ground_truth, evaluate_scene, icp_refine, pose_errors,
                            pose_metrics, umeyama_sim3)
from geolab.synthscene import load_scene

GOLDEN = Path(__file__).parent / "golden"
seeds = st.integers(0, 2**32 - 1)


# ---------------------------------------------------------------- brute-force oracles


def brute_acc_comp(p, g):
    d = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1).mean(), d.min(axis=0).mean()


def brute_pose_errors(pred, gt):
    rot, trans = [], []
    for i, j in itertools.permutations(range(len(gt)), 2):
        rp = pred[i].rotation.T @ pred[j].rotation
        rg = gt[i].rotation.T @ gt[j].rotation
        c = (np.trace(rp.T @ rg) - 1) / 2
        rot.append(math.degrees(math.acos(max(-1.0, min(1.0, c)))))
        tp = pred[i].rotation.T @ (pred[j].translation - pred[i].translation)
        tg = gt[i].rotation.T @ (gt[j].translation - gt[i].translation)
        if np.linalg.norm(tg) < 1e-9:
            trans.append(None)
            continue
        c = tp @ tg / (np.linalg.norm(tp) * np.linalg.norm(tg))
        trans.append(math.degrees(math.acos(max(-1.0, min(1.0, c)))))
    return rot, trans


def brute_auc(rot, trans, tmax):
    total = 0.0
    for tau in range(1, tmax + 1):
        hits = n = 0
        for r, t in zip(rot, trans):
            if t is None:
                continue
            n += 1
            hits += r < tau and t < tau
        total += hits / n
    return total / tmax


def random_poses(rng, n):
    return [Pose(random_rotation(rng), rng.normal(size=3)) for _ in range(n)]


def noisy(poses, rng, deg=10.0, t=0.3):
    return [Pose(p.rotation @ axis_angle(rng.normal(size=3), np.deg2rad(rng.uniform(0, deg))),
                 p.translation + rng.normal(scale=t, size=3)) for p in poses]


# ---------------------------------------------------------------- depth


def test_abs_rel_examples(rng):
    gt = rng.uniform(1, 5, size=(4, 5))
    mask = np.ones_like(gt, bool)
    assert abs_rel(gt, gt, mask) == 0.0
    assert abs_rel(2 * gt, gt, mask) == 0.0
    d = 2.0
    assert abs_rel(np.array([d, d, 2 * d]), np.full(3, d), np.ones(3, bool)) == pytest.approx(1 / 3, abs=1e-15)


def test_depth_empty_mask():
    with pytest.raises(ValueError):
        abs_rel(np.ones(3), np.ones(3), np.zeros(3, bool))
    with pytest.raises(ValueError):
        delta_accuracy(np.ones(3), np.ones(3), np.zeros(3, bool))


def test_delta_examples(rng):
    gt = rng.uniform(1, 5, size=(4, 5))
    mask = np.ones_like(gt, bool)
    assert delta_accuracy(gt, gt, mask) == 1.0
    assert delta_accuracy(1.3 * gt, gt, mask, align=False) == 0.0


def test_delta_matches_enumeration(rng):
    for _ in range(20):
        gt = rng.uniform(1, 5, size=(6, 6))
        pred = gt * rng.uniform(0.6, 1.6, size=gt.shape)
        mask = rng.uniform(size=gt.shape) < 0.7
        s = np.median(gt[mask] / pred[mask])
        hits = sum(max(s * p / g, g / (s * p)) < 1.25 for p, g in zip(pred[mask], gt[mask]))
        assert delta_accuracy(pred, gt, mask) == pytest.approx(hits / mask.sum(), abs=1e-15)


# ---------------------------------------------------------------- Sim(3)


def test_umeyama_identity(rng):
    p = rng.normal(size=(20, 3))
    t = umeyama_sim3(p, p)
    assert t.scale == pytest.approx(1, abs=1e-12)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12) and np.allclose(t.translation, 0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_umeyama_recovers_similarity(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(30, 3))
    r, t, s = random_rotation(rng), rng.normal(size=3), 2.0
    est = umeyama_sim3(p, s * p @ r.T + t)
    assert abs(est.scale - s) < 1e-8
    assert np.abs(est.rotation - r).max() < 1e-8 and np.abs(est.translation - t).max() < 1e-8


def test_umeyama_reflection_gives_rotation(rng):
    p = rng.normal(size=(20, 3))
    q = p * np.array([1.0, 1.0, -1.0]) + rng.normal(scale=0.01, size=p.shape)
    assert np.linalg.det(umeyama_sim3(p, q).rotation) == pytest.approx(1.0, abs=1e-9)


def test_umeyama_degenerate():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateError):
        umeyama_sim3(line, line)
    with pytest.raises(DegenerateError):
        umeyama_sim3(np.ones((4, 3)), np.ones((4, 3)))


def test_sim3_invariants():
    with pytest.raises(ValueError):
        Sim3(0.0, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Sim3(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_icp_keeps_exact_init(rng):
    p = rng.normal(size=(100, 3))
    r, t = random_rotation(rng), rng.normal(size=3)
    init = Sim3(1.5, r, t)
    res = icp_refine(p, init.apply(p), init)
    assert res.transform is init and res.residuals[0] < 1e-12


def test_icp_monotone_after_perturbation(rng):
    for _ in range(20):
        p = rng.normal(size=(150, 3))
        r, t = random_rotation(rng), rng.normal(size=3)
        q = p @ r.T + t
        init = Sim3(1.0, r @ axis_angle(rng.normal(size=3), 0.1), t + rng.normal(scale=0.1, size=3))
        res = icp_refine(p, q, init)
        assert np.all(np.diff(res.residuals) <= 0)
        assert res.residuals[-1] <= res.residuals[0]


def test_icp_from_subsample_umeyama(rng):
    p = rng.normal(size=(200, 3))
    r, t = random_rotation(rng), rng.normal(size=3)
    q = 1.3 * p @ r.T + t
    half = rng.choice(200, 100, replace=False)
    res = icp_refine(p, q, umeyama_sim3(p[half], q[half]))
    assert res.residuals[-1] < 1e-6


def test_icp_empty():
    with pytest.raises(ValueError):
        icp_refine(np.zeros((0, 3)), np.ones((3, 3)))


def test_acc_comp_examples(rng):
    g = rng.normal(size=(4, 3))
    assert acc_comp(g, g) == (0.0, 0.0)
    spread = np.array([[0.0, 0, 0], [3, 0, 0], [0, 3, 0], [0, 0, 3]])
    out = spread[0] + np.array([-1.0, 0.0, 0.0])
    acc, comp = acc_comp(np.vstack([spread, out]), spread)
    assert acc == pytest.approx(1 / 5, abs=1e-15) and comp == 0.0
    acc, comp = acc_comp(g[:2], g)
    assert acc == 0.0 and comp > 0
    with pytest.raises(ValueError):
        acc_comp(np.zeros((0, 3)), g)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_acc_comp_brute_force_and_swap(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(int(rng.integers(1, 200)), 3))
    g = rng.normal(size=(int(rng.integers(1, 200)), 3))
    acc, comp = acc_comp(p, g)
    ba, bc = brute_acc_comp(p, g)
    assert abs(acc - ba) < 1e-12 and abs(comp - bc) < 1e-12
    assert acc_comp(g, p) == (comp, acc)


# ---------------------------------------------------------------- poses


def test_pose_metrics_perfect(rng):
    gt = random_poses(rng, 5)
    m = pose_metrics(gt, gt, thresholds=(0.5, 5, 30))
    assert all(v == 1.0 for v in m.values())


def test_pose_metrics_fifteen_degrees(rng):
    gt = random_poses(rng, 2)
    pred = [gt[0], Pose(gt[1].rotation @ rot_z(np.deg2rad(15)), gt[1].translation)]
    m = pose_metrics(pred, gt, thresholds=(10, 30))
    assert m["rra@30"] == 1.0 and m["rra@10"] == 0.0


def test_pose_metrics_need_two():
    with pytest.raises(ValueError):
        pose_metrics([Pose.identity()], [Pose.identity()])


def test_skipped_pairs_and_zero_prediction():
    gt = [Pose.identity(), Pose.identity(), Pose(np.eye(3), [1.0, 0, 0])]
    e = pose_errors(gt, gt)
    assert e.skipped == 2 and np.isnan(e.trans_deg).sum() == 2
    assert direction_angle_deg(np.zeros(3), np.array([1.0, 0, 0])) == 180.0


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_pose_metrics_match_pair_loop(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    gt = random_poses(rng, n)
    pred = noisy(gt, rng, deg=40, t=0.8)
    e = pose_errors(pred, gt)
    rot, trans = brute_pose_errors(pred, gt)
    assert np.allclose(e.rot_deg, rot, atol=1e-6)
    for tau in (5, 15, 30):
        assert abs(e.rra(tau) - np.mean([r < tau for r in rot])) < 1e-12
        assert abs(e.rta(tau) - np.mean([t < tau for t in trans])) < 1e-12
    assert abs(auc(e.rot_deg, e.trans_deg, 30) - brute_auc(rot, trans, 30)) < 1e-12


def test_auc_examples():
    assert auc(np.zeros(6), np.zeros(6), 30) == 1.0
    assert auc(np.full(6, 30.5), np.full(6, 30.5), 30) == 0.0
    assert auc([0.5], [10.5], 30) == pytest.approx(20 / 30)
    with pytest.raises(ValueError):
        auc([1.0], [1.0], 0)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_auc_properties(seed):
    rng = np.random.default_rng(seed)
    r, t = rng.uniform(0, 40, size=8), rng.uniform(0, 40, size=8)
    base = auc(r, t, 30)
    assert auc(np.append(r, 0.0), np.append(t, 0.0), 30) >= base
    # the per-pair max never exceeds the worse of the two accuracy curves
    e = np.maximum(r, t)
    for tau in range(1, 31):
        assert np.mean(e < tau) <= min(np.mean(r < tau), np.mean(t < tau))
    # and equals it when one error dominates on every pair
    assert auc(r, r * 0.5, 30) == pytest.approx(np.mean([np.mean(r < tau) for tau in range(1, 31)]), abs=1e-15)


# ---------------------------------------------------------------- protocol


def test_ground_truth_is_perfect(scene_sample):
    rep = evaluate_ground_truth(scene_sample)
    v = rep.values
    assert v["abs_rel"] == 0.0 and v["acc"] == 0.0 and v["comp"] == 0.0
    assert v["auc@30"] == 1.0
    assert all(v[k] == 1.0 for k in v if k.startswith(("rra", "rta")))
    assert v["delta_125"] == 1.0


def test_report_schema(small_sample):
    rep = evaluate_ground_truth(small_sample)
    flat = rep.flat()
    for key in ("abs_rel", "delta_125", "acc", "comp", "rra@5", "rra@15", "rra@30", "rta@30", "auc@30",
                "n_pixels", "n_points", "n_pairs", "diag_icp_iterations", "diag_sim3_scale"):
        assert key in flat and flat[key] is not None
    assert rep.counts["pairs"] == 12
    for k in ("delta_125", "rra@30", "rta@30", "auc@30"):
        assert 0.0 <= rep.values[k] <= 1.0
    assert rep.csv_header() == sorted(flat) and len(rep.csv_row()) == len(flat)


def test_pose_frame_sampling_is_seeded(scene_sample):
    sample = scene_sample
    a = evaluate_ground_truth(sample, pose_frames=3, seed=1)
    assert a.counts["pairs"] == 6
    assert a.to_json() == evaluate_ground_truth(sample, pose_frames=3, seed=1).to_json()


def test_aggregate_is_mean():
    a = MetricsReport({"x": 1.0, "y": float("nan")}, {"pixels": 3})
    b = MetricsReport({"x": 3.0, "y": 2.0}, {"pixels": 4})
    agg = aggregate([a, b])
    assert agg.values == {"x": 2.0, "y": 2.0} and agg.counts == {"pixels": 7}
    assert json.loads(MetricsReport({"z": float("nan")}).to_json()) == {"z": None}


def test_golden_report_is_byte_stable():
    import sys
    sys.path.insert(0, str(GOLDEN))
    try:
        from make_golden import evaluate
    finally:
        sys.path.pop(0)
    sample = load_scene(GOLDEN / "scene", 0)
    assert evaluate(sample).to_json() == (GOLDEN / "report.json").read_text()
