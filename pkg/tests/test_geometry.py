from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation as SciRot

from geolab.geometry import (PointMap, Pose, depth_of, geodesic_angle, is_rotation, pointmap_normals,
                             random_rotation, relative_pose, rot_x, rot_z, svd_orthogonalize)
from geolab.synthscene import SceneSpec, generate_scene, render

seeds = st.integers(0, 2**32 - 1)


def random_pose(rng):
    return Pose(random_rotation(rng), rng.normal(size=3))


def test_svd_orthogonalize_identity():
    assert np.allclose(svd_orthogonalize(np.eye(3).ravel()), np.eye(3), atol=1e-12)


def test_svd_orthogonalize_absorbs_scale(rng):
    r = random_rotation(rng)
    assert np.allclose(svd_orthogonalize(2 * r.ravel()), r, atol=1e-12)


def test_svd_orthogonalize_is_nearest_rotation():
    """Independent oracle: local minimization of ||R(w) - M||_F over rotation vectors."""
    rng = np.random.default_rng(7)
    for _ in range(20):
        m = rng.normal(size=(3, 3))
        r = svd_orthogonalize(m.ravel())
        assert is_rotation(r)
        best = None
        for start in rng.normal(size=(8, 3)) * 2:
            res = minimize(lambda w: np.sum((SciRot.from_rotvec(w).as_matrix() - m) ** 2), start,
                           method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
            best = res if best is None or res.fun < best.fun else best
        assert np.sum((r - m) ** 2) <= best.fun + 1e-9
        assert np.allclose(SciRot.from_rotvec(best.x).as_matrix(), r, atol=1e-5)


def test_svd_orthogonalize_rank_deficient():
    with pytest.raises(ValueError):
        svd_orthogonalize(np.zeros(9))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_svd_orthogonalize_idempotent(seed):
    r = random_rotation(np.random.default_rng(seed))
    assert np.allclose(svd_orthogonalize(r.ravel()), r, atol=1e-9, rtol=0)


def test_geodesic_examples(rng):
    r = random_rotation(rng)
    assert geodesic_angle(r, r) == pytest.approx(0.0, abs=1e-7)
    assert geodesic_angle(np.eye(3), rot_z(np.pi)) == pytest.approx(np.pi, abs=1e-12)
    assert geodesic_angle(np.eye(3), rot_x(0.3)) == pytest.approx(0.3, abs=1e-12)


def test_geodesic_against_axis_angle_oracle(rng):
    for _ in range(50):
        a, b = random_rotation(rng), random_rotation(rng)
        assert geodesic_angle(a, b) == pytest.approx(SciRot.from_matrix(a.T @ b).magnitude(), abs=1e-7)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_geodesic_symmetric_and_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_rotation(rng) for _ in range(3))
    assert geodesic_angle(a, b) == pytest.approx(geodesic_angle(b, a), abs=1e-12)
    assert geodesic_angle(a, c) <= geodesic_angle(a, b) + geodesic_angle(b, c) + 1e-9
    assert 0 <= geodesic_angle(a, b) <= np.pi


def test_relative_pose_examples(rng):
    t = random_pose(rng)
    rel = relative_pose(t, t)
    assert np.allclose(rel.rotation, np.eye(3), atol=1e-12) and np.allclose(rel.translation, 0, atol=1e-12)
    rel = relative_pose(Pose.identity(), Pose(np.eye(3), [1, 0, 0]))
    assert np.array_equal(rel.translation, [1.0, 0.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_relative_pose_roundtrip(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    back = a.compose(relative_pose(a, b))
    assert np.allclose(back.matrix(), b.matrix(), atol=1e-10, rtol=0)
    same = relative_pose(a, a)
    assert np.allclose(same.matrix(), np.eye(4), atol=1e-12)


def test_pose_matrix_bottom_row(rng):
    assert np.array_equal(random_pose(rng).matrix()[3], [0, 0, 0, 1])


def _grid(h, w):
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return u, v


def test_normals_fronto_parallel_plane():
    u, v = _grid(6, 7)
    pts = np.stack([u * 0.1, v * 0.1, np.full_like(u, 2.0)], axis=-1)
    n = pointmap_normals(PointMap(pts, np.ones((6, 7), bool)))
    assert n.valid.all()
    assert np.allclose(n.normals[1:-1, 1:-1], [0, 0, -1], atol=1e-12)


def test_normals_tilted_plane():
    u, v = _grid(6, 6)
    x = u * 0.1 - 0.3
    pts = np.stack([x, v * 0.1, 3.0 - x], axis=-1)  # x + z = 3
    n = pointmap_normals(PointMap(pts, np.ones((6, 6), bool)))
    h = np.sqrt(0.5)
    assert np.allclose(n.normals[1:-1, 1:-1], [-h, 0, -h], atol=1e-12)


def test_normals_isolated_pixel_invalid():
    pts = np.ones((3, 3, 3))
    valid = np.zeros((3, 3), bool)
    valid[1, 1] = True
    n = pointmap_normals(PointMap(pts, valid))
    assert not n.valid.any()


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_normals_unit_norm(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(5, 5, 3))
    pts[..., 2] = np.abs(pts[..., 2]) + 0.5
    n = pointmap_normals(PointMap(pts, rng.uniform(size=(5, 5)) < 0.8))
    norms = np.linalg.norm(n.normals[n.valid], axis=-1)
    assert np.allclose(norms, 1.0, atol=1e-9, rtol=0)
    assert np.all(n.normals[n.valid][:, 2] <= 1e-12)


def test_depth_of():
    pts = np.array([[[0.0, 0.0, 2.0], [1.0, 1.0, 5.0]]])
    d = depth_of(PointMap(pts, np.array([[True, False]])))
    assert d[0, 0] == 2.0 and np.isnan(d[0, 1])


def test_depth_of_matches_renderer():
    scene = generate_scene(SceneSpec(seed=4))
    r = render(scene, scene.poses[0], scene.intrinsics)
    d = depth_of(PointMap(r.points, r.valid))
    assert np.array_equal(d[r.valid], r.depth[r.valid])
    assert np.isnan(d[~r.valid]).all()
