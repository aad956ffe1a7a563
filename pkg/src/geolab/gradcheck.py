"""Central-difference gradient checks for every op kind and every loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry, losses
from . import tensor as tc
from .tensor import Tensor

KINK_MARGIN = 1e-3


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, mask=None) -> float:
    """max_k |analytic_k - fd_k| / max(1, |fd_k|) with central differences of step ``h``.

    ``mask`` optionally restricts the comparison to selected coordinates,
    e.g. to skip ones sitting on a kink.
    """
    x = np.array(x, dtype=np.float64)
    mask = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    tc.backward(out)
    analytic = np.zeros_like(x) if xt.grad is None else xt.grad
    flat = x.ravel()
    fd = np.zeros(flat.size)
    todo = np.flatnonzero(mask.ravel())
    with tc.no_grad():
        for k in todo:
            orig = flat[k]
            flat[k] = orig + h
            fp = f(Tensor(flat.reshape(x.shape))).item()
            flat[k] = orig - h
            fm = f(Tensor(flat.reshape(x.shape))).item()
            flat[k] = orig
            fd[k] = (fp - fm) / (2 * h)
    fd = fd.reshape(x.shape)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(err[mask].max()) if mask.any() else 0.0


@dataclass(frozen=True)
class Check:
    """``build(rng)`` returns ``(f, x)`` or ``(f, x, mask)``."""

    name: str
    build: Callable


def _away(rng, shape, kinks=(0.0,), margin=KINK_MARGIN * 10):
    """Random values kept at least ``margin`` from every kink location."""
    x = rng.normal(size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x = np.where(near, k + np.sign(x - k + 1e-300) * margin * 2 + (x - k), x)
    return x


def _proj(rng, shape):
    """Fixed random projection turning any tensor into a scalar."""
    c = rng.normal(size=shape)
    return lambda t: tc.sum_(t * c)


def _op_checks() -> list[Check]:
    def unary(name, fn, shape=(3, 4), sampler=None):
        def build(rng):
            x = sampler(rng, shape) if sampler else rng.normal(size=shape)
            probe = _proj(rng, fn(Tensor(x)).shape)
            return (lambda t: probe(fn(t))), x
        return Check(name, build)

    def binary(name, fn, shape=(3, 4)):
        def build(rng):
            x = rng.normal(size=(2,) + shape)
            probe = _proj(rng, fn(Tensor(x[0]), Tensor(x[1])).shape)
            return (lambda t: probe(fn(t[0], t[1]))), x
        return Check(name, build)

    def mm(rng):
        x = rng.normal(size=(2 * 3 * 4 + 4 * 5,))
        probe = _proj(rng, (2, 3, 5))
        return (lambda t: probe(tc.matmul(t[:24].reshape(2, 3, 4), t[24:].reshape(4, 5)))), x

    def mm_batched(rng):
        x = rng.normal(size=(2 * 3 * 4 + 2 * 4 * 2,))
        probe = _proj(rng, (2, 3, 2))
        return (lambda t: probe(tc.matmul(t[:24].reshape(2, 3, 4), t[24:].reshape(2, 4, 2)))), x

    def arccos_sampler(rng, shape):
        x = rng.uniform(-1 + 2e-3, 1 - 2e-3, size=shape)
        return x

    def svd_sampler(rng, shape):
        return (np.eye(3).ravel() * 2 + 0.5 * rng.normal(size=shape))

    def cross(rng):
        x = rng.normal(size=(2, 4, 3))
        probe = _proj(rng, (4, 3))
        return (lambda t: probe(tc.cross3(t[0], t[1]))), x

    def concat(rng):
        x = rng.normal(size=(2, 3, 2))
        probe = _proj(rng, (3, 4))
        return (lambda t: probe(tc.concat([t[0], t[1]], axis=1))), x

    return [
        binary("add", tc.add), binary("sub", tc.sub), binary("mul", tc.mul),
        Check("matmul", mm), Check("matmul_batched", mm_batched),
        unary("reshape", lambda t: t.reshape(4, 3)),
        unary("transpose", lambda t: tc.transpose(t, (1, 0))),
        Check("concat", concat),
        unary("slice", lambda t: t[1:, ::2]),
        unary("take", lambda t: tc.take(t, [2, 0, 2, 1], axis=0)),
        unary("pad", lambda t: tc.pad(t, [(1, 0), (0, 2)])),
        unary("expand", lambda t: tc.expand(t, (2, 3, 4))),
        unary("sum", lambda t: tc.sum_(t, axis=1)),
        unary("mean", lambda t: tc.mean(t, axis=0)),
        unary("canonical_sum", lambda t: tc.canonical_sum(t, axis=0)),
        unary("softmax", tc.softmax),
        unary("layernorm", tc.layernorm),
        unary("relu", tc.relu, sampler=_away),
        unary("gelu", tc.gelu),
        unary("exp", tc.exp),
        unary("log", tc.log, sampler=lambda r, s: r.uniform(0.2, 3.0, size=s)),
        unary("sqrt", tc.sqrt, sampler=lambda r, s: r.uniform(0.2, 3.0, size=s)),
        unary("abs", tc.abs_, sampler=_away),
        unary("clamp", lambda t: tc.clamp(t, -0.5, 0.5), sampler=lambda r, s: _away(r, s, (-0.5, 0.5))),
        unary("arccos", tc.arccos, sampler=arccos_sampler),
        unary("huber", lambda t: tc.huber(t, 1.0), sampler=lambda r, s: 1.5 * _away(r, s, (-1 / 1.5, 0.0, 1 / 1.5))),
        Check("cross3", cross),
        unary("l2_normalize", tc.l2_normalize, shape=(4, 3)),
        unary("svd_orthogonalize", tc.svd_orthogonalize, shape=(2, 9), sampler=svd_sampler),
    ]


# ---------------------------------------------------------------- loss fixtures


def _toy_batch(rng, n=3, h=4, w=4):
    """Small batch with positive depth, smooth surfaces and random poses."""
    u, v = np.meshgrid(np.linspace(-0.5, 0.5, w), np.linspace(-0.4, 0.4, h))
    pts = []
    for _ in range(n):
        a, b, c = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(1.5, 3.0)
        z = c + a * u + b * v
        p = np.stack([u * z, v * z, z], axis=-1)
        pts.append(p)
    points = np.array(pts)
    valid = rng.uniform(size=(n, h, w)) > 0.1
    gn = geometry.pointmap_normals(geometry.PointMap(points, valid))
    rots = np.array([geometry.random_rotation(rng) for _ in range(n)])
    trans = rng.normal(scale=0.3, size=(n, 3))

    class GT:
        pass

    gt = GT()
    gt.points, gt.valid = points * 1.0, valid
    gt.normals, gt.normal_valid = gn.normals, gn.valid
    gt.rotations, gt.translations = rots, trans
    return gt


def _off_kinks(pred, gt, s, margin=KINK_MARGIN):
    """Move predicted coordinates whose scaled residual is within ``margin`` of 0 away from it."""
    r = s * pred - gt
    push = np.where(r >= 0, 1.0, -1.0) * 2 * margin / s
    return np.where(np.abs(r) < margin, pred + push, pred)


def _loss_checks() -> list[Check]:
    w = losses.LossWeights()

    def points(rng):
        gt = _toy_batch(rng)
        pred = gt.points * rng.uniform(0.5, 2.0) + rng.normal(scale=0.1, size=gt.points.shape)
        s = losses.optimal_scale(pred, gt.points, gt.valid)
        pred = _off_kinks(pred, gt.points, s)
        return (lambda t: losses.point_loss(t, gt.points, gt.valid, s)), pred

    def rotation(rng):
        gt = geometry.random_rotation(rng)
        axis = rng.normal(size=3)
        pred_r = gt @ geometry.axis_angle(axis, np.deg2rad(rng.uniform(10, 170)))
        raw = (pred_r * rng.uniform(0.5, 2.0) + 0.05 * rng.normal(size=(3, 3))).ravel()
        return (lambda t: losses.rotation_loss(tc.svd_orthogonalize(t), gt)), raw

    def translation(rng):
        gt = rng.normal(size=(4, 3))
        pred = 1.5 * _away(rng, (4, 3), kinks=(-1 / 1.5, 1 / 1.5), margin=KINK_MARGIN) + gt
        return (lambda t: tc.sum_(losses.translation_loss(t, gt, 1.0, 1.0))), pred

    def camera(rng):
        n = 3
        gt_r = np.array([geometry.random_rotation(rng) for _ in range(n)])
        gt_t = rng.normal(scale=0.4, size=(n, 3))
        raw = np.concatenate([(gt_r @ np.array([geometry.axis_angle(rng.normal(size=3), 0.4) for _ in range(n)]))
                              .reshape(n, 9) + 0.05 * rng.normal(size=(n, 9)),
                              gt_t + 0.1 * rng.normal(size=(n, 3))], axis=1)
        s = rng.uniform(0.7, 1.3)

        def f(t):
            r = tc.svd_orthogonalize(t[:, :9])
            return losses.camera_loss(r, t[:, 9:], gt_r, gt_t, s, w)
        return f, raw

    def normal(rng):
        gt = _toy_batch(rng, n=2)
        pred = gt.points + rng.normal(scale=0.05, size=gt.points.shape)

        def f(t):
            pn, pv = geometry.pointmap_normals_t(t, gt.valid)
            return losses.normal_loss(pn, pv, gt.normals, gt.normal_valid)
        return f, pred

    def vg(rng):
        gt = _toy_batch(rng, n=2, h=3, w=4)
        n, hh, ww = gt.valid.shape
        pred_pts = gt.points * 0.8 + rng.normal(scale=0.05, size=gt.points.shape)
        raw_r = (gt.rotations @ np.array([geometry.axis_angle(rng.normal(size=3), 0.3) for _ in range(n)])).reshape(n, 9)
        raw_t = gt.translations + 0.1 * rng.normal(size=(n, 3))
        s = losses.optimal_scale(pred_pts, gt.points, gt.valid)
        resid = np.abs(s * pred_pts - gt.points)
        median_coord = resid < 1e-9
        pred_pts = np.where(median_coord, pred_pts, _off_kinks(pred_pts, gt.points, s))
        x = np.concatenate([pred_pts.ravel(), raw_r.ravel(), raw_t.ravel()])
        npt = pred_pts.size
        # the coordinate that pins the weighted median sits on the |.| kink by construction
        mask = np.concatenate([~median_coord.ravel(), np.ones(x.size - npt, dtype=bool)])

        def f(t):
            out = losses.GeometryOutput(
                rotations=tc.svd_orthogonalize(t[npt:npt + 9 * n].reshape(n, 9)),
                translations=t[npt + 9 * n:].reshape(n, 3),
                points=t[:npt].reshape(n, hh, ww, 3),
            )
            return losses.vg_loss(out, gt, w).total
        return f, x, mask

    return [Check("point_loss", points), Check("rotation_loss", rotation),
            Check("translation_loss", translation), Check("camera_loss", camera),
            Check("normal_loss", normal), Check("vg_loss", vg)]


OP_CHECKS = _op_checks()
LOSS_CHECKS = _loss_checks()
ALL_CHECKS = {c.name: c for c in OP_CHECKS + LOSS_CHECKS}


def run_check(check: Check, trials: int, seed: int = 0, h: float = 1e-5) -> float:
    worst = 0.0
    for k in range(trials):
        rng = np.random.default_rng([seed, k, sum(map(ord, check.name))])
        built = check.build(rng)
        worst = max(worst, finite_diff_check(*built[:2], h=h, mask=built[2] if len(built) > 2 else None))
    return worst
