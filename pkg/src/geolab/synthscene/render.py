"""Exact per-pixel ray casting against the room, boxes and spheres."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose
from .scene import Intrinsics, Scene

LIGHT = np.array([0.35, 0.8, 0.48]) / np.linalg.norm([0.35, 0.8, 0.48])
AMBIENT = 0.25
MISS = -1


@dataclass
class RenderResult:
    depth: np.ndarray  # (H, W), 0 where invalid
    points: np.ndarray  # (H, W, 3) camera frame
    normals: np.ndarray  # (H, W, 3) camera frame, n_z <= 0
    image: np.ndarray  # (H, W, 3) in [0, 1]
    valid: np.ndarray  # (H, W) bool
    object_id: np.ndarray  # (H, W) int: 0-5 room faces, 6+ objects, -1 miss


def pixel_rays(k: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z through pixel centers, (H, W, 3)."""
    u, v = np.meshgrid(np.arange(k.width) + 0.5, np.arange(k.height) + 0.5)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def unproject(depth, k: Intrinsics) -> np.ndarray:
    return pixel_rays(k) * np.asarray(depth)[..., None]


def _room_exit(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(d > 0, half, -half)
        t = (bound - o) / d
    t = np.where(d == 0, np.inf, t)
    axis = np.argmin(t, axis=-1)
    lam = np.take_along_axis(t, axis[..., None], -1)[..., 0]
    sgn = np.take_along_axis(np.sign(d), axis[..., None], -1)[..., 0]
    normal = np.zeros(d.shape)
    np.put_along_axis(normal, axis[..., None], -sgn[..., None], -1)
    face = 2 * axis + (sgn > 0)
    return lam, normal, face


def _box_hit(o, d, center, half):
    lo, hi = center - half - o, center + half - o
    with np.errstate(divide="ignore", invalid="ignore"):
        t1, t2 = lo / d, hi / d
    tn, tf = np.minimum(t1, t2), np.maximum(t1, t2)
    tn = np.where(np.isnan(tn), -np.inf, tn)
    tf = np.where(np.isnan(tf), np.inf, tf)
    axis = np.argmax(tn, axis=-1)
    tmin = np.take_along_axis(tn, axis[..., None], -1)[..., 0]
    tmax = tf.min(axis=-1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    sgn = np.take_along_axis(np.sign(d), axis[..., None], -1)[..., 0]
    normal = np.zeros(d.shape)
    np.put_along_axis(normal, axis[..., None], -sgn[..., None], -1)
    return np.where(hit, tmin, np.inf), normal


def _sphere_hit(o, d, center, radius):
    oc = o - center
    a = (d * d).sum(-1)
    b = (d * oc).sum(-1)
    c = oc @ oc - radius * radius
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        lam = (-b - np.sqrt(disc)) / a
    hit = (disc >= 0) & (lam > 1e-9)
    lam = np.where(hit, lam, np.inf)
    p = o + np.where(hit, lam, 0.0)[..., None] * d
    return lam, (p - center) / radius


def render(scene: Scene, pose: Pose, k: Intrinsics) -> RenderResult:
    rays = pixel_rays(k)
    d = rays @ pose.rotation.T
    o = pose.translation
    lam, n_world, obj = _room_exit(o, d, scene.room_half)
    for idx, prim in enumerate(scene.objects):
        if prim.kind == "box":
            t, n = _box_hit(o, d, prim.center, prim.size)
        else:
            t, n = _sphere_hit(o, d, prim.center, prim.size[0])
        closer = t < lam
        lam = np.where(closer, t, lam)
        n_world = np.where(closer[..., None], n, n_world)
        obj = np.where(closer, 6 + idx, obj)

    valid = np.isfinite(lam) & (lam > 0)
    lam = np.where(valid, lam, 0.0)
    obj = np.where(valid, obj, MISS)
    points = rays * lam[..., None]

    facing = np.where(((n_world * d).sum(-1) > 0)[..., None], -n_world, n_world)
    n_cam = facing @ pose.rotation
    n_cam = np.where((n_cam[..., 2] > 0)[..., None], -n_cam, n_cam)
    n_cam = np.where(valid[..., None], n_cam, 0.0)

    albedo = np.zeros(d.shape)
    room = (obj >= 0) & (obj < 6)
    albedo[room] = scene.face_albedo[obj[room]]
    for idx, prim in enumerate(scene.objects):
        albedo[obj == 6 + idx] = prim.albedo
    shade = AMBIENT + (1 - AMBIENT) * np.clip(facing @ LIGHT, 0.0, None)
    image = np.where(valid[..., None], albedo * shade[..., None], 0.0)
    return RenderResult(lam, points, n_cam, image, valid, obj)
