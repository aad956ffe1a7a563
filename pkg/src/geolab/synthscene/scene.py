"""Procedural rooms with boxes and spheres, and camera trajectories through them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose

TRAJECTORIES = ("orbit", "line", "random-walk")
FRAMES_MIN, FRAMES_MAX = 2, 24
MAX_RETRIES = 20
MIN_HIT_RATIO = 0.3
WORLD_UP = np.array([0.0, 1.0, 0.0])


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    room: tuple = (4.0, 3.0, 4.0)
    n_objects: int = 4
    sphere_fraction: float = 0.5
    trajectory: str = "orbit"
    n_frames: int = 4
    image_size: int = 32
    fov_deg: float = 60.0
    orbit_radius: float = 1.2
    arc_deg: float = 40.0

    def __post_init__(self):
        object.__setattr__(self, "room", tuple(float(x) for x in self.room))
        if len(self.room) != 3 or min(self.room) <= 0:
            raise ValueError(f"room extents must be 3 positive numbers, got {self.room}")
        if not FRAMES_MIN <= self.n_frames <= FRAMES_MAX:
            raise ValueError(f"n_frames must be in [{FRAMES_MIN}, {FRAMES_MAX}], got {self.n_frames}")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}, got {self.trajectory!r}")
        if self.n_objects < 0 or not 0 <= self.sphere_fraction <= 1:
            raise ValueError("n_objects must be >= 0 and sphere_fraction in [0, 1]")
        if self.image_size < 2 or not 0 < self.fov_deg < 180:
            raise ValueError("image_size must be >= 2 and fov_deg in (0, 180)")
        if not 0 < self.orbit_radius < min(self.room[0], self.room[2]) / 2:
            raise ValueError(f"orbit_radius {self.orbit_radius} does not fit in room {self.room}")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, int(width), int(height))

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Intrinsics":
        fx, fy, cx, cy, w, h = (float(v) for v in a)
        return cls(fx, fy, cx, cy, int(w), int(h))


@dataclass(frozen=True)
class Primitive:
    kind: str  # "box" | "sphere"
    center: np.ndarray
    size: np.ndarray  # half extents for boxes, (radius,) for spheres
    albedo: np.ndarray


@dataclass
class Scene:
    spec: SceneSpec
    room_half: np.ndarray
    face_albedo: np.ndarray  # (6, 3) for -x, +x, -y, +y, -z, +z walls
    objects: list[Primitive]
    poses: list[Pose]
    intrinsics: Intrinsics
    attempt: int = 0
    meta: dict = field(default_factory=dict)


def look_at(eye, target, up=WORLD_UP) -> Pose:
    """Camera-to-world pose with OpenCV axes (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def _trajectory(spec: SceneSpec, rng: np.random.Generator, room_half) -> list[Pose]:
    n = spec.n_frames
    height = rng.uniform(-0.3, 0.2) * room_half[1]
    center = np.array([0.0, height, 0.0])
    if spec.trajectory == "orbit":
        start = rng.uniform(0, 2 * np.pi)
        arc = np.deg2rad(spec.arc_deg)
        angles = start + arc * (np.arange(n) / max(n - 1, 1) - 0.5)
        eyes = [center + spec.orbit_radius * np.array([np.sin(a), 0.0, np.cos(a)]) for a in angles]
        target = center + np.array([0.0, rng.uniform(-0.2, 0.1), 0.0])
        return [look_at(e, target) for e in eyes]
    if spec.trajectory == "line":
        a = rng.uniform(0, 2 * np.pi)
        base = center + spec.orbit_radius * np.array([np.sin(a), 0.0, np.cos(a)])
        side = np.array([np.cos(a), 0.0, -np.sin(a)])
        length = spec.orbit_radius * np.deg2rad(spec.arc_deg)
        eyes = [base + side * length * (k / max(n - 1, 1) - 0.5) for k in range(n)]
        fwd = center - base
        return [look_at(e, e + fwd) for e in eyes]
    # random walk around the orbit circle, looking roughly at the center
    a = rng.uniform(0, 2 * np.pi)
    eye = center + spec.orbit_radius * np.array([np.sin(a), 0.0, np.cos(a)])
    step = spec.orbit_radius * np.deg2rad(spec.arc_deg) / max(n - 1, 1)
    poses = []
    for _ in range(n):
        poses.append(look_at(eye, center + rng.normal(scale=0.15, size=3)))
        eye = eye + rng.normal(scale=step / np.sqrt(3), size=3)
        eye = np.clip(eye, -room_half + 0.3, room_half - 0.3)
    return poses


def _objects(spec: SceneSpec, rng: np.random.Generator, room_half) -> list[Primitive]:
    objs = []
    inner = max(spec.orbit_radius - 0.45, 0.3)
    for _ in range(spec.n_objects):
        r = inner * np.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * np.pi)
        albedo = rng.uniform(0.2, 1.0, size=3)
        if rng.uniform() < spec.sphere_fraction:
            rad = rng.uniform(0.12, 0.3)
            y = rng.uniform(-room_half[1] + rad, room_half[1] * 0.3)
            objs.append(Primitive("sphere", np.array([r * np.sin(a), y, r * np.cos(a)]), np.array([rad]), albedo))
        else:
            half = rng.uniform(0.1, 0.3, size=3)
            y = -room_half[1] + half[1] if rng.uniform() < 0.6 else rng.uniform(-room_half[1] + half[1], 0.3)
            objs.append(Primitive("box", np.array([r * np.sin(a), y, r * np.cos(a)]), half, albedo))
    return objs


def _inside_any(p, objects, margin=0.1) -> bool:
    for o in objects:
        if o.kind == "sphere" and np.linalg.norm(p - o.center) < o.size[0] + margin:
            return True
        if o.kind == "box" and np.all(np.abs(p - o.center) < o.size + margin):
            return True
    return False


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic in ``spec.seed``; resamples until every frame sees enough geometry."""
    from .render import render  # local import: render depends on Scene

    room_half = np.asarray(spec.room) / 2
    k = Intrinsics.from_fov(spec.image_size, spec.image_size, spec.fov_deg)
    for attempt in range(MAX_RETRIES):
        rng = np.random.default_rng([spec.seed, attempt])
        face_albedo = rng.uniform(0.3, 1.0, size=(6, 3))
        objects = _objects(spec, rng, room_half)
        poses = _trajectory(spec, rng, room_half)
        if any(_inside_any(p.translation, objects) for p in poses):
            continue
        if any(np.any(np.abs(p.translation) > room_half - 0.05) for p in poses):
            continue
        scene = Scene(spec, room_half, face_albedo, objects, poses, k, attempt)
        if all(render(scene, p, k).valid.mean() >= MIN_HIT_RATIO for p in poses):
            return scene
    raise SceneGenerationError(f"scene seed {spec.seed}: no valid camera layout after {MAX_RETRIES} attempts")


def caption_tokens(scene: Scene, length: int = 8, vocab: int = 64) -> np.ndarray:
    """Pseudo-caption derived from scene parameters (toy cross-entropy target)."""
    spec = scene.spec
    boxes = [o for o in scene.objects if o.kind == "box"]
    spheres = [o for o in scene.objects if o.kind == "sphere"]
    toks = [1 + len(boxes), 12 + len(spheres), 23 + TRAJECTORIES.index(spec.trajectory)]
    by_size = sorted(scene.objects, key=lambda o: -float(np.prod(o.size)))
    for o in by_size:
        ang = np.arctan2(o.center[0], o.center[2]) % (2 * np.pi)
        toks.append(26 + int(np.argmax(o.albedo)) * 8 + int(ang / (2 * np.pi) * 8) % 8)
    toks.append(50 + int(np.argmax(scene.face_albedo.mean(axis=1))))
    toks = (toks + [0] * length)[:length]
    return np.asarray(toks, dtype=np.int64) % vocab
