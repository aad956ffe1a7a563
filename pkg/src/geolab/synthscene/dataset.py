"""Rendered scene samples and their on-disk format.

Layout of a dataset directory::

    manifest.json      format version, global seed, per-scene spec/offsets/sha256
    scene_0000.bin     concatenated tensor blobs, one per array in ARRAYS order
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .. import blob
from ..geometry import PointMap, pointmap_normals
from .render import render
from .scene import Intrinsics, SceneSpec, caption_tokens, generate_scene

FORMAT_VERSION = 1
ARRAYS = ("images", "depth", "points", "valid", "normals", "normal_valid",
          "rotations", "translations", "intrinsics", "caption")
NORMAL_AGREEMENT_DEG = 15.0


class DatasetError(ValueError):
    pass


@dataclass
class SceneSample:
    name: str
    spec: SceneSpec
    images: np.ndarray
    depth: np.ndarray
    points: np.ndarray
    valid: np.ndarray
    normals: np.ndarray
    normal_valid: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    intrinsics: Intrinsics
    caption: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    def subset(self, frames) -> "SceneSample":
        f = np.asarray(frames, dtype=np.int64)
        return replace(self, images=self.images[f], depth=self.depth[f], points=self.points[f],
                       valid=self.valid[f], normals=self.normals[f], normal_valid=self.normal_valid[f],
                       rotations=self.rotations[f], translations=self.translations[f])


def make_sample(spec: SceneSpec, name: str | None = None, caption_len: int = 8, vocab: int = 64) -> SceneSample:
    scene = generate_scene(spec)
    frames = [render(scene, p, scene.intrinsics) for p in scene.poses]
    points = np.stack([f.points for f in frames])
    valid = np.stack([f.valid for f in frames])
    normals = np.stack([f.normals for f in frames])
    # drop normal supervision where the analytic normal disagrees with the
    # point-map construction (depth discontinuities)
    pm_n = pointmap_normals(PointMap(points, valid))
    agree = (pm_n.normals * normals).sum(-1) > np.cos(np.deg2rad(NORMAL_AGREEMENT_DEG))
    return SceneSample(
        name=name or f"seed{spec.seed}",
        spec=spec,
        images=np.stack([f.image for f in frames]),
        depth=np.stack([f.depth for f in frames]),
        points=points,
        valid=valid,
        normals=normals,
        normal_valid=valid & pm_n.valid & agree,
        rotations=np.stack([p.rotation for p in scene.poses]),
        translations=np.stack([p.translation for p in scene.poses]),
        intrinsics=scene.intrinsics,
        caption=caption_tokens(scene, caption_len, vocab),
    )


def _arrays(s: SceneSample) -> dict:
    return {
        "images": s.images, "depth": s.depth, "points": s.points, "valid": s.valid,
        "normals": s.normals, "normal_valid": s.normal_valid, "rotations": s.rotations,
        "translations": s.translations, "intrinsics": s.intrinsics.as_array(), "caption": s.caption,
    }


def _spec_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["room"] = list(d["room"])
    return d


def save_dataset(samples, path, global_seed: int = 0) -> dict:
    """Write samples plus manifest; returns the manifest dict."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        fname = f"scene_{i:04d}.bin"
        offsets, chunks, pos = {}, [], 0
        for key in ARRAYS:
            b = blob.to_bytes(_arrays(s)[key])
            offsets[key] = [pos, len(b)]
            chunks.append(b)
            pos += len(b)
        data = b"".join(chunks)
        (root / fname).write_bytes(data)
        entries.append({"name": s.name, "file": fname, "spec": _spec_dict(s.spec), "arrays": offsets,
                        "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {"format_version": FORMAT_VERSION, "global_seed": int(global_seed), "scenes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{root}: format version {version!r}, expected {FORMAT_VERSION}")
    return manifest


def load_scene(path, index: int, manifest: dict | None = None) -> SceneSample:
    """Load one scene by index, verifying its checksum."""
    root = Path(path)
    manifest = manifest or read_manifest(root)
    entry = manifest["scenes"][index]
    data = (root / entry["file"]).read_bytes()
    if hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise DatasetError(f"scene {entry['name']!r} ({entry['file']}): checksum mismatch")
    arrs = {}
    for key in ARRAYS:
        off, length = entry["arrays"][key]
        arr, end = blob.from_bytes(data, off)
        if end != off + length:
            raise DatasetError(f"scene {entry['name']!r}: array {key} length mismatch")
        arrs[key] = arr
    spec = dict(entry["spec"])
    spec["room"] = tuple(spec["room"])
    return SceneSample(
        name=entry["name"], spec=SceneSpec(**spec),
        images=arrs["images"], depth=arrs["depth"], points=arrs["points"],
        valid=arrs["valid"].astype(bool), normals=arrs["normals"],
        normal_valid=arrs["normal_valid"].astype(bool), rotations=arrs["rotations"],
        translations=arrs["translations"], intrinsics=Intrinsics.from_array(arrs["intrinsics"]),
        caption=arrs["caption"].astype(np.int64),
    )


def load_dataset(path) -> list[SceneSample]:
    manifest = read_manifest(path)
    return [load_scene(path, i, manifest) for i in range(len(manifest["scenes"]))]
