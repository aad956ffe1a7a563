"""Checkpoint directories: ``manifest.txt`` (key=value) plus one blob per parameter."""

from __future__ import annotations

import json
from pathlib import Path

from .. import blob
from ..tensor import Tensor
from .config import ModelConfig
from .network import ModelState, parameter_shapes


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: ModelState, path, step: int = 0, strategy: str = "", seed: int = 0) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"config={json.dumps(state.config.to_dict(), sort_keys=True)}", f"step={int(step)}",
             f"strategy={strategy}", f"seed={int(seed)}", f"params={len(state.params)}"]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    for name, t in state.params.items():
        blob.save_tensor(root / f"{name}.bin", t.data)
    return root


def read_manifest(path) -> dict:
    f = Path(path) / "manifest.txt"
    if not f.exists():
        raise CheckpointError(f"{path}: no manifest.txt")
    out = {}
    for line in f.read_text().splitlines():
        if line.strip():
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"{f}: malformed line {line!r}")
            out[key.strip()] = value.strip()
    return out


def load_checkpoint(path) -> tuple[ModelState, dict]:
    """Returns the state and the manifest (``step`` and ``seed`` as ints)."""
    root = Path(path)
    meta = read_manifest(root)
    try:
        cfg = ModelConfig(**json.loads(meta["config"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{root}: bad config entry ({exc})") from None
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        f = root / f"{name}.bin"
        if not f.exists():
            raise CheckpointError(f"{root}: missing parameter {name}")
        arr = blob.load_tensor(f)
        if arr.shape != shape:
            raise CheckpointError(f"{root}: parameter {name} has shape {arr.shape}, expected {shape}")
        params[name] = Tensor(arr, requires_grad=True)
    meta["step"] = int(meta.get("step", 0))
    meta["seed"] = int(meta.get("seed", 0))
    return ModelState(cfg, params), meta
