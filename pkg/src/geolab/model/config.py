"""Configuration types for the two-expert transformer."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 64
    heads: int = 4
    layers: int = 4
    head_layers: int = 5
    vocab: int = 64
    caption_len: int = 8
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} must be a positive multiple of patch_size {self.patch_size}")
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.layers < 0 or self.head_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if self.vocab < 2 or self.caption_len < 1 or self.mlp_ratio < 1:
            raise ValueError("vocab >= 2, caption_len >= 1 and mlp_ratio >= 1 required")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AttentionMode:
    """``frame``, ``global`` or ``mixed`` (Global with probability ``p`` per step)."""

    kind: str = "global"
    p: float = 0.5

    def __post_init__(self):
        if self.kind not in ("frame", "global", "mixed"):
            raise ValueError(f"attention mode must be frame, global or mixed, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"mixed-mode probability must be in [0, 1], got {self.p}")

    @classmethod
    def parse(cls, text: str) -> "AttentionMode":
        """``frame`` | ``global`` | ``mixed`` | ``mixed:0.3``."""
        kind, _, p = text.strip().lower().partition(":")
        return cls(kind, float(p)) if p else cls(kind)

    def resolve(self, rng: np.random.Generator | None = None) -> str:
        """Concrete mask for one step. Without an rng (inference) mixed means global."""
        if self.kind != "mixed":
            return self.kind
        if rng is None:
            return "global"
        return "global" if rng.uniform() < self.p else "frame"

    def __str__(self):
        return f"mixed:{self.p:g}" if self.kind == "mixed" else self.kind


class TrainStrategy(str, enum.Enum):
    CE_ONLY = "CEOnly"  # geometric expert frozen, semantic expert trained on CE
    CE_PLUS_CE = "CEplusCE"  # both experts trained on CE only
    VG_PLUS_CE = "VGplusCE"  # geometric: VG + CE, semantic: CE
    VG_ONLY = "VGOnly"  # geometry pretraining: semantic frozen, loss clipping on

    @classmethod
    def parse(cls, text: str) -> "TrainStrategy":
        for s in cls:
            if s.value.lower() == text.strip().lower():
                return s
        raise ValueError(f"unknown strategy {text!r}; choose from {[s.value for s in cls]}")

    def __str__(self):
        return self.value
