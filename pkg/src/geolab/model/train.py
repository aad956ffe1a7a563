"""Optimizer, learning-rate schedule and the per-step gradient routing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as tc
from ..losses import LossReport, LossWeights, clip_loss, vg_loss
from ..synthscene import FRAMES_MAX, FRAMES_MIN
from .config import AttentionMode, TrainStrategy
from .network import ModelState, cross_entropy, forward

MODE_STREAM = 0x6D6F6465  # separates the mixed-mode coin flips from other seeded streams


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class CosineSchedule:
    base_lr: float = 1e-3
    total_steps: int = 2000
    warmup_steps: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0 or self.total_steps < 1 or self.warmup_steps < 0 or self.min_lr < 0:
            raise ValueError("schedule needs base_lr > 0, total_steps >= 1, warmup_steps >= 0, min_lr >= 0")

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        frac = min(max(step - self.warmup_steps, 0) / span, 1.0)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1 + math.cos(math.pi * frac))


@dataclass
class AdamW:
    """Adam with decoupled weight decay; moments are kept per parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            t = self.t.get(name, 0) + 1
            self.m[name], self.v[name], self.t[name] = m, v, t
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data = p.data * (1 - lr * self.weight_decay) - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class StepResult:
    report: LossReport
    ce: float
    lr: float
    grad_norm: float
    mode: str
    applied: bool  # False when loss clipping skipped the update

    def row(self) -> dict:
        out = self.report.scalars()
        out.update(ce=self.ce, lr=self.lr, grad_norm=self.grad_norm, mode=self.mode, applied=int(self.applied))
        return out


def trainable_names(state: ModelState, strategy: TrainStrategy) -> list[str]:
    if strategy is TrainStrategy.CE_ONLY:
        return state.names("sem")
    if strategy is TrainStrategy.VG_ONLY:
        return state.names("geo")
    return state.names()


def _grads(state: ModelState, names) -> dict:
    return {n: state.params[n].grad for n in names if state.params[n].grad is not None}


def train_step(state: ModelState, opt: AdamW, batch, strategy: TrainStrategy, weights: LossWeights = LossWeights(),
               lr: float = 1e-3, mode: AttentionMode = AttentionMode("global"), step: int = 0, seed: int = 0,
               max_grad_norm: float = 1.0) -> StepResult:
    """One optimization step on one scene; parameters in ``state`` are updated in place.

    Routing: CEOnly trains only the semantic expert on CE; CEplusCE trains
    both experts on CE; VGplusCE gives the geometric side VG + CE gradients
    and the semantic side CE only; VGOnly trains the geometric side on the
    (clipped) VG objective.
    """
    n = batch.images.shape[0]
    if not FRAMES_MIN <= n <= FRAMES_MAX:
        raise ValueError(f"train_step: batch has {n} frames, expected {FRAMES_MIN}-{FRAMES_MAX}")
    kind = mode.resolve(np.random.default_rng([seed, step, MODE_STREAM]))
    state.zero_grad()
    out = forward(state, batch.images, kind, train=True)
    ce = cross_entropy(out.logits, batch.caption)
    report = vg_loss(out.geometry, batch, weights, seed=step)
    names = trainable_names(state, strategy)

    if strategy is TrainStrategy.VG_ONLY:
        report = clip_loss(report, weights.clip_threshold)
        if report.clipped:
            return StepResult(report, ce.item(), lr, 0.0, kind, applied=False)
        tc.backward(report.objective)
    elif strategy is TrainStrategy.VG_PLUS_CE:
        tc.backward(report.objective, retain_graph=True)
        vg_geo = {k: g.copy() for k, g in _grads(state, state.names("geo")).items()}
        state.zero_grad()
        tc.backward(ce)
        for k, g in vg_geo.items():
            p = state.params[k]
            p.grad = g if p.grad is None else p.grad + g
    else:
        tc.backward(ce)

    grads = _grads(state, names)
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        shown = ", ".join(bad[:5]) + (" ..." if len(bad) > 5 else "")
        raise NonFiniteGradient(f"step {step}: non-finite gradient in {len(bad)} parameter(s): {shown}")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_grad_norm:
        grads = {k: g * (max_grad_norm / norm) for k, g in grads.items()}
    opt.update(state.params, grads, lr)
    state.zero_grad()
    return StepResult(report, ce.item(), lr, norm, kind, applied=True)


def fit(state: ModelState, samples, strategy: TrainStrategy, steps: int, schedule: CosineSchedule | None = None,
        weights: LossWeights = LossWeights(), mode: AttentionMode = AttentionMode("global"), seed: int = 0,
        opt: AdamW | None = None, start_step: int = 0, callback=None) -> list[dict]:
    """Cycle through ``samples`` for ``steps`` steps; returns one log row per step."""
    schedule = schedule or CosineSchedule(total_steps=steps)
    opt = opt or AdamW()
    rows = []
    for k in range(start_step, start_step + steps):
        batch = samples[k % len(samples)]
        res = train_step(state, opt, batch, strategy, weights, schedule(k), mode, step=k, seed=seed)
        row = {"step": k, "scene": batch.name, **res.row()}
        rows.append(row)
        if callback is not None:
            callback(k, row)
    return rows
