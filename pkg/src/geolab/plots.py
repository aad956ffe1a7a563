"""SVG line plots for loss curves and pose-accuracy curves."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "geolab"  # stable element ids across runs
SVG_META = {"Date": None, "Creator": "geolab"}
LOSS_KEYS = ("total", "points", "cam", "normal", "ce")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
    return path


def plot_losses(rows: list[dict], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [int(r["step"]) for r in rows]
    for key in LOSS_KEYS:
        ys = [float(r[key]) for r in rows]
        if any(y > 0 for y in ys):
            ax.plot(steps, ys, label=key, linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_curves(rows: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    taus = [float(r["threshold"]) for r in rows]
    for key, label in (("rra", "RRA"), ("rta", "RTA"), ("min_rra_rta", "min(RRA, RTA)")):
        ax.plot(taus, [100 * float(r[key]) for r in rows], label=label, linewidth=1)
    ax.set_xlabel("threshold (deg)")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 101)
    ax.legend()
    return _save(fig, path)
