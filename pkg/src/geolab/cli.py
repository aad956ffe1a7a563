"""Command-line entry point: datagen | train | eval | gradcheck | report.

Exit codes: 0 success, 1 validation error, 2 runtime failure (including
failed gradient checks).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .losses import LossWeights
from .metrics import aggregate, evaluate_ground_truth, evaluate_scene, pose_errors
from .geometry import Pose
from .model import AttentionMode, ModelConfig, ModelState, TrainStrategy, predict
from .model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model.train import AdamW, CosineSchedule, NonFiniteGradient, fit
from .synthscene import (FRAMES_MAX, FRAMES_MIN, DatasetError, SceneGenerationError, SceneSpec, load_dataset,
                         make_sample, save_dataset)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOSS_COLUMNS = ("step", "scene", "total", "points", "cam", "rot", "trans", "normal", "global_points", "s_star",
                "clipped", "ce", "lr", "grad_norm", "mode", "applied")
CURVE_MAX = 30


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _frames(text: str) -> int:
    n = int(text)
    if not FRAMES_MIN <= n <= FRAMES_MAX:
        raise argparse.ArgumentTypeError(f"frames must be in {FRAMES_MIN}-{FRAMES_MAX}, got {n}")
    return n


def _seed(text: str) -> int:
    n = int(text)
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {n}")
    return n


def _threads() -> int:
    raw = os.environ.get("GEOLAB_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GEOLAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"GEOLAB_THREADS must be a positive integer, got {raw!r}")
    return n


def _echo_config(args, out: Path) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return cfg


def scene_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------- datagen


def cmd_datagen(args) -> int:
    out = Path(args.out)
    _echo_config(args, out)
    samples = []
    for i in range(args.scenes):
        spec = SceneSpec(seed=scene_seed(args.seed, i), n_frames=args.frames, trajectory=args.trajectory,
                         n_objects=args.objects, image_size=args.image_size, fov_deg=args.fov)
        samples.append(make_sample(spec, name=f"scene_{i:04d}", caption_len=args.caption_len, vocab=args.vocab))
    manifest = save_dataset(samples, out, global_seed=args.seed)
    digest = hashlib.sha256("".join(s["sha256"] for s in manifest["scenes"]).encode()).hexdigest()
    print(f"wrote {len(samples)} scenes to {out}")
    for s in manifest["scenes"]:
        print(f"  {s['name']}  {s['sha256'][:16]}")
    print(f"dataset checksum {digest}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _model_config(args, image_size: int) -> ModelConfig:
    size = args.image_size if args.image_size is not None else image_size
    if size != image_size:
        raise UsageError(f"--image-size {size} does not match dataset images of size {image_size}")
    return ModelConfig(image_size=size, patch_size=args.patch_size, dim=args.dim, heads=args.heads,
                       layers=args.layers, vocab=args.vocab, caption_len=args.caption_len, seed=args.seed)


def _weights(args) -> LossWeights:
    return LossWeights(lambda_cam=args.lambda_cam, lambda_normal=args.lambda_normal, lambda_trans=args.lambda_trans,
                       huber_delta=args.huber_delta, clip_threshold=args.clip_threshold,
                       align_subsample=args.align_subsample, lambda_global=args.lambda_global)


def cmd_train(args) -> int:
    out = Path(args.out)
    samples = load_dataset(args.data)
    if args.scenes is not None:
        samples = samples[: args.scenes]
    if not samples:
        raise UsageError(f"{args.data}: dataset has no scenes")
    strategy = TrainStrategy.parse(args.strategy)
    mode = AttentionMode.parse(args.mode)
    weights = _weights(args)
    start = 0
    if args.init:
        state, meta = load_checkpoint(args.init)
        start = meta["step"]
        if state.config.image_size != samples[0].images.shape[1]:
            raise UsageError("checkpoint image size does not match the dataset")
    else:
        cfg = _model_config(args, samples[0].images.shape[1])
        if samples[0].caption.shape[0] != cfg.caption_len:
            raise UsageError(f"dataset captions have length {samples[0].caption.shape[0]}, model expects {cfg.caption_len}")
        state = ModelState.init(cfg)
    _echo_config(args, out)
    schedule = CosineSchedule(args.lr, args.horizon or args.steps, args.warmup, args.min_lr)
    opt = AdamW(weight_decay=args.weight_decay)

    log = (out / "losses.csv").open("w", newline="")
    writer = csv.DictWriter(log, fieldnames=LOSS_COLUMNS)
    writer.writeheader()

    def on_step(k, row):
        writer.writerow({c: row[c] for c in LOSS_COLUMNS})
        done = k + 1 - start
        if args.checkpoint_every and done % args.checkpoint_every == 0 and done < args.steps:
            save_checkpoint(state, out / f"ckpt_{k + 1:06d}", k + 1, strategy.value, args.seed)
        if args.log_every and (done % args.log_every == 0 or done == 1):
            print(f"step {k + 1:6d}  total {row['total']:.5f}  ce {row['ce']:.4f}  lr {row['lr']:.2e}", flush=True)

    t0 = time.time()
    try:
        fit(state, samples, strategy, args.steps, schedule, weights, mode, seed=args.seed, opt=opt,
            start_step=start, callback=on_step)
    finally:
        log.close()
    save_checkpoint(state, out / "final", start + args.steps, strategy.value, args.seed)
    print(f"trained {args.steps} steps ({strategy.value}, {mode}) in {time.time() - t0:.1f}s; "
          f"checkpoint {out / 'final'}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _curves(errs) -> list[dict]:
    rows = []
    for tau in range(1, CURVE_MAX + 1):
        rra = float(np.mean([e.rra(tau) for e in errs]))
        rta = float(np.nanmean([e.rta(tau) for e in errs]))
        comb = [np.mean(e.combined() < tau) for e in errs if e.combined().size]
        rows.append({"threshold": tau, "rra": rra, "rta": rta, "min_rra_rta": float(np.mean(comb)) if comb else math.nan})
    return rows


def cmd_eval(args) -> int:
    out = Path(args.out)
    if not args.ground_truth and not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --ground-truth")
    samples = load_dataset(args.data)
    if args.scenes is not None:
        samples = samples[: args.scenes]
    state = None if args.ground_truth else load_checkpoint(args.checkpoint)[0]
    mode = AttentionMode.parse(args.mode)
    _echo_config(args, out)

    def one(sample):
        if state is None:
            poses = [Pose(r, t) for r, t in zip(sample.rotations, sample.translations)]
            rep = evaluate_ground_truth(sample, seed=args.seed, pose_frames=args.pose_frames)
            return rep, pose_errors(poses, poses)
        poses, maps = predict(state, sample.images, mode)
        gt = [Pose(r, t) for r, t in zip(sample.rotations, sample.translations)]
        return evaluate_scene(poses, maps, sample, seed=args.seed, pose_frames=args.pose_frames), pose_errors(poses, gt)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(one, samples))
    reports = [r for r, _ in results]
    for s, r in zip(samples, reports):
        (out / f"{s.name}.json").write_text(r.to_json())
    agg = aggregate(reports)
    (out / "aggregate.json").write_text(agg.to_json())
    with (out / "metrics.csv").open("w", newline="") as f:
        w = csv.writer(f)
        header = reports[0].csv_header()
        w.writerow(["scene"] + header)
        for s, r in zip(samples, reports):
            w.writerow([s.name] + r.csv_row())
    curves = _curves([e for _, e in results])
    with (out / "curves.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(curves[0]))
        w.writeheader()
        w.writerows(curves)
    if args.plots:
        from .plots import plot_curves
        plot_curves(curves, out / "accuracy_curves.svg")
    print(f"evaluated {len(samples)} scenes -> {out}")
    for k in ("abs_rel", "delta_125", "acc", "comp", "rra@30", "rta@30", "auc@30"):
        v = agg.values.get(k, math.nan)
        shown = f"{100 * v:.2f}%" if k in ("delta_125", "rra@30", "rta@30", "auc@30") else f"{v:.4f}"
        print(f"  {k:10s} {shown}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    checks = gradcheck.ALL_CHECKS
    names = list(checks)
    if args.ops:
        names = [n.strip() for n in args.ops.split(",") if n.strip()]
        unknown = [n for n in names if n not in checks]
        if unknown:
            raise UsageError(f"unknown checks {unknown}; available: {', '.join(checks)}")
    failed = 0
    print(f"{'check':20s} {'max rel err':>12s}  result")
    t0 = time.time()
    for n in names:
        err = gradcheck.run_check(checks[n], args.trials, seed=args.seed)
        ok = err < args.tol
        failed += not ok
        print(f"{n:20s} {err:12.3e}  {'PASS' if ok else 'FAIL'}")
    print(f"{len(names) - failed}/{len(names)} passed ({args.trials} trials each, tol {args.tol:g}) "
          f"in {time.time() - t0:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


# ---------------------------------------------------------------- report


def cmd_report(args) -> int:
    from .plots import plot_curves, plot_losses, read_csv

    out = Path(args.out)
    if not args.run and not args.eval:
        raise UsageError("report needs --run and/or --eval")
    _echo_config(args, out)
    written = []
    for run in args.run or []:
        f = Path(run) / "losses.csv"
        if not f.exists():
            raise UsageError(f"{run}: no losses.csv")
        target = out / f"losses_{Path(run).name}.svg"
        plot_losses(read_csv(f), target, title=Path(run).name)
        written.append(target)
    if args.eval:
        f = Path(args.eval) / "curves.csv"
        if not f.exists():
            raise UsageError(f"{args.eval}: no curves.csv")
        target = out / "accuracy_curves.svg"
        plot_curves(read_csv(f), target)
        written.append(target)
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p, out_default=None):
    p.add_argument("--config", help="JSON file with option values; flags given on the command line win")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", default=out_default, required=out_default is None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geolab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--frames", type=_frames, default=4)
    p.add_argument("--trajectory", choices=("orbit", "line", "random-walk"), default="orbit")
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("--caption-len", type=int, default=8)
    p.add_argument("--vocab", type=int, default=64)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--scenes", type=int, default=None, help="use only the first K scenes")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--strategy", default="VGOnly", help="CEOnly | CEplusCE | VGplusCE | VGOnly")
    p.add_argument("--mode", default="global", help="frame | global | mixed[:p]")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--horizon", type=int, default=None, help="cosine horizon in steps (default: --steps)")
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--min-lr", type=float, default=0.0)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--init", default=None, help="checkpoint directory to resume from")
    p.add_argument("--image-size", type=int, default=None)
    for f in fields(ModelConfig):
        if f.name not in ("image_size", "seed", "head_layers", "mlp_ratio"):
            p.add_argument("--" + f.name.replace("_", "-"), type=int, default=f.default)
    for f in fields(LossWeights):
        typ = int if f.name == "align_subsample" else float
        p.add_argument("--" + f.name.replace("_", "-"), type=typ, default=f.default)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or ground truth) on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--ground-truth", action="store_true", help="score the ground truth itself")
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--mode", default="global")
    p.add_argument("--pose-frames", type=int, default=10)
    p.add_argument("--plots", action="store_true", help="also write accuracy-vs-threshold SVG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of ops and losses")
    _common(p, out_default="")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--ops", default=None, help="comma-separated subset of checks")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="SVG plots from training and eval outputs")
    _common(p)
    p.add_argument("--run", action="append", help="training output directory (repeatable)")
    p.add_argument("--eval", default=None, help="eval output directory")
    p.set_defaults(func=cmd_report)
    return parser


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults that explicit flags override."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = parser._subparsers._group_actions[0].choices
    if known.config and argv and argv[0] in subs:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"{known.config}: expected a JSON object")
        cfg.pop("command", None)
        sub = subs[argv[0]]
        dests = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - dests)
        if unknown:
            raise UsageError(f"{known.config}: unknown keys {unknown}")
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
        sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return args.func(args)
    except (UsageError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteGradient as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SceneGenerationError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
