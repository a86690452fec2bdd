"""Command-line entry point: generate, train, infer, evaluate, ablate.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from tfd.ablate import Benchmark, ablate
from tfd.cache import CacheConfigError, FeatureCache
from tfd.evaluation import evaluate_files
from tfd.infer import InferenceStats, infer_sequence, load_detector
from tfd.serialize import CheckpointError
from tfd.synth import SceneConfig, generate_many, load_sequence, load_sequences, save_sequence
from tfd.train import ConfigError, DivergenceError, TrainConfig, train

logger = logging.getLogger("tfd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

SPLITS = ("train", "val", "test")


def load_train_config(path: str | None, **overrides) -> TrainConfig:
    """Read a JSON TrainConfig, then apply ``TFD_SEED`` and explicit overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    env_seed = os.environ.get("TFD_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"TFD_SEED must be an integer, got {env_seed!r}") from exc
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def _load_split(data_dir: Path, split: str, required: bool = True) -> list:
    d = data_dir / split
    if not d.is_dir():
        if required:
            raise ConfigError(f"missing data split directory {d}")
        return []
    seqs = load_sequences(d)
    if required and not seqs:
        raise ConfigError(f"no sequences in {d}")
    return seqs


def cmd_generate(args) -> int:
    scene = SceneConfig(
        image_size=(args.size, args.size),
        length=args.length,
        num_classes=args.num_classes,
        occlusion_rate=args.occlusion_rate,
        blur_kernel_len=args.blur,
        noise_sigma=args.noise,
        num_objects=(args.min_objects, args.max_objects),
    )
    out = Path(args.out_dir)
    seed = args.seed
    for split, count in zip(SPLITS, (args.train, args.val, args.test)):
        for seq in generate_many(scene, count, seed, split):
            save_sequence(seq, out / split / seq.name)
        seed += count
    logger.info("wrote %d/%d/%d sequences to %s", args.train, args.val, args.test, out)
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_train_config(args.config, max_steps=args.max_steps)
    data = Path(args.data_dir)
    result = train(config, _load_split(data, "train"), _load_split(data, "val", required=False), args.checkpoint_dir)
    logger.info("trained %d steps; best step %d, val %s", result.steps_run, result.best_step, result.best_val)
    return EXIT_OK


def cmd_infer(args) -> int:
    detector = load_detector(args.checkpoint, np.float32 if args.float32 else np.float64)
    if args.n is not None and args.n != detector.config.n:
        raise ConfigError(f"--n {args.n} does not match the checkpoint's n = {detector.config.n}")
    cache = None
    if not args.no_cache:
        cache = FeatureCache.for_radius(detector.config.n, args.cache_capacity)
    stats = InferenceStats()
    seq_dir = Path(args.sequence_dir)
    seqs = load_sequences(seq_dir) if not any(seq_dir.glob("frame_*.bin")) else [load_sequence(seq_dir)]
    if not seqs:
        raise ConfigError(f"no sequences found under {seq_dir}")
    if len(seqs) > 1:
        raise ConfigError(f"{seq_dir} holds {len(seqs)} sequences; point infer at a single sequence directory")
    infer_sequence(seqs[0], detector, cache, use_cache=not args.no_cache, out_csv=args.out_csv, stats=stats,
                   score_thresh=args.score_thresh)
    logger.info("%d frames, %d backbone calls, %.3f s/frame, cache %s",
                stats.frames, stats.backbone_calls, stats.seconds_per_frame, stats.cache)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    result = evaluate_files(args.dets_csv, args.gt_csv, args.out_dir, args.iou)
    for cls, ap in sorted(result.per_class.items()):
        print(f"class {cls}: AP {'n/a' if ap is None else f'{ap:.4f}'}")
    print(f"mAP {result.mAP:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data = Path(args.data_dir)
    bench = Benchmark(*(_load_split(data, s) for s in SPLITS))
    base = load_train_config(args.config, max_steps=args.max_steps)
    table, _ = ablate(bench, base, seeds=args.seeds, out_table=args.out_table, runs_csv=args.runs_csv)
    for row in table:
        print(f"{row['variant']:>14}  frames={row['num_frames']}  mAP={row['mAP']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfd", description="Multi-frame detector with temporal feature fusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render synthetic train/val/test sequences")
    g.add_argument("out_dir")
    g.add_argument("--train", type=int, default=30)
    g.add_argument("--val", type=int, default=6)
    g.add_argument("--test", type=int, default=6)
    g.add_argument("--length", type=int, default=40)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--num-classes", type=int, default=3)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=4)
    g.add_argument("--occlusion-rate", type=float, default=0.3)
    g.add_argument("--blur", type=int, default=3, help="motion blur kernel length in px")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=1000)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("config", help="JSON file with TrainConfig fields")
    t.add_argument("data_dir", help="directory with train/ and optional val/ sequences")
    t.add_argument("checkpoint_dir")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a checkpoint over one sequence")
    i.add_argument("checkpoint")
    i.add_argument("sequence_dir")
    i.add_argument("out_csv")
    i.add_argument("--n", type=int, help="temporal radius; must match the checkpoint")
    i.add_argument("--no-cache", action="store_true", help="recompute every frame of every window")
    i.add_argument("--cache-capacity", type=int)
    i.add_argument("--score-thresh", type=float, default=0.05)
    i.add_argument("--float32", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="per-class AP, mAP and PR curves")
    e.add_argument("dets_csv")
    e.add_argument("gt_csv")
    e.add_argument("out_dir")
    e.add_argument("--iou", type=float, default=0.7)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and test the temporal-radius and no-fusion variants")
    a.add_argument("data_dir", help="directory with train/, val/ and test/ sequences")
    a.add_argument("out_table")
    a.add_argument("--config", help="JSON base TrainConfig shared by all variants")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--max-steps", type=int)
    a.add_argument("--runs-csv")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        logger.error("%s", exc)
        return EXIT_DIVERGED
    except (ConfigError, CacheConfigError, CheckpointError, FileNotFoundError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        # SceneConfig and model validation raise plain ValueError
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
