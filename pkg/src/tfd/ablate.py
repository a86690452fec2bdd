"""Ablation runs over temporal radius and merge strategy on a synthetic benchmark."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from tfd.evaluation import evaluate_detections
from tfd.infer import infer_sequence
from tfd.model import Detector
from tfd.synth import SceneConfig, Sequence, generate_many
from tfd.train import TrainConfig, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    n: int
    fusion_mode: str

    @property
    def num_frames(self) -> int:
        return 2 * self.n + 1


DEFAULT_VARIANTS = (
    Variant("baseline", 0, "single_frame"),
    Variant("fused_n1", 1, "learned_fusion"),
    Variant("fused_n2", 2, "learned_fusion"),
    Variant("no_fusion_n2", 2, "concat_no_fusion"),
)


@dataclass
class Benchmark:
    train: list[Sequence]
    val: list[Sequence]
    test: list[Sequence]


def benchmark_scene(**overrides) -> SceneConfig:
    """Scene used for the ablation benchmark: 3 classes, 30% occlusion, 3 px blur."""
    base = dict(num_classes=3, occlusion_rate=0.3, blur_kernel_len=3, length=40)
    return SceneConfig(**{**base, **overrides})


def make_benchmark(scene: SceneConfig | None = None, counts=(30, 6, 6), seed: int = 1000) -> Benchmark:
    """Disjoint train/val/test sequence sets, each sequence from its own seed."""
    scene = benchmark_scene() if scene is None else scene
    n_train, n_val, n_test = counts
    return Benchmark(
        generate_many(scene, n_train, seed, "train"),
        generate_many(scene, n_val, seed + n_train, "val"),
        generate_many(scene, n_test, seed + n_train + n_val, "test"),
    )


def evaluate_model(detector: Detector, sequences: Seq[Sequence]) -> float:
    dets, gts = [], []
    offset = 0
    for seq in sequences:
        # frame indices are made globally unique so matching never crosses sequences
        for d in infer_sequence(seq, detector):
            dets.append(type(d)(d.frame_index + offset, d.class_id, d.box, d.score))
        for g in seq.all_gt():
            gts.append(type(g)(g.frame_index + offset, g.class_id, g.box))
        offset += seq.length
    return evaluate_detections(dets, gts).mAP


def run_variant(variant: Variant, bench: Benchmark, base: TrainConfig, seed: int, out_dir=None) -> dict:
    cfg = base.replace(n=variant.n, fusion_mode=variant.fusion_mode, seed=seed)
    start = time.perf_counter()
    result = train(cfg, bench.train, bench.val, out_dir)
    detector = Detector(result.model_config, result.params, cfg.np_dtype)
    m = evaluate_model(detector, bench.test)
    row = {
        "variant": variant.name,
        "num_frames": variant.num_frames,
        "seed": seed,
        "mAP": m,
        "best_step": result.best_step,
        "steps": result.steps_run,
        "seconds": time.perf_counter() - start,
    }
    logger.info("%s seed %d: mAP %.4f (best step %d, %.0fs)", variant.name, seed, m, result.best_step, row["seconds"])
    return row


def ablate(bench: Benchmark, base: TrainConfig, seeds: Seq[int] = (0, 1, 2), variants: Seq[Variant] = DEFAULT_VARIANTS,
           out_table=None, runs_csv=None) -> tuple[list[dict], list[dict]]:
    """Train and test every variant under every seed with the same budget.

    Returns ``(table, runs)``: the table has one row per variant with
    columns (variant, num_frames, mAP), the mAP averaged over seeds.
    """
    runs = []
    for seed in seeds:
        for v in variants:
            runs.append(run_variant(v, bench, base, seed))
    table = []
    for v in variants:
        maps = [r["mAP"] for r in runs if r["variant"] == v.name]
        table.append({"variant": v.name, "num_frames": v.num_frames, "mAP": float(np.mean(maps))})
    if out_table is not None:
        write_table(out_table, table, ["variant", "num_frames", "mAP"])
    if runs_csv is not None:
        write_table(runs_csv, runs, list(runs[0].keys()) if runs else ["variant"])
    return table, runs


def write_table(path, rows: Seq[dict], columns: Seq[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
