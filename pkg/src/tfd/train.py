"""Training loop: one window per gradient step, Adam, early stopping on validation loss."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from tfd import backbone as bb
from tfd.cache import FeatureCache
from tfd.losses import alpha_from_frequency
from tfd.model import AnchorSet, ModelConfig, Targets, detection_loss, heads_from_features, init_params, preprocess
from tfd.optim import Adam
from tfd.pyramid import AnchorConfig
from tfd.serialize import save_checkpoint
from tfd.synth import Sequence, window_indices
from tfd.tensor import GradTape, Tensor

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: loss = {value}")
        self.step = step
        self.value = value


PRESETS = {
    "desk": {},
    "frozen4_lr1e-5": {"learning_rate": 1e-5, "frozen_blocks": 4, "n": 2, "batch_size": 1},
}


@dataclass
class TrainConfig:
    n: int = 2
    fusion_mode: str = "learned_fusion"
    learning_rate: float = 1e-3
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 2000
    eval_every: int = 200
    patience: int = 3
    seed: int = 0
    frozen_blocks: int = 0
    dtype: str = "float32"
    gamma: float = 2.0
    grad_accumulation: int = 1
    max_n: int = 3
    allow_large_n: bool = False
    val_stride: int = 2
    num_classes: int = 3
    block_channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    convs_per_block: tuple[int, ...] = (2, 2, 3, 3, 3)
    pyramid_channels: int = 64
    head_depth: int = 2
    fusion_init: str = "center"
    image_size: tuple[int, int] = (128, 128)
    anchor_base_sizes: tuple[float, ...] = (32.0, 64.0, 128.0, 256.0, 512.0)

    def __post_init__(self):
        for name in ("block_channels", "convs_per_block", "image_size", "anchor_base_sizes"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.n < 0:
            raise ConfigError(f"n must be >= 0, got {self.n}")
        if self.n > self.max_n and not self.allow_large_n:
            raise ConfigError(f"n = {self.n} exceeds the memory cap n <= {self.max_n}; set allow_large_n to override")
        if self.fusion_mode == "single_frame" and self.n != 0:
            raise ConfigError("single_frame mode requires n = 0")
        if self.fusion_mode not in ("learned_fusion", "concat_no_fusion", "single_frame"):
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accumulation < 1:
            raise ConfigError("learning_rate must be > 0; batch_size and grad_accumulation >= 1")
        if self.max_steps < 0 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError("max_steps >= 0, eval_every >= 1 and patience >= 1 are required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0 <= self.frozen_blocks <= 5:
            raise ConfigError("frozen_blocks must be in [0, 5]")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                n=self.n,
                fusion_mode=self.fusion_mode,
                num_classes=self.num_classes,
                backbone=bb.BackboneConfig(self.block_channels, self.convs_per_block, self.frozen_blocks),
                pyramid_channels=self.pyramid_channels,
                head_depth=self.head_depth,
                anchors=AnchorConfig(base_sizes=self.anchor_base_sizes),
                image_size=self.image_size,
                fusion_init=self.fusion_init,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls.preset(preset, **d) if preset else cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    model_config: ModelConfig
    history: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_val: float | None = None
    steps_run: int = 0
    stopped_early: bool = False
    initial_loss: float | None = None
    seconds: float = 0.0


def class_counts(sequences: Seq[Sequence], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for seq in sequences:
        for g in seq.all_gt():
            counts[g.class_id] += 1
    return counts


def frame_targets(anchors: AnchorSet, seq: Sequence, t: int) -> Targets:
    gts = seq.gt[t]
    boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(-1, 4)
    classes = np.array([g.class_id for g in gts], dtype=np.int64)
    return anchors.targets(boxes, classes)


class WindowRunner:
    """Computes the loss of one (sequence, target frame) window.

    Owns the frozen-prefix memo and the per-frame target cache, so repeated
    visits to a frame only redo the trainable part of the network.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], dtype, alpha, gamma: float):
        self.config = config
        self.params = params
        self.dtype = dtype
        self.alpha = alpha
        self.gamma = gamma
        self.anchors = AnchorSet(config)
        self.prefix = bb.FrozenPrefixCache(config.backbone.frozen_blocks)
        self.targets: dict = {}
        self.backbone_runs = 0

    def features(self, key, seq: Sequence, idx: int) -> bb.BackboneFeatures:
        self.backbone_runs += 1
        frame = preprocess(seq.frames[idx], self.dtype)
        return self.prefix.extract((key, idx), frame, self.config.backbone, self.params, idx)

    def target(self, key, seq: Sequence, t: int) -> Targets:
        k = (key, t)
        if k not in self.targets:
            self.targets[k] = frame_targets(self.anchors, seq, t)
        return self.targets[k]

    def loss(self, key, seq: Sequence, t: int):
        idx = window_indices(seq.length, t, self.config.n)
        per_frame = {i: self.features(key, seq, i) for i in dict.fromkeys(idx)}
        head = heads_from_features([per_frame[i] for i in idx], self.params, self.config)
        return detection_loss(head, self.target(key, seq, t), self.alpha, self.gamma)


def validation_loss(runner: WindowRunner, sequences: Seq[Sequence], stride: int = 1) -> float:
    """Mean total loss over every ``stride``-th frame, reusing per-frame features within a sequence."""
    losses = []
    n = runner.config.n
    for si, seq in enumerate(sequences):
        cache = FeatureCache.for_radius(n)
        for t in range(0, seq.length, stride):
            idx = window_indices(seq.length, t, n)
            feats = [cache.get(i, lambda i=i: runner.features(("val", si), seq, i)) for i in idx]
            head = heads_from_features(feats, runner.params, runner.config)
            total, _, _ = detection_loss(head, runner.target(("val", si), seq, t), runner.alpha, runner.gamma)
            losses.append(float(total.data))
    return float(np.mean(losses)) if losses else math.nan


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def train(config: TrainConfig, train_seqs: Seq[Sequence], val_seqs: Seq[Sequence] = (), out_dir=None,
          params: dict[str, Tensor] | None = None) -> TrainResult:
    """Train one model; returns the best-validation parameters (or the last ones without validation data).

    With ``out_dir`` the best checkpoint, ``loss_history.csv`` and the config
    are written there.
    """
    if not train_seqs:
        raise ConfigError("no training sequences")
    start = time.perf_counter()
    mcfg = config.model_config()
    dtype = config.np_dtype
    if params is None:
        params = init_params(mcfg, config.seed, dtype)
    mask = bb.freeze_mask(mcfg.backbone, params)
    for name, p in params.items():
        p.requires_grad = mask[name]

    try:
        alpha = alpha_from_frequency(class_counts(train_seqs, config.num_classes))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    runner = WindowRunner(mcfg, params, dtype, alpha, config.gamma)
    opt = Adam(params, config.learning_rate, (config.beta1, config.beta2), config.eps, mask)
    rng = np.random.default_rng(config.seed)
    windows = [(si, t) for si, seq in enumerate(train_seqs) for t in range(seq.length)]
    order: list[int] = []

    def next_window():
        nonlocal order
        if not order:
            order = rng.permutation(len(windows)).tolist()
        return windows[order.pop(0)]

    result = TrainResult(params, mcfg)
    best = _snapshot(params)
    bad_evals = 0
    per_step = config.batch_size * config.grad_accumulation
    for step in range(1, config.max_steps + 1):
        opt.zero_grad()
        step_loss = 0.0
        for _ in range(per_step):
            si, t = next_window()
            with GradTape() as tape:
                total, _, _ = runner.loss(("train", si), train_seqs[si], t)
            value = float(total.data)
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            tape.backward(total, np.asarray(1.0 / per_step, dtype=total.dtype))
            step_loss += value / per_step
        if result.initial_loss is None:
            result.initial_loss = step_loss
        opt.step()
        for name, p in params.items():
            if mask[name] and not np.all(np.isfinite(p.data)):
                raise DivergenceError(step, math.nan)
        row = {"step": step, "train_loss": step_loss, "val_loss": ""}
        result.steps_run = step
        if val_seqs and (step % config.eval_every == 0 or step == config.max_steps):
            val = validation_loss(runner, val_seqs, config.val_stride)
            row["val_loss"] = val
            if not math.isfinite(val):
                raise DivergenceError(step, val)
            if result.best_val is None or val < result.best_val:
                result.best_val, result.best_step = val, step
                best = _snapshot(params)
                bad_evals = 0
            else:
                bad_evals += 1
            logger.info("step %d train %.4f val %.4f (best %.4f @ %d)", step, step_loss, val, result.best_val, result.best_step)
        result.history.append(row)
        if val_seqs and bad_evals >= config.patience:
            result.stopped_early = True
            logger.info("early stop at step %d: validation loss rose for %d evaluations", step, bad_evals)
            break

    if val_seqs:
        for name, arr in best.items():
            params[name].data = arr
    else:
        result.best_step = result.steps_run
    for p in params.values():
        p.grad = None
    result.seconds = time.perf_counter() - start
    if out_dir is not None:
        write_outputs(result, config, out_dir)
    return result


def write_history(path, history: Seq[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "train_loss", "val_loss"])
        w.writeheader()
        for row in history:
            w.writerow(row)


def write_outputs(result: TrainResult, config: TrainConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, {"model_config": result.model_config.to_dict(), "best_step": result.best_step})
    write_history(out / "loss_history.csv", result.history)
    (out / "train_config.json").write_text(config.to_json())
    return out


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(p.data.copy(), p.requires_grad, k) for k, p in params.items()}

