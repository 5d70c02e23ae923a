"""
Training loop: SGD with momentum and coupled weight decay, linear warm-up then
cosine annealing, per-epoch validation on macro F1 and early stopping.
"""

import csv
import json
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import seeding
from augment import AugmentPolicy, apply_policy, fix_length
from dsp import DEFAULT_FRONTEND, FrontendConfig, mfcc
from errors import ConfigError, DataError, NumericError
from evaluation import ConfusionCounts, macro_f1
from manifest import Example, Manifest, Split, load_example
from nn import ResNet15, cross_entropy, forward_with_augment, predict_logits, save_checkpoint
from tensor import Tensor, no_grad
from uncertainty import UncertaintyConfig

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "split", "loss", "macro_f1", "lr"]
CHECKPOINT_NAME = "best.ckpt"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(200, ge=1)   # 300 with early stopping for LibriSpeech
    batch_size: int = Field(100, ge=1)
    lr_peak: float = Field(0.1, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.001, ge=0.0)
    warmup_fraction: float = Field(0.05, ge=0.0, lt=1.0)
    early_stop_patience: Optional[int] = Field(20, ge=0)   # None trains every epoch


class MetricRecord(BaseModel):
    epoch: int
    split: str
    loss: float
    macro_f1: float
    lr: float


class TrainReport(BaseModel):
    epochs_run: int
    best_epoch: int
    best_val_macro_f1: float
    best_val_loss: float
    stopped_early: bool
    n_parameters: int
    checkpoint: Optional[str] = None
    history: List[MetricRecord] = []
    started_at: datetime
    completed_at: Optional[datetime] = None

    def final_train_f1(self) -> float:
        train_rows = [r for r in self.history if r.split == Split.TRAIN.value]
        return train_rows[-1].macro_f1 if train_rows else float("nan")


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(round(cfg.warmup_fraction * total_steps))


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr_peak over the warm-up, then half-cosine down to 0 at total_steps"""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    warmup = warmup_steps(total_steps, cfg)
    if step < warmup:
        return cfg.lr_peak * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """
    Momentum SGD with classic (coupled) weight decay:
        v <- momentum * v + (g + weight_decay * w)
        w <- w - lr * v
    BN running statistics are buffers, never parameters, so they get no decay.
    """

    def __init__(self, params: Union[Mapping[str, Tensor], Sequence[Tensor]], momentum: float = 0.9,
                 weight_decay: float = 0.001):
        if isinstance(params, Mapping):
            self.params = OrderedDict(params)
        else:
            self.params = OrderedDict((f"param{i}", p) for i, p in enumerate(params))
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.steps = 0

    def step(self, lr: float):
        # all gradients are checked before any parameter moves
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name} at step {self.steps}")
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            v = self.velocity[name]
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= (lr * v).astype(p.data.dtype, copy=False)
        self.steps += 1

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def featurize_train(example: Example, policy: AugmentPolicy, frontend: FrontendConfig,
                    rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Load, augment and featurize one training example -> (1, H, W)"""
    w = load_example(example, rng)
    if not policy.trim_enabled:
        w = fix_length(w, frontend.clip_samples)
    w = apply_policy(w, policy, rng)
    w = fix_length(w, frontend.clip_samples)
    return mfcc(w, frontend, dtype)[0]


def _featurize_batch(examples: Sequence[Example], indices: Sequence[int], policy: AugmentPolicy,
                     frontend: FrontendConfig, seed: int, epoch: int, dtype, pool) -> np.ndarray:
    def one(index):
        rng = seeding.substream(seed, seeding.AUGMENT, epoch, int(index))
        return featurize_train(examples[index], policy, frontend, rng, dtype)

    if pool is not None:
        return np.stack(list(pool.map(one, indices)))
    return np.stack([one(i) for i in indices])


def _clean_features(examples: Sequence[Example], frontend: FrontendConfig, seed: int, dtype, pool) -> np.ndarray:
    def one(index):
        w = load_example(examples[index], seeding.substream(seed, seeding.SILENCE, index))
        return mfcc(fix_length(w, frontend.clip_samples), frontend, dtype)[0]

    indices = range(len(examples))
    if pool is not None:
        return np.stack(list(pool.map(one, indices)))
    return np.stack([one(i) for i in indices])


def _snapshot(model: ResNet15) -> Dict[str, np.ndarray]:
    state = {name: p.data.copy() for name, p in model.named_parameters().items()}
    state.update({name: b.copy() for name, b in model.named_buffers().items()})
    return state


def _restore(model: ResNet15, state: Dict[str, np.ndarray]):
    params, buffers = model.named_parameters(), model.named_buffers()
    for name, values in state.items():
        target = params[name].data if name in params else buffers[name]
        target[...] = values


def write_metrics_csv(history: Sequence[MetricRecord], path: Union[str, Path]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for r in history:
            writer.writerow({"epoch": r.epoch, "split": r.split, "loss": repr(r.loss),
                             "macro_f1": repr(r.macro_f1), "lr": repr(r.lr)})


def fit(manifest: Manifest, model: ResNet15, cfg: TrainConfig, policy: Optional[AugmentPolicy] = None,
        uncertainty: Optional[UncertaintyConfig] = None, frontend: FrontendConfig = DEFAULT_FRONTEND,
        seed: int = 0, run_dir: Optional[Union[str, Path]] = None, max_workers: int = 1,
        checkpoint_header: Optional[dict] = None,
        on_epoch: Optional[Callable[[List[MetricRecord]], None]] = None) -> TrainReport:
    """
    Train `model` in place and leave it holding the best-validation weights.

    Each epoch shuffles the train split with the TRAIN substream, featurizes
    example i with the AUGMENT substream (seed, epoch, i), and perturbs batch b
    with the UNCERTAINTY substream (seed, epoch, b). With a run directory the
    best checkpoint, metrics.csv and report.json are written there.
    """
    policy = policy or AugmentPolicy.identity()
    if model.n_classes != len(manifest.class_map):
        raise DataError(f"model has {model.n_classes} outputs but the dataset has "
                        f"{len(manifest.class_map)} classes")
    manifest.require_splits(Split.TRAIN, Split.VALIDATION)
    if uncertainty is not None and uncertainty.active and cfg.batch_size < 2:
        logger.warning(f"batch_size {cfg.batch_size} with {uncertainty.method.value}: "
                       "batch statistic variance is zero")

    train_examples = manifest.split(Split.TRAIN)
    val_examples = manifest.split(Split.VALIDATION)
    train_labels = np.array([e.label for e in train_examples])
    val_labels = np.array([e.label for e in val_examples])
    n = len(train_examples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    dtype = model.dtype

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    optimizer = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
    shuffle_rng = seeding.substream(seed, seeding.TRAIN)
    report = TrainReport(epochs_run=0, best_epoch=-1, best_val_macro_f1=-1.0, best_val_loss=math.inf,
                         stopped_early=False, n_parameters=model.parameter_count(),
                         started_at=datetime.now())

    logger.info("=" * 60)
    logger.info(f"Training {n} examples, {len(val_examples)} validation, {cfg.epochs} epochs x "
                f"{steps_per_epoch} steps, method {uncertainty.method.value if uncertainty else 'none'}")
    logger.info("=" * 60)

    pool = ThreadPoolExecutor(max_workers=max_workers) if max_workers > 1 else None
    try:
        val_features = _clean_features(val_examples, frontend, seed, dtype, pool)
        best_state = None
        stale = 0
        step = 0
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(n)
            loss_sum, predictions, lr = 0.0, np.empty(n, dtype=np.int64), 0.0
            for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                x = _featurize_batch(train_examples, idx, policy, frontend, seed, epoch, dtype, pool)
                lr = lr_schedule(step, total_steps, cfg)
                optimizer.zero_grad()
                rng = seeding.substream(seed, seeding.UNCERTAINTY, epoch, batch_index)
                logits = forward_with_augment(model, Tensor(x), uncertainty, rng, training=True)
                loss = cross_entropy(logits, train_labels[idx])
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise NumericError(f"non-finite training loss at epoch {epoch}, step {step}")
                loss.backward()
                optimizer.step(lr)
                loss_sum += loss_value * len(idx)
                predictions[start:start + len(idx)] = logits.data.argmax(axis=1)
                step += 1
            train_f1 = macro_f1(ConfusionCounts.from_predictions(train_labels[order], predictions, model.n_classes))
            train_loss = loss_sum / n

            val_logits = predict_logits(model, val_features, cfg.batch_size)
            with no_grad():
                val_loss = float(cross_entropy(Tensor(val_logits), val_labels).data)
            val_f1 = macro_f1(ConfusionCounts.from_predictions(val_labels, val_logits.argmax(axis=1), model.n_classes))
            report.history.append(MetricRecord(epoch=epoch, split=Split.TRAIN.value, loss=train_loss,
                                               macro_f1=train_f1, lr=lr))
            report.history.append(MetricRecord(epoch=epoch, split=Split.VALIDATION.value, loss=val_loss,
                                               macro_f1=val_f1, lr=lr))
            report.epochs_run = epoch + 1
            logger.info(f"Epoch {epoch}: train loss {train_loss:.4f} F1 {train_f1:.2f} | "
                        f"val loss {val_loss:.4f} F1 {val_f1:.2f} | lr {lr:.5f}")

            improved = val_f1 > report.best_val_macro_f1 or (
                val_f1 == report.best_val_macro_f1 and val_loss < report.best_val_loss)
            if improved:
                report.best_epoch, report.best_val_macro_f1, report.best_val_loss = epoch, val_f1, val_loss
                best_state = _snapshot(model)
                stale = 0
                if run_dir is not None:
                    header = dict(checkpoint_header or {})
                    header.update({"class_map": manifest.class_map.model_dump(), "epoch": epoch,
                                   "val_macro_f1": val_f1, "val_loss": val_loss})
                    save_checkpoint(run_dir / CHECKPOINT_NAME, model, header)
                    report.checkpoint = str(run_dir / CHECKPOINT_NAME)
            else:
                stale += 1
                if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
                    logger.info(f"Early stop at epoch {epoch}: no improvement for {stale} epochs")
                    report.stopped_early = True
                    break
            if on_epoch is not None:
                on_epoch(report.history[-2:])
    finally:
        if pool is not None:
            pool.shutdown()

    if best_state is not None:
        _restore(model, best_state)
    report.completed_at = datetime.now()
    if run_dir is not None:
        write_metrics_csv(report.history, run_dir / "metrics.csv")
        (run_dir / "report.json").write_text(json.dumps(_report_json(report), indent=2))
    logger.info(f"✅ Best epoch {report.best_epoch}: validation macro F1 {report.best_val_macro_f1:.2f}")
    return report


def _report_json(report: TrainReport) -> dict:
    """report.json: everything but the metric history and wall-clock times"""
    return report.model_dump(mode="json", exclude={"history", "started_at", "completed_at"})
