"""Training loop, baseline regularizers and evaluation metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .consistent import CFConfig, FeatureHistoryBuffer, cf_active, cf_step, generator_reg_term
from .data import SIDE_B, BatchPlan, Dataset, SplitAssignment, batches, split_ab
from .files import atomic_write_text
from .nn import ConfigError, Model, discriminate, forward
from .optim import AdamW, OptimHyper

log = logging.getLogger(__name__)

# independent random streams derived from one master seed
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_SPLIT = 3
STREAM_SHUFFLE = 4
STREAM_DROPOUT = 5
STREAM_HISTORY = 6
STREAM_LABELS = 7


def derive_seed(master: int, stream: int) -> int:
    return int(np.random.SeedSequence([master, stream]).generate_state(1)[0])


class NumericalAbort(RuntimeError):
    """A non-finite loss was produced; training stops rather than continuing silently."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 50
    seed: int = 0
    optim: OptimHyper = field(default_factory=OptimHyper)
    cf: Optional[CFConfig] = None
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    dropout: float = 0.0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")

    def generator_hyper(self) -> OptimHyper:
        h = self.optim
        return OptimHyper(h.lr, h.beta1, h.beta2, h.eps, self.weight_decay)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_top1: float
    val_loss: float
    val_top1: float
    val_top5: float
    disc_loss: float = 0.0
    cf_penalty: float = 0.0


METRIC_FIELDS = [f.name for f in fields(MetricsRecord)]


def label_smoothing_loss(logits: Tensor, labels, eps: float) -> Tensor:
    """Cross-entropy against ``(1 - eps) * onehot + eps / K``."""
    if not 0 <= eps < 1:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {eps}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    target = np.full((n, k), eps / k)
    target[np.arange(n), labels] += 1.0 - eps
    return ad.soft_target_cross_entropy(logits, target)


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Per-sample hit if the label ranks within the top ``k`` (ties go to the lower class index)."""
    n, K = logits.shape
    k = min(k, K)
    own = logits[np.arange(n), labels][:, None]
    cls = np.arange(K)[None, :]
    ahead = (logits > own) | ((logits == own) & (cls < labels[:, None]))
    return ahead.sum(axis=1) < k


def evaluate(model: Model, ds: Dataset) -> Tuple[float, float, float]:
    """Eval-mode ``(mean cross-entropy, top-1, top-5)`` over the whole dataset."""
    _, logits = forward(model, ds.inputs, "eval")
    loss = ad.softmax_cross_entropy(logits, ds.labels).item()
    top1 = float(topk_hits(logits.data, ds.labels, 1).mean())
    top5 = float(topk_hits(logits.data, ds.labels, 5).mean())
    return loss, top1, top5


def avg_last_k(records: Sequence[MetricsRecord], k: int, field_name: str) -> float:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not records:
        raise ConfigError("no records to average")
    return float(np.mean([getattr(r, field_name) for r in records[-k:]]))


def _check_finite(value: float, what: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise NumericalAbort(f"non-finite {what} ({value}) at epoch {epoch}, step {step}")


class Trainer:
    """Owns the optimizers, history buffer and random streams for one run."""

    def __init__(self, model: Model, cfg: TrainConfig, split: Optional[SplitAssignment] = None,
                 n_train: Optional[int] = None):
        self.model = model
        self.cfg = cfg
        self.opt_g = AdamW(cfg.generator_hyper())
        self.opt_d = AdamW(cfg.optim)
        self.step = 0
        self.split = split
        self.n_train = n_train
        self.buffer = FeatureHistoryBuffer(cfg.cf.history_len if cfg.cf else 0)
        self.plan = BatchPlan(derive_seed(cfg.seed, STREAM_SHUFFLE), cfg.batch_size)
        self.dropout_rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_DROPOUT))
        self.history_rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_HISTORY))

    def generator_step(self, xb: np.ndarray, yb: np.ndarray, sides: np.ndarray, epoch: int):
        """Task loss plus scheduled penalty, one AdamW step on group G.

        Returns ``(task_loss, correct, features, weighted_penalty_or_None)``.
        """
        cfg, model = self.cfg, self.model
        tape = ad.Tape()
        params = model.bind(tape, groups=("G",))
        feats, logits = forward(model, xb, "train", self.dropout_rng, params)
        if cfg.label_smoothing > 0:
            task = label_smoothing_loss(logits, yb, cfg.label_smoothing)
        else:
            task = ad.softmax_cross_entropy(logits, yb)
        loss = task
        penalty = None
        if cfg.cf is not None and cf_active(self.step, cfg.cf).gen_penalized:
            b_rows = np.flatnonzero(sides == SIDE_B)
            if b_rows.size:
                # discriminator parameters enter as constants here
                scores_b = discriminate(model, ad.take_rows(feats, b_rows), params)
                pen = ad.scalar_mul(generator_reg_term(scores_b, cfg.cf), cfg.cf.weight)
                loss = ad.add(task, pen)
                penalty = pen.item()
        _check_finite(loss.item(), "training loss", epoch, self.step)
        grads = ad.backward(tape, loss)
        model.zero_grads("G")
        model.accumulate(grads, params, "G")
        model.apply_grads("G", self.opt_g)
        correct = int((logits.data.argmax(axis=1) == yb).sum())
        return task.item(), correct, feats, penalty

    def run_epoch(self, ds: Dataset, epoch: int) -> dict:
        cfg = self.cfg
        tot_loss = tot_correct = 0.0
        disc_losses, penalties = [], []
        for xb, yb, sides in batches(ds, self.plan, epoch, self.split):
            activity = cf_active(self.step, cfg.cf) if cfg.cf is not None else None
            task, correct, feats, pen = self.generator_step(xb, yb, sides, epoch)
            tot_loss += task * len(yb)
            tot_correct += correct
            if pen is not None:
                penalties.append(pen)
            if activity is not None and activity.disc_trains:
                dl = cf_step(self.model, feats.data, sides, self.buffer, cfg.cf, self.opt_d, self.history_rng)
                if dl is not None:
                    _check_finite(dl, "discriminator loss", epoch, self.step)
                    disc_losses.append(dl)
            self.step += 1
        n = len(ds)
        return {
            "train_loss": tot_loss / n,
            "train_top1": tot_correct / n,
            "disc_loss": float(np.mean(disc_losses)) if disc_losses else 0.0,
            "cf_penalty": float(np.mean(penalties)) if penalties else 0.0,
        }


def train_run(model: Model, dataset: Dataset, val_dataset: Dataset, cfg: TrainConfig,
              split: Optional[SplitAssignment] = None, on_epoch=None) -> List[MetricsRecord]:
    """Train ``model`` in place and return one metrics record per evaluated epoch."""
    if split is None:
        p = cfg.cf.p if cfg.cf is not None else 0.5
        split = split_ab(len(dataset), p, derive_seed(cfg.seed, STREAM_SPLIT))
    if len(split.side) != len(dataset):
        raise ConfigError(f"split covers {len(split.side)} samples, dataset has {len(dataset)}")
    trainer = Trainer(model, cfg, split)
    records = []
    for epoch in range(cfg.epochs):
        stats = trainer.run_epoch(dataset, epoch)
        if (epoch + 1) % cfg.eval_every and epoch + 1 != cfg.epochs:
            continue
        val_loss, top1, top5 = evaluate(model, val_dataset)
        _check_finite(val_loss, "validation loss", epoch, trainer.step)
        rec = MetricsRecord(epoch, stats["train_loss"], stats["train_top1"], val_loss, top1, top5,
                            stats["disc_loss"], stats["cf_penalty"])
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d %s", epoch, rec)
    return records


def metrics_to_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        d = asdict(r)
        w.writerow([d["epoch"]] + [f"{d[k]:.6f}" for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> None:
    atomic_write_text(path, metrics_to_csv(records))


def read_metrics_csv(path) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_FIELDS:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRecord(int(row["epoch"]), *(float(row[k]) for k in METRIC_FIELDS[1:])) for row in reader]
