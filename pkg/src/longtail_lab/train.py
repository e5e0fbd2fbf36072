"""Deterministic mini-batch SGD for the cosine classifier."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, SubsetPartition, partition_by_count
from .losses import LossSpec, compute_loss, log_softmax
from .model import CosineClassifier, backward, forward


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    lr_decay_epochs: Sequence[int] = ()
    lr_decay_factor: float = 0.1
    many_threshold: int = 100
    few_threshold: int = 20

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossSpec.from_dict(self.loss))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** n

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "loss": self.loss.to_dict(),
            "seed": self.seed,
            "lr_decay_epochs": list(self.lr_decay_epochs),
            "lr_decay_factor": self.lr_decay_factor,
            "many_threshold": self.many_threshold,
            "few_threshold": self.few_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossSpec.from_dict(d["loss"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


TRACE_COLUMNS = ("epoch", "loss", "acc", "adj_many", "adj_medium", "adj_few", "adj_all", "df_all")


@dataclass
class TraceLog:
    """Per-epoch running averages collected while training.

    Adjusting-term and difficulty means are taken over the training instances
    seen during the epoch, using the values at the time each batch was
    processed. A subset with no classes gets NaN.
    """

    loss: list[float] = field(default_factory=list)
    acc: list[float] = field(default_factory=list)
    adj: dict[str, list[float]] = field(
        default_factory=lambda: {"many": [], "medium": [], "few": [], "all": []})
    df_all: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)

    def rows(self):
        for e in range(len(self)):
            yield (e, self.loss[e], self.acc[e], self.adj["many"][e], self.adj["medium"][e],
                   self.adj["few"][e], self.adj["all"][e], self.df_all[e])

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in self.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TraceLog":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        reader = csv.DictReader(lines)
        log = cls()
        for r in reader:
            log.loss.append(float(r["loss"]))
            log.acc.append(float(r["acc"]))
            for k in ("many", "medium", "few", "all"):
                log.adj[k].append(float(r[f"adj_{k}"]))
            log.df_all.append(float(r["df_all"]))
        return log


def _masked_mean(values, mask):
    return float(np.mean(values[mask])) if np.any(mask) else math.nan


def train(train_set: Dataset, model: CosineClassifier, cfg: TrainConfig,
          partition: SubsetPartition | None = None) -> tuple[CosineClassifier, TraceLog]:
    """SGD with momentum and L2 weight decay. Returns a new model; the input is untouched."""
    if train_set.feature_dim != model.input_dim:
        raise ConfigError(
            f"dataset has {train_set.feature_dim} features, model expects {model.input_dim}")
    if train_set.num_classes != model.num_classes:
        raise ConfigError(
            f"dataset has {train_set.num_classes} classes, model has {model.num_classes}")
    n = len(train_set)
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds training set size {n}")
    if partition is None:
        partition = partition_by_count(train_set.counts, cfg.many_threshold, cfg.few_threshold)

    model = model.copy()
    params = model.parameters()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(cfg.seed)
    counts = train_set.counts
    X, y = train_set.features, train_set.labels
    sample_subset = {name: partition.class_mask(name, model.num_classes)[y]
                     for name in SubsetPartition.SUBSETS}
    log = TraceLog()

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        adj = np.empty(n)
        df = np.empty(n)
        per_loss = np.empty(n)
        correct = np.zeros(n, dtype=bool)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = forward(model, X[idx])
            out = compute_loss(cfg.loss, logits, y[idx], counts)
            if not math.isfinite(out.loss):
                raise DivergenceError(epoch, b, out.loss)
            adj[idx] = out.adjustment
            df[idx] = out.difficulty
            per_loss[idx] = out.per_sample
            correct[idx] = np.argmax(logits, axis=1) == y[idx]

            grads = backward(model, X[idx], out.grad_logits)
            for k, p in params.items():
                g = grads[k] + cfg.weight_decay * p
                v = velocity[k]
                v *= cfg.momentum
                v += g
                p -= lr * v
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise DivergenceError(epoch, b, math.nan)

        log.loss.append(float(np.mean(per_loss)))
        log.acc.append(float(np.mean(correct)))
        for name in SubsetPartition.SUBSETS:
            log.adj[name].append(_masked_mean(adj, sample_subset[name]))
        log.adj["all"].append(float(np.mean(adj)))
        log.df_all.append(float(np.mean(df)))
    return model, log


@dataclass
class Evaluation:
    predictions: np.ndarray  # (N,) argmax of raw cosine logits
    target_probability: np.ndarray  # (N,) softmax(s * logits)[y]
    logits: np.ndarray  # (N, C)


def evaluate(model: CosineClassifier, test_set: Dataset, loss: LossSpec | None = None) -> Evaluation:
    """No adjustment at inference: the target is unknown there."""
    if test_set.feature_dim != model.input_dim:
        raise ConfigError(
            f"dataset has {test_set.feature_dim} features, model expects {model.input_dim}")
    s = (loss or LossSpec()).scale_s
    logits = forward(model, test_set.features)
    if logits.shape[1] <= int(test_set.labels.max(initial=0)):
        raise ConfigError("test labels exceed the model's class count")
    probs = np.exp(log_softmax(s * logits))
    rows = np.arange(len(test_set.labels))
    return Evaluation(np.argmax(logits, axis=1), probs[rows, test_set.labels], logits)
