"""Softmax losses with logit adjustment, including the adaptive (ALA) variant.

Every loss works on cosine logits ``f`` and a scale ``s``. The adjusted
losses subtract a non-negative term ``A`` from the logits before the scaled
softmax::

    L = -log softmax(s * (f - A))[y]

and return the analytic gradient ``s * (softmax(s * (f - A)) - onehot(y))``
with respect to ``f``. ``A`` is a constant in that gradient, including when it
was computed from ``f`` itself (the difficulty factor is detached).

Single-sample calls take ``logits`` of shape (C,) and an int label; batched
calls take (N, C) and (N,) and return per-sample losses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class NumericInputError(ValueError):
    pass


class InvalidCountsError(ValueError):
    pass


class DomainError(ValueError):
    pass


class LossKind(str, enum.Enum):
    CE = "CE"
    QF_ONLY = "QF_ONLY"
    DF_ONLY = "DF_ONLY"
    LDAM = "LDAM"
    DF_TIMES_LDAM = "DF_TIMES_LDAM"
    ALA = "ALA"
    FOCAL = "FOCAL"


# command-line spellings
CLI_NAMES = {
    "ce": LossKind.CE,
    "qf": LossKind.QF_ONLY,
    "df": LossKind.DF_ONLY,
    "ldam": LossKind.LDAM,
    "df-ldam": LossKind.DF_TIMES_LDAM,
    "ala": LossKind.ALA,
    "focal": LossKind.FOCAL,
}


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.ALA
    scale_s: float = 30.0
    ldam_max_margin: float = 0.5
    focal_gamma: float = 2.0
    qf_log_base: float = math.e

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_kind(self.kind))
        if not self.scale_s > 0:
            raise ValueError(f"scale_s must be positive, got {self.scale_s}")
        if not self.ldam_max_margin > 0:
            raise ValueError("ldam_max_margin must be positive")
        if not self.focal_gamma >= 0:
            raise ValueError("focal_gamma must be non-negative")
        if not (self.qf_log_base > 0 and self.qf_log_base != 1):
            raise ValueError("qf_log_base must be positive and != 1")

    @property
    def name(self) -> str:
        return {v: k for k, v in CLI_NAMES.items()}[self.kind]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "scale_s": self.scale_s,
            "ldam_max_margin": self.ldam_max_margin,
            "focal_gamma": self.focal_gamma,
            "qf_log_base": self.qf_log_base,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(**d)


def parse_kind(kind) -> LossKind:
    if isinstance(kind, LossKind):
        return kind
    key = str(kind)
    if key.lower() in CLI_NAMES:
        return CLI_NAMES[key.lower()]
    try:
        return LossKind(key.upper())
    except ValueError:
        raise ValueError(f"unknown loss kind {kind!r}; choose from {sorted(CLI_NAMES)}") from None


@dataclass(frozen=True)
class AdjustingTerm:
    values: np.ndarray  # (C,) or (N, C), non-negative
    target_only: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NumericInputError("adjusting term must be finite")
        if np.any(v < 0):
            raise NumericInputError("adjusting term must be non-negative")
        object.__setattr__(self, "values", v)

    def applied(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        """(N, C) matrix actually subtracted from the logits."""
        n = len(labels)
        A = np.broadcast_to(self.values, (n, num_classes)).copy()
        if self.target_only:
            mask = np.zeros((n, num_classes), dtype=bool)
            mask[np.arange(n), labels] = True
            A[~mask] = 0.0
        return A


# ---------------------------------------------------------------------------
# helpers

def _prepare(logits, y):
    f = np.asarray(logits, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    if not np.all(np.isfinite(f)):
        raise NumericInputError("logits must be finite")
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.shape != (f.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {f.shape[0]} rows")
    if np.any((labels < 0) | (labels >= f.shape[1])):
        raise ValueError(f"label out of range [0, {f.shape[1]})")
    return f, labels, single


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _target_nll(z: np.ndarray, labels: np.ndarray):
    """``-log softmax(z)[y]`` per row, and the softmax itself.

    Written as ``(max - z_y) + log1p(sum of the other shifted exps)`` so tiny
    losses keep full relative precision.
    """
    rows = np.arange(len(labels))
    top = np.argmax(z, axis=1)
    m = z[rows, top]
    e = np.exp(z - m[:, None])
    e_rest = e.copy()
    e_rest[rows, top] = 0.0
    rest = np.sum(e_rest, axis=1)
    nll = (m - z[rows, labels]) + np.log1p(rest)
    p = e / (1.0 + rest)[:, None]
    return nll, p


def _softmax_grad(p: np.ndarray, labels: np.ndarray, s: float) -> np.ndarray:
    """``s * (p - onehot(y))``; the target entry is minus the off-target mass."""
    rows = np.arange(len(labels))
    grad = p.copy()
    grad[rows, labels] = 0.0
    grad[rows, labels] = -np.sum(grad, axis=1)
    return s * grad


def _finish(loss, grad, single):
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def _check_counts(counts) -> np.ndarray:
    S = np.asarray(counts)
    if S.ndim != 1 or S.size == 0:
        raise InvalidCountsError("counts must be a non-empty vector")
    if np.any(S <= 0) or not np.all(np.isfinite(S)):
        raise InvalidCountsError(f"counts must be positive, got {S.tolist()}")
    return S.astype(np.float64)


# ---------------------------------------------------------------------------
# losses

def ce_loss(logits, y, s: float = 1.0):
    """Scaled softmax cross-entropy. Returns ``(loss, grad_logits)``."""
    f, labels, single = _prepare(logits, y)
    loss, p = _target_nll(s * f, labels)
    return _finish(loss, _softmax_grad(p, labels, s), single)


def la_loss(logits, y, A: AdjustingTerm | np.ndarray, s: float = 1.0):
    """Logit-adjusted cross-entropy; ``A`` is held constant in the gradient."""
    f, labels, single = _prepare(logits, y)
    if not isinstance(A, AdjustingTerm):
        A = AdjustingTerm(A, target_only=False)
    applied = A.applied(labels, f.shape[1])
    loss, p = _target_nll(s * (f - applied), labels)
    return _finish(loss, _softmax_grad(p, labels, s), single)


def quantity_factor(counts: Sequence[int], log_base: float = math.e) -> np.ndarray:
    """1 / log(S_j / min(S) + 1): largest for the rarest class."""
    S = _check_counts(counts)
    return np.log(log_base) / np.log(S / S.min() + 1.0)


_DF_SLACK = 1e-9


def difficulty_factor(cos_target):
    """(1 - cos) / 2 in [0, 1]. Callers must treat the result as a constant."""
    c = np.asarray(cos_target, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise NumericInputError("cosine must be finite")
    if np.any(np.abs(c) > 1.0 + _DF_SLACK):
        raise DomainError(f"cosine outside [-1, 1]: {c[np.abs(c) > 1 + _DF_SLACK][:5]}")
    df = (1.0 - np.clip(c, -1.0, 1.0)) / 2.0
    return float(df) if df.ndim == 0 else df


def ala_adjust(cos_target, qf_target):
    qf = np.asarray(qf_target, dtype=np.float64)
    if not np.all(np.isfinite(qf)) or np.any(qf <= 0):
        raise NumericInputError("quantity factor must be finite and positive")
    out = difficulty_factor(cos_target) * qf
    return float(out) if np.ndim(out) == 0 else out


def ldam_adjust(counts: Sequence[int], max_margin: float = 0.5) -> np.ndarray:
    """K / S_j^(1/4) with K chosen so the largest margin equals ``max_margin``."""
    if not max_margin > 0:
        raise ValueError("max_margin must be positive")
    S = _check_counts(counts)
    m = 1.0 / np.sqrt(np.sqrt(S))
    return m * (max_margin / m.max())


def target_adjustment(spec: LossSpec, logits, y, counts=None) -> np.ndarray:
    """Per-sample target adjustment ``A[y]`` for the kinds that use one.

    Returns an (N,) vector (a float for single-sample input); zero for CE and
    focal. The difficulty factor is read off the current target cosine.
    """
    f, labels, single = _prepare(logits, y)
    rows = np.arange(len(labels))
    kind = spec.kind
    if kind in (LossKind.CE, LossKind.FOCAL):
        a = np.zeros(len(labels))
    else:
        if kind in (LossKind.DF_ONLY,):
            cls_term = np.ones(f.shape[1])
        elif kind in (LossKind.QF_ONLY, LossKind.ALA):
            cls_term = quantity_factor(counts, spec.qf_log_base)
        else:  # LDAM, DF_TIMES_LDAM
            cls_term = ldam_adjust(counts, spec.ldam_max_margin)
        a = cls_term[labels]
        if kind in (LossKind.DF_ONLY, LossKind.DF_TIMES_LDAM, LossKind.ALA):
            a = difficulty_factor(f[rows, labels]) * a
    return float(a[0]) if single else a


def _target_term(a: np.ndarray, labels: np.ndarray, C: int) -> AdjustingTerm:
    A = np.zeros((len(labels), C))
    A[np.arange(len(labels)), labels] = a
    return AdjustingTerm(A, target_only=True)


def ala_loss(logits, y, counts, s: float = 30.0, log_base: float = math.e):
    """Adaptive logit adjustment: A[y] = DF(cos_y) * QF[y], other entries zero."""
    f, labels, single = _prepare(logits, y)
    qf = quantity_factor(counts, log_base)
    a = ala_adjust(f[np.arange(len(labels)), labels], qf[labels])
    out = la_loss(f, labels, _target_term(np.atleast_1d(a), labels, f.shape[1]), s)
    return _finish(*out, single)


def focal_loss(logits, y, s: float = 1.0, gamma: float = 2.0):
    """-(1 - p_y)^gamma * log p_y over softmax(s * logits)."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    f, labels, single = _prepare(logits, y)
    nll, p = _target_nll(s * f, labels)
    logp_y = -nll
    rows = np.arange(len(labels))
    p_y = p[rows, labels]
    off = p.copy()
    off[rows, labels] = 0.0
    q = np.sum(off, axis=1)  # 1 - p_y without cancellation
    if gamma == 0:
        loss = -logp_y
        dL_dpy_times_py = -np.ones_like(p_y)
    else:
        loss = -(q ** gamma) * logp_y
        # p_y * dL/dp_y, written to stay finite as p_y -> 1
        with np.errstate(divide="ignore", invalid="ignore"):
            mod = np.where(q > 0, gamma * q ** (gamma - 1) * logp_y * p_y, 0.0)
        dL_dpy_times_py = mod - q ** gamma
    # dp_y/df_k = s * p_y * (onehot_k - p_k)
    grad = -dL_dpy_times_py[:, None] * _softmax_grad(p, labels, s)
    return _finish(loss, grad, single)


# ---------------------------------------------------------------------------
# batch driver used by training

@dataclass
class BatchLoss:
    loss: float  # mean over the batch
    grad_logits: np.ndarray  # (N, C), already divided by N
    per_sample: np.ndarray  # (N,)
    adjustment: np.ndarray  # (N,) target adjustment A[y]
    difficulty: np.ndarray  # (N,) DF of each sample, whatever the kind


def compute_loss(spec: LossSpec, logits, labels, counts=None) -> BatchLoss:
    f, labels, _ = _prepare(logits, labels)
    rows = np.arange(len(labels))
    df = difficulty_factor(f[rows, labels])
    if spec.kind == LossKind.CE:
        per, grad = ce_loss(f, labels, spec.scale_s)
        adj = np.zeros(len(labels))
    elif spec.kind == LossKind.FOCAL:
        per, grad = focal_loss(f, labels, spec.scale_s, spec.focal_gamma)
        adj = np.zeros(len(labels))
    else:
        adj = target_adjustment(spec, f, labels, counts)
        per, grad = la_loss(f, labels, _target_term(adj, labels, f.shape[1]), spec.scale_s)
    n = len(labels)
    return BatchLoss(float(np.mean(per)), grad / n, per, adj, np.atleast_1d(df))
