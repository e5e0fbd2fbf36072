"""Cosine classifier: zero bias, normalized weights, normalized features.

Logits are ``cos(theta_ij)`` between the (optionally embedded) input and each
class weight row, so they always lie in [-1, 1]. The embedding is either the
identity or one rectified linear layer. Gradients are computed by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DegenerateNormError(ArithmeticError):
    """An input embedding or weight row has zero norm."""


@dataclass
class CosineClassifier:
    class_weights: np.ndarray  # (C, k) with k = hidden_dim or input_dim
    embed_weights: np.ndarray | None = None  # (hidden_dim, input_dim)
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[0]

    @property
    def input_dim(self) -> int:
        if self.embed_weights is None:
            return self.class_weights.shape[1]
        return self.embed_weights.shape[1]

    @property
    def hidden_dim(self) -> int | None:
        return None if self.embed_weights is None else self.embed_weights.shape[0]

    @property
    def bias(self) -> np.ndarray:
        # hardwired, never a parameter
        return np.zeros(self.num_classes)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"class_weights": self.class_weights}
        if self.embed_weights is not None:
            params["embed_weights"] = self.embed_weights
        return params

    def copy(self) -> "CosineClassifier":
        return CosineClassifier(
            self.class_weights.copy(),
            None if self.embed_weights is None else self.embed_weights.copy(),
            self.seed,
        )


def init_classifier(input_dim: int, num_classes: int, hidden_dim: int | None = None,
                    seed: int = 0) -> CosineClassifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, deterministic per seed."""
    if input_dim < 1 or num_classes < 1 or (hidden_dim is not None and hidden_dim < 1):
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)

    def draw(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        w = rng.uniform(-bound, bound, size=(rows, cols))
        while np.any(np.linalg.norm(w, axis=1) == 0.0):
            zero = np.linalg.norm(w, axis=1) == 0.0
            w[zero] = rng.uniform(-bound, bound, size=(int(zero.sum()), cols))
        return w

    embed = None
    k = input_dim
    if hidden_dim is not None:
        embed = draw(hidden_dim, input_dim)
        k = hidden_dim
    return CosineClassifier(draw(num_classes, k), embed, seed)


def _normalize_rows(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0)
        raise DegenerateNormError(f"zero-norm {what} at rows {bad[:10].tolist()}")
    return m / norms[:, None], norms


def _embed(model: CosineClassifier, X: np.ndarray):
    if model.embed_weights is None:
        return X, None
    pre = X @ model.embed_weights.T
    return np.maximum(pre, 0.0), pre


def _check_input(model: CosineClassifier, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.input_dim:
        raise ValueError(f"input has {X.shape[1]} features, model expects {model.input_dim}")
    return X, single


def forward(model: CosineClassifier, x) -> np.ndarray:
    """Cosine logits for a single vector (C,) or a batch (N, C)."""
    X, single = _check_input(model, x)
    Z, _ = _embed(model, X)
    Zhat, _ = _normalize_rows(Z, "embedded input")
    What, _ = _normalize_rows(model.class_weights, "class weight")
    logits = Zhat @ What.T
    return logits[0] if single else logits


def backward(model: CosineClassifier, x, upstream) -> dict[str, np.ndarray]:
    """Gradient of ``sum(upstream * forward(model, x))`` w.r.t. each parameter.

    For a batch the per-sample contributions are summed; callers wanting a
    mean put the 1/N into ``upstream``.
    """
    X, _ = _check_input(model, x)
    G = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if G.shape != (X.shape[0], model.num_classes):
        raise ValueError(f"upstream shape {G.shape} does not match ({X.shape[0]}, {model.num_classes})")
    Z, pre = _embed(model, X)
    Zhat, znorm = _normalize_rows(Z, "embedded input")
    What, wnorm = _normalize_rows(model.class_weights, "class weight")

    # d(v/|v|)/dv = (I - v_hat v_hat^T) / |v|
    dWhat = G.T @ Zhat
    dW = (dWhat - np.sum(dWhat * What, axis=1, keepdims=True) * What) / wnorm[:, None]
    grads = {"class_weights": dW}

    if model.embed_weights is not None:
        dZhat = G @ What
        dZ = (dZhat - np.sum(dZhat * Zhat, axis=1, keepdims=True) * Zhat) / znorm[:, None]
        dpre = dZ * (pre > 0.0)
        grads["embed_weights"] = dpre.T @ X
    return grads


# checkpoint format: dims, seed, row-major flattened weights

def to_checkpoint(model: CosineClassifier, **extra) -> dict:
    ckpt = {
        "dims": {
            "input_dim": model.input_dim,
            "hidden_dim": model.hidden_dim,
            "num_classes": model.num_classes,
        },
        "seed": model.seed,
        "class_weights": model.class_weights.ravel(order="C").tolist(),
        "embed_weights": (None if model.embed_weights is None
                          else model.embed_weights.ravel(order="C").tolist()),
    }
    ckpt.update(extra)
    return ckpt


def from_checkpoint(ckpt: dict) -> CosineClassifier:
    dims = ckpt["dims"]
    d, h, C = dims["input_dim"], dims["hidden_dim"], dims["num_classes"]
    k = d if h is None else h
    W = np.asarray(ckpt["class_weights"], dtype=np.float64).reshape(C, k)
    E = None
    if h is not None:
        E = np.asarray(ckpt["embed_weights"], dtype=np.float64).reshape(h, d)
    return CosineClassifier(W, E, int(ckpt.get("seed", 0)))


def save_checkpoint(path: str | Path, model: CosineClassifier, **extra) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(model, **extra), indent=1) + "\n")


def load_checkpoint(path: str | Path) -> CosineClassifier:
    return from_checkpoint(json.loads(Path(path).read_text()))
