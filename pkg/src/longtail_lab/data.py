"""Synthetic long-tailed datasets with controllable class difficulty.

Classes are laid out head to tail (class 0 has the most training samples).
Each class is an isotropic Gaussian cluster around a unit-norm prototype;
difficulty is controlled through the spread of each cluster and through
"confuser" pairs whose prototypes are pinned at a chosen angle.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    n_max: int
    n_min: int
    feature_dim: int
    intra_class_sigma: float | Sequence[float] = 0.3
    confuser_pairs: Sequence[tuple[int, int, float]] = ()
    test_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        # normalize containers so equality/hashing/JSON are stable
        sigma = self.intra_class_sigma
        if np.isscalar(sigma):
            sigma = (float(sigma),) * max(self.num_classes, 0)
        object.__setattr__(self, "intra_class_sigma", tuple(float(s) for s in sigma))
        object.__setattr__(
            self,
            "confuser_pairs",
            tuple((int(a), int(b), float(t)) for a, b, t in self.confuser_pairs),
        )
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise InvalidSpecError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 1 <= self.n_min <= self.n_max:
            raise InvalidSpecError(
                f"need 1 <= n_min <= n_max, got n_min={self.n_min}, n_max={self.n_max}"
            )
        if self.feature_dim < 2:
            raise InvalidSpecError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.test_per_class < 1:
            raise InvalidSpecError("test_per_class must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpecError("seed must be a 64-bit unsigned integer")
        if len(self.intra_class_sigma) != self.num_classes:
            raise InvalidSpecError(
                f"intra_class_sigma has {len(self.intra_class_sigma)} entries "
                f"for {self.num_classes} classes"
            )
        if any(not (s >= 0.0 and math.isfinite(s)) for s in self.intra_class_sigma):
            raise InvalidSpecError("intra_class_sigma entries must be finite and >= 0")
        placed = set()
        for a, b, angle in self.confuser_pairs:
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes):
                raise InvalidSpecError(
                    f"confuser pair ({a}, {b}) out of range for {self.num_classes} classes"
                )
            if a == b:
                raise InvalidSpecError(f"confuser pair ({a}, {b}) must name two classes")
            if not 0.0 < angle <= math.pi:
                raise InvalidSpecError(f"confuser angle {angle} not in (0, pi]")
            # b is moved; moving a class some earlier pair already used would break that pair
            if b in placed:
                raise InvalidSpecError(
                    f"confuser pair ({a}, {b}) moves class {b}, already used by an earlier pair")
            placed.update((a, b))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intra_class_sigma"] = list(self.intra_class_sigma)
        d["confuser_pairs"] = [list(p) for p in self.confuser_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LongTailSpec":
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidSpecError(str(e)) from None


@dataclass
class Dataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    counts: np.ndarray  # (C,) training counts per class
    prototypes: np.ndarray  # (C, d), unit rows

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.counts, self.prototypes):
            a = np.ascontiguousarray(arr)
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SubsetPartition:
    many: frozenset[int] = field(default_factory=frozenset)
    medium: frozenset[int] = field(default_factory=frozenset)
    few: frozenset[int] = field(default_factory=frozenset)

    SUBSETS = ("many", "medium", "few")

    def __getitem__(self, name: str) -> frozenset[int]:
        if name not in self.SUBSETS:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def num_classes(self) -> int:
        return len(self.many) + len(self.medium) + len(self.few)

    def subset_of(self, cls: int) -> str:
        for name in self.SUBSETS:
            if cls in self[name]:
                return name
        raise KeyError(cls)

    def class_mask(self, name: str, num_classes: int | None = None) -> np.ndarray:
        n = self.num_classes if num_classes is None else num_classes
        mask = np.zeros(n, dtype=bool)
        mask[sorted(self[name])] = True
        return mask

    def to_dict(self) -> dict:
        return {name: sorted(self[name]) for name in self.SUBSETS}

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetPartition":
        return cls(**{name: frozenset(int(j) for j in d[name]) for name in cls.SUBSETS})


def class_counts(spec: LongTailSpec) -> np.ndarray:
    """Exponential profile from ``n_max`` (class 0) down to ``n_min`` (class C-1)."""
    C = spec.num_classes
    if C < 1:
        raise InvalidSpecError("num_classes must be >= 1")
    if C == 1:
        return np.array([spec.n_max], dtype=np.int64)
    ratio = spec.n_min / spec.n_max
    counts = [round(spec.n_max * ratio ** (j / (C - 1))) for j in range(C)]
    counts[0], counts[-1] = spec.n_max, spec.n_min
    return np.array(counts, dtype=np.int64)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _rotate_towards(anchor: np.ndarray, other: np.ndarray, angle: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Unit vector at ``angle`` from ``anchor`` in the plane of (anchor, other)."""
    u = _unit(anchor)
    v = other - np.dot(other, u) * u
    while np.linalg.norm(v) < 1e-8:
        # other is (anti)parallel to anchor: the plane is undefined, pick any
        r = rng.standard_normal(u.shape)
        v = r - np.dot(r, u) * u
    v = _unit(v)
    return math.cos(angle) * u + math.sin(angle) * v


def _sample(prototypes, sigma, per_class, rng):
    d = prototypes.shape[1]
    feats, labels = [], []
    for j, n in enumerate(per_class):
        noise = rng.standard_normal((int(n), d))
        feats.append(prototypes[j] + sigma[j] * noise)
        labels.append(np.full(int(n), j, dtype=np.int64))
    return np.concatenate(feats), np.concatenate(labels)


def generate(spec: LongTailSpec) -> tuple[Dataset, Dataset]:
    spec.validate()
    proto_rng, train_rng, test_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)
    )
    C, d = spec.num_classes, spec.feature_dim
    # gaussian directions are uniform on the sphere
    prototypes = proto_rng.standard_normal((C, d))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    for a, b, angle in spec.confuser_pairs:
        prototypes[b] = _rotate_towards(prototypes[a], prototypes[b], angle, proto_rng)

    counts = class_counts(spec)
    sigma = np.asarray(spec.intra_class_sigma)
    x_tr, y_tr = _sample(prototypes, sigma, counts, train_rng)
    x_te, y_te = _sample(prototypes, sigma, [spec.test_per_class] * C, test_rng)
    train = Dataset(x_tr, y_tr, counts.copy(), prototypes.copy())
    test = Dataset(x_te, y_te, counts.copy(), prototypes.copy())
    return train, test


def partition_by_count(counts: Sequence[int], many_threshold: int = 100,
                       few_threshold: int = 20) -> SubsetPartition:
    """Many-shot: count > many_threshold; few-shot: count <= few_threshold."""
    counts = np.asarray(counts)
    if counts.size == 0 or np.any(counts < 1):
        raise ValueError("counts must be non-empty and positive")
    many = frozenset(int(j) for j in np.flatnonzero(counts > many_threshold))
    few = frozenset(int(j) for j in np.flatnonzero(counts <= few_threshold))
    medium = frozenset(range(len(counts))) - many - few
    return SubsetPartition(many=many, medium=medium, few=few)


# ---------------------------------------------------------------------------
# on-disk format: <dir>/train.csv, <dir>/test.csv, <dir>/dataset.json
# CSV columns: f0..f{d-1}, label

TRAIN_CSV = "train.csv"
TEST_CSV = "test.csv"
SIDECAR = "dataset.json"


def _write_csv(path: Path, ds: Dataset) -> None:
    d = ds.feature_dim
    header = ",".join([f"f{i}" for i in range(d)] + ["label"])
    lines = [header]
    for row, label in zip(ds.features, ds.labels):
        # repr round-trips float64 exactly
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    path.write_text("\n".join(lines) + "\n")


def _read_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as f:
        header = f.readline().strip().split(",")
    if not header or header[-1] != "label":
        raise ValueError(f"{path}: last column must be 'label', got header {header}")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    return raw[:, :-1].copy(), raw[:, -1].astype(np.int64)


def save_dataset(out_dir: str | Path, train: Dataset, test: Dataset,
                 spec: LongTailSpec | None = None,
                 partition: SubsetPartition | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if partition is None:
        partition = partition_by_count(train.counts)
    _write_csv(out / TRAIN_CSV, train)
    _write_csv(out / TEST_CSV, test)
    sidecar = {
        "counts": [int(c) for c in train.counts],
        "prototypes": train.prototypes.tolist(),
        "spec": spec.to_dict() if spec is not None else None,
        "partition": partition.to_dict(),
        "fingerprint": train.fingerprint() + ":" + test.fingerprint(),
    }
    (out / SIDECAR).write_text(json.dumps(sidecar, indent=2) + "\n")
    return out


def load_dataset(path: str | Path) -> tuple[Dataset, Dataset, dict]:
    """Returns ``(train, test, sidecar)``."""
    p = Path(path)
    sidecar = json.loads((p / SIDECAR).read_text())
    counts = np.asarray(sidecar["counts"], dtype=np.int64)
    prototypes = np.asarray(sidecar["prototypes"], dtype=np.float64)
    x_tr, y_tr = _read_csv(p / TRAIN_CSV)
    x_te, y_te = _read_csv(p / TEST_CSV)
    if np.any(np.bincount(y_tr, minlength=len(counts)) != counts):
        raise ValueError(f"{p}: training labels disagree with counts in {SIDECAR}")
    train = Dataset(x_tr, y_tr, counts, prototypes)
    test = Dataset(x_te, y_te, counts.copy(), prototypes.copy())
    return train, test, sidecar
