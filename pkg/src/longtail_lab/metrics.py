"""Many / Medium / Few / All top-1 accuracy and probability statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import SubsetPartition

HARD_BELOW = 0.2
EASY_ABOVE = 0.8
GROUPS = ("many", "medium", "few", "all")

# accuracy of a subset with no test samples
UNDEFINED = None


@dataclass
class MetricsReport:
    per_class_accuracy: list[float | None]
    subset_accuracy: dict[str, float | None]
    subset_correct: dict[str, int]
    subset_size: dict[str, int]
    hard_count: dict[str, int]
    easy_count: dict[str, int]
    probability_curve: dict[str, list[float]]

    def to_dict(self) -> dict:
        return {
            "per_class_accuracy": self.per_class_accuracy,
            "subset_accuracy": self.subset_accuracy,
            "subset_correct": self.subset_correct,
            "subset_size": self.subset_size,
            "hard_count": self.hard_count,
            "easy_count": self.easy_count,
            "probability_curve": self.probability_curve,
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.to_dict()}, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        fields = ("per_class_accuracy", "subset_accuracy", "subset_correct", "subset_size",
                  "hard_count", "easy_count", "probability_curve")
        return cls(**{k: d[k] for k in fields})

    def to_markdown(self, name: str = "model") -> str:
        return markdown_table([(name, {g: self.subset_accuracy[g] for g in GROUPS})])


def _fmt(v) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}"


def markdown_table(rows, std=None) -> str:
    """``rows``: list of (name, {group: accuracy or None}); accuracies shown in percent."""
    lines = ["| Method | Many | Medium | Few | All |", "|---|---|---|---|---|"]
    for i, (name, acc) in enumerate(rows):
        cells = []
        for g in GROUPS:
            cell = _fmt(acc[g])
            if std is not None and acc[g] is not None:
                cell += f" ± {100 * std[i][g]:.1f}"
            cells.append(cell)
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report(predictions, probabilities, labels, partition: SubsetPartition) -> MetricsReport:
    pred = np.asarray(predictions, dtype=np.int64)
    prob = np.asarray(probabilities, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if not (len(pred) == len(prob) == len(lab)):
        raise ValueError("predictions, probabilities and labels must have equal length")
    C = partition.num_classes
    if len(lab) and (lab.min() < 0 or lab.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")

    correct = pred == lab
    totals = np.bincount(lab, minlength=C)
    hits = np.bincount(lab, weights=correct, minlength=C)
    per_class = [float(h / t) if t else UNDEFINED for h, t in zip(hits, totals)]

    acc, n_correct, size, hard, easy, curves = {}, {}, {}, {}, {}, {}
    for g in GROUPS:
        if g == "all":
            sel = np.ones(len(lab), dtype=bool)
        else:
            sel = partition.class_mask(g, C)[lab]
        k = int(sel.sum())
        size[g] = k
        n_correct[g] = int(correct[sel].sum())
        acc[g] = n_correct[g] / k if k else UNDEFINED
        p = prob[sel]
        hard[g] = int(np.sum(p < HARD_BELOW))
        easy[g] = int(np.sum(p > EASY_ABOVE))
        curves[g] = sorted(p.tolist(), reverse=True)
    return MetricsReport(per_class, acc, n_correct, size, hard, easy, curves)
