"""Confidence-calibration analysis.

Equal-width-bin expected calibration error (ECE), winning-score histograms,
post-hoc temperature scaling fitted by grid search on a held-out split, and
soft-target composition statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class CalibrationReport:
    """Reliability table over equal-width confidence bins.

    per_bin rows are (count, mean_confidence, accuracy, gap); empty bins
    carry zeros and contribute nothing to the ECE sum.
    """

    bin_count: int
    bin_edges: np.ndarray
    per_bin: list[tuple[int, float, float, float]]
    ece: float
    temperature: float | None = None

    def to_dict(self) -> dict:
        return {
            "bin_count": self.bin_count,
            "bin_edges": [float(e) for e in self.bin_edges],
            "per_bin": [
                {"count": c, "mean_confidence": mc, "accuracy": acc, "gap": gap}
                for c, mc, acc, gap in self.per_bin
            ],
            "ece": self.ece,
            "temperature": self.temperature,
        }


def bin_index(confidences: np.ndarray, bins: int) -> np.ndarray:
    """Bin assignment on [0, 1]: first bin closed on both ends, the rest
    left-open/right-closed, so an exact edge value belongs to the bin
    below it."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.searchsorted(edges, confidences, side="left") - 1
    return np.clip(idx, 0, bins - 1)


def compute_ece(winning_scores, correct, bins: int = 15) -> CalibrationReport:
    """Expected calibration error: sum over bins of (count/N)*|acc - conf|."""
    scores = np.asarray(winning_scores, dtype=np.float64)
    hits = np.asarray(correct, dtype=bool)
    if scores.shape != hits.shape or scores.ndim != 1:
        raise ValueError(
            f"scores {scores.shape} and correctness {hits.shape} must be "
            "1-D arrays of the same length"
        )
    if scores.size == 0:
        raise ValueError("need at least one sample")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    idx = bin_index(scores, bins)
    per_bin = []
    ece = 0.0
    n = scores.size
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            per_bin.append((0, 0.0, 0.0, 0.0))
            continue
        mean_conf = float(scores[mask].mean())
        acc = float(hits[mask].mean())
        gap = abs(acc - mean_conf)
        per_bin.append((count, mean_conf, acc, gap))
        ece += (count / n) * gap
    return CalibrationReport(bins, np.linspace(0.0, 1.0, bins + 1), per_bin, ece)


def winning_scores(probs) -> tuple[np.ndarray, np.ndarray]:
    """Split NxK probabilities into (max score per row, argmax per row)."""
    p = _as_array(probs)
    return p.max(axis=1), p.argmax(axis=1)


def apply_temperature(logits, t: float) -> np.ndarray:
    """softmax(t * logits); argmax per row is unchanged for any t > 0."""
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    z = _as_array(logits) * t
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def default_temperature_grid() -> np.ndarray:
    """50 log-spaced values spanning [0.05, 5], plus exactly 1.0 so a
    no-op scaling is always a candidate."""
    return np.unique(np.concatenate([np.geomspace(0.05, 5.0, 50), [1.0]]))


def fit_temperature(logits_val, labels_val, grid=None, bins: int = 15) -> float:
    """Grid value minimizing ECE of softmax(t * logits) on the held-out
    split; ties (within 1e-12) resolve toward t closest to 1."""
    z = _as_array(logits_val)
    labels = np.asarray(labels_val, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"need a non-empty NxK logit array, got shape {z.shape}")
    if z.shape[0] != labels.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows vs {labels.shape[0]} labels")
    grid = default_temperature_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("temperature grid is empty")
    if np.any(grid <= 0):
        raise ValueError("temperature grid must be strictly positive")
    eces = []
    for t in grid:
        scores, preds = winning_scores(apply_temperature(z, float(t)))
        eces.append(compute_ece(scores, preds == labels, bins).ece)
    eces = np.asarray(eces)
    near_best = np.flatnonzero(eces <= eces.min() + 1e-12)
    best = min(near_best, key=lambda i: (abs(grid[i] - 1.0), grid[i]))
    return float(grid[best])


def score_histogram(winning_scores, bin_width: float, floor: float = 0.0):
    """Counts of scores >= floor in left-closed width-sized bins.

    Returns (bin_start, count) pairs for non-empty bins only, ascending.
    A score sitting within 1e-9 of a bin edge counts toward the upper bin
    so decimal widths like 0.1 bin exact edge values correctly.
    """
    if not 0 < bin_width <= 1:
        raise ValueError(f"bin_width must be in (0, 1], got {bin_width}")
    scores = np.asarray(winning_scores, dtype=np.float64)
    scores = scores[scores >= floor]
    if scores.size == 0:
        return []
    q = scores / bin_width
    idx = np.floor(q).astype(np.int64)
    idx[q - idx > 1 - 1e-9] += 1
    counts = {}
    for b in idx:
        counts[int(b)] = counts.get(int(b), 0) + 1
    return [(b * bin_width, counts[b]) for b in sorted(counts)]


@dataclass
class SoftLabelStats:
    """Average composition of merged soft targets: how much mass the true
    classes keep and where the largest off-target masses sit."""

    sample_count: int
    truth_mean: float
    top_nontruth: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "truth_mean": self.truth_mean,
            "top_nontruth": [float(v) for v in self.top_nontruth],
        }


def soft_label_statistics(pair_targets, merged, top_k: int = 5,
                          mixed_only: bool = True) -> SoftLabelStats:
    """Mean target mass on the true classes and the mean of the top_k
    largest non-truth masses, per sample.

    pair_targets marks which classes are "true" (its non-zero support);
    merged is the actual training target. mixed_only keeps only rows whose
    support spans two classes, i.e. averaged pairs with distinct labels.
    """
    pq = _as_array(pair_targets)
    m = _as_array(merged)
    if pq.shape != m.shape:
        raise ValueError(f"target shapes differ: {pq.shape} vs {m.shape}")
    truth = pq > 0
    if mixed_only:
        keep = truth.sum(axis=1) >= 2
        truth, m = truth[keep], m[keep]
    if m.shape[0] == 0:
        return SoftLabelStats(0, float("nan"), np.zeros(top_k))
    truth_mean = float(m[truth].mean())
    masked = np.where(truth, -np.inf, m)
    order = np.sort(masked, axis=1)[:, ::-1]
    k = min(top_k, m.shape[1] - int(truth.sum(axis=1).max()))
    top = order[:, :k]
    return SoftLabelStats(m.shape[0], truth_mean, top.mean(axis=0))
