"""Soft-target construction for every training strategy.

Strategies: one-hot baseline, uniform label smoothing at strength alpha,
mixup, and the pairwise family (sample-pair averaging with a learned or
uniform smoothing distribution merged in at weight beta), plus the
original/averaged alternation schedule the pairwise family trains under.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class StrategyKind(str, enum.Enum):
    BASELINE = "baseline"
    ULS = "uls"
    MIXUP = "mixup"
    PLS = "pls"
    PLS_UD = "pls-ud"
    PLS_NO_LEARNED = "pls-no-learned"
    PLS_NO_ORIGINAL = "pls-no-original"


class Phase(enum.Enum):
    ORIGINAL = "original"
    AVERAGED = "averaged"


class StrategyConfigError(ValueError):
    """Strategy configuration or inputs inconsistent with the chosen kind."""


# Kinds that alternate original/averaged batches on the step schedule.
_ALTERNATING = {StrategyKind.PLS, StrategyKind.PLS_UD, StrategyKind.PLS_NO_LEARNED}
# Kinds whose second loss term reads the learned smoothing distribution.
_LEARNED = {StrategyKind.PLS, StrategyKind.PLS_NO_ORIGINAL}


@dataclass(frozen=True)
class TargetStrategy:
    """How training targets (and transformed inputs) are built.

    alpha is the uniform-smoothing strength (uls, pls-ud); beta the merge
    weight between the pair label and the learned distribution (pls family),
    0.5 reproducing the plain average.
    """

    kind: StrategyKind = StrategyKind.BASELINE
    alpha: float = 0.1
    beta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise StrategyConfigError(f"{name} must be in [0, 1], got {v}")

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def uses_learned(self) -> bool:
        return self.kind in _LEARNED

    @property
    def uses_pairing(self) -> bool:
        return self.kind in _ALTERNATING or self.kind is StrategyKind.PLS_NO_ORIGINAL

    @property
    def mix_weight(self) -> float:
        """Weight on the smoothing term of the two-term loss."""
        if self.kind is StrategyKind.ULS or self.kind is StrategyKind.PLS_UD:
            return self.alpha
        if self.kind in _LEARNED:
            return self.beta
        return 0.0


@dataclass
class PairedBatch:
    """A training batch plus its hard (pre-smoothing) target rows.

    For averaged batches each target row carries 0.5 on each of the two
    source classes (1.0 when they coincide); original batches are one-hot.
    """

    inputs: np.ndarray
    pair_targets: np.ndarray
    is_original: bool = field(default=False)

    def __len__(self):
        return self.inputs.shape[0]


def one_hot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], class_count))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def uls_target(y: int, class_count: int, alpha: float) -> np.ndarray:
    """Uniform-smoothed soft label: the one-hot row pulled toward uniform
    with weight alpha. Shares pls_merge's arithmetic so the two coincide
    bit for bit at equal weights."""
    if not 0.0 <= alpha <= 1.0:
        raise StrategyConfigError(f"alpha must be in [0, 1], got {alpha}")
    if not 0 <= y < class_count:
        raise ValueError(f"class index {y} outside [0, {class_count})")
    row = one_hot(np.array([y]), class_count)[0]
    return pls_merge(row, np.full(class_count, 1.0 / class_count), alpha)


def _check_permutation(permutation, n):
    permutation = np.asarray(permutation)
    if permutation.shape != (n,) or not np.array_equal(np.sort(permutation), np.arange(n)):
        raise ValueError("permutation must be a bijection on batch indices")
    return permutation


def make_original_batch(inputs, labels, class_count: int) -> PairedBatch:
    """Pass-through batch with one-hot targets (a sample paired with itself)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    return PairedBatch(inputs, one_hot(labels, class_count), is_original=True)


def make_pair_batch(inputs, labels, permutation, class_count: int) -> PairedBatch:
    """Pair each sample with a partner from the same batch and average both
    the inputs and the one-hot labels elementwise."""
    inputs = np.asarray(inputs, dtype=np.float64)
    permutation = _check_permutation(permutation, inputs.shape[0])
    hot = one_hot(labels, class_count)
    mixed = 0.5 * (inputs + inputs[permutation])
    targets = 0.5 * (hot + hot[permutation])
    return PairedBatch(mixed, targets, is_original=False)


def mixup_batch(inputs, labels, permutation, lam: float, class_count: int) -> PairedBatch:
    """Convex interpolation of inputs and labels at coefficient lam."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing coefficient must be in [0, 1], got {lam}")
    inputs = np.asarray(inputs, dtype=np.float64)
    permutation = _check_permutation(permutation, inputs.shape[0])
    hot = one_hot(labels, class_count)
    mixed = lam * inputs + (1.0 - lam) * inputs[permutation]
    targets = lam * hot + (1.0 - lam) * hot[permutation]
    return PairedBatch(mixed, targets, is_original=bool(lam == 1.0))


def pls_merge(pair_target, smoothing_dist, beta: float):
    """Convex merge (1-beta) * pair_target + beta * smoothing_dist.

    beta = 0.5 is the plain average of the pair label with the smoothing
    distribution. Accepts single rows or whole batches.
    """
    if not 0.0 <= beta <= 1.0:
        raise StrategyConfigError(f"beta must be in [0, 1], got {beta}")
    pair_target = np.asarray(pair_target, dtype=np.float64)
    smoothing_dist = np.asarray(smoothing_dist, dtype=np.float64)
    return (1.0 - beta) * pair_target + beta * smoothing_dist


def build_targets(strategy: TargetStrategy, batch: PairedBatch, u_learned=None):
    """Target pair for the two-term loss.

    Returns (targets_q, targets_u): the hard-label term's targets and, when
    the strategy smooths, the smoothing term's targets (a tracked tensor for
    the learned distribution so gradients reach the smoothing head, or a
    uniform array). targets_u is None for single-term strategies.
    """
    if strategy.uses_learned and u_learned is None:
        raise StrategyConfigError(
            f"strategy {strategy.name!r} needs the learned smoothing distribution"
        )
    if not strategy.uses_learned and u_learned is not None:
        raise StrategyConfigError(
            f"strategy {strategy.name!r} does not take a learned distribution"
        )
    q = np.asarray(batch.pair_targets, dtype=np.float64)
    kind = strategy.kind
    if kind in (StrategyKind.BASELINE, StrategyKind.MIXUP, StrategyKind.PLS_NO_LEARNED):
        return q, None
    if kind in (StrategyKind.ULS, StrategyKind.PLS_UD):
        return q, np.full_like(q, 1.0 / q.shape[1])
    return q, u_learned


def alternation_schedule(strategy: TargetStrategy, step: int,
                         averaged_per_original: int = 1) -> Phase:
    """Phase of a training step.

    Alternating strategies run one original batch then `averaged_per_original`
    averaged ones (1 = strict even/odd alternation); baseline and uls only
    ever see original batches, mixup and pls-no-original only transformed ones.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    kind = strategy.kind
    if kind in (StrategyKind.BASELINE, StrategyKind.ULS):
        return Phase.ORIGINAL
    if kind in (StrategyKind.MIXUP, StrategyKind.PLS_NO_ORIGINAL):
        return Phase.AVERAGED
    cycle = 1 + max(0, int(averaged_per_original))
    return Phase.ORIGINAL if step % cycle == 0 else Phase.AVERAGED


def effective_targets(strategy: TargetStrategy, batch: PairedBatch, u_learned=None) -> np.ndarray:
    """Merged single-distribution view of the training target.

    Equals targets_q when there is no smoothing term, else the convex merge
    at the strategy's mix weight. Detached: reporting only, no gradients.
    """
    targets_q, targets_u = build_targets(strategy, batch, u_learned)
    w = strategy.mix_weight
    if targets_u is None or w == 0.0:
        return targets_q
    u = targets_u.data if isinstance(targets_u, Tensor) else np.asarray(targets_u)
    return pls_merge(targets_q, u, w)


def truth_target_masses(pair_targets, merged, mixed_only: bool = False) -> np.ndarray:
    """Per-sample mean of the merged target over that sample's truth classes.

    With mixed_only, restrict to rows whose pair label names two distinct
    classes (two 0.5 entries).
    """
    pair_targets = np.asarray(pair_targets)
    merged = np.asarray(merged)
    truth = pair_targets > 0.0
    masses = (merged * truth).sum(axis=1) / truth.sum(axis=1)
    if mixed_only:
        masses = masses[truth.sum(axis=1) == 2]
    return masses
