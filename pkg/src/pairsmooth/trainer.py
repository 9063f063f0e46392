"""Mini-batch SGD training loop over the strategy family.

The loss is the weighted two-term soft cross-entropy: the hard-label term
plus, for smoothing strategies, the smoothing-distribution term. Pairwise
strategies alternate original and pair-averaged batches on a step schedule;
original and averaged phases draw from independent seeded samplers so that
one epoch touches every training sample exactly once in its epoch-defining
phase.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import Dataset
from .model import DualHeadClassifier, predict_probs, smoothing_distribution
from .smoothing import (
    Phase,
    StrategyKind,
    TargetStrategy,
    alternation_schedule,
    build_targets,
    effective_targets,
    make_original_batch,
    make_pair_batch,
    mixup_batch,
    truth_target_masses,
)
from .tensor import log_softmax_rows, no_grad, soft_cross_entropy


class TrainingDiverged(RuntimeError):
    """Loss went non-finite or blew past the divergence threshold."""


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    strategy: TargetStrategy = field(default_factory=TargetStrategy)
    eval_every: int = 1
    # One original step followed by this many averaged steps (alternating
    # strategies only); 1 is the strict even/odd schedule.
    averaged_per_original: int = 1
    # Learning rate divides by 1/factor at 50% and 75% of the epoch budget.
    lr_decay_factor: float = 0.1
    divergence_threshold: float = 1e4

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (pairing needs two samples)")
        for name in ("learning_rate", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class EpochRecord:
    """One epoch of history.

    mean_truth_target_mass averages the merged target's mass on the true
    classes over the epoch's mixed-class pair rows (distinct-label pairs);
    it is NaN for epochs that never built such a pair, e.g. one-hot
    strategies.
    """

    epoch: int
    train_loss: float
    val_error_rate: float
    mean_truth_target_mass: float
    timestamp: float = field(default=0.0, compare=False)


class EvalResult(NamedTuple):
    error_rate: float
    winning_scores: np.ndarray
    probs: np.ndarray


class SGD:
    """Classical momentum SGD; L2 folded into the gradient.

    Update: v <- momentum * v + (g + weight_decay * p); p <- p - lr * v.
    Velocity persists across steps; parameters without a gradient are skipped.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self._velocity[i]
            if self.momentum:
                v = g if v is None else self.momentum * v + g
                self._velocity[i] = v
            else:
                v = g
            p.data = p.data - self.lr * v


def _batch_stream(rng, n, batch_size):
    """Endless batches of indices; reshuffles after each full pass."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]


def _step_loss(model, strategy, batch):
    out = model.forward(batch.inputs)
    u_learned = smoothing_distribution(out) if strategy.uses_learned else None
    targets_q, targets_u = build_targets(strategy, batch, u_learned)
    log_probs = log_softmax_rows(out.logits)
    loss = soft_cross_entropy(targets_q, log_probs)
    w = strategy.mix_weight
    if targets_u is not None and w != 0.0:
        loss = (1.0 - w) * loss + w * soft_cross_entropy(targets_u, log_probs)
    merged = effective_targets(strategy, batch, u_learned)
    return loss, truth_target_masses(batch.pair_targets, merged, mixed_only=True)


def train(model: DualHeadClassifier, train_data: Dataset, val_data: Dataset,
          config: TrainConfig):
    """Run the full schedule; returns (model, per-epoch records).

    Deterministic given the config seed and the model's own init seed:
    sampler, pairing, and mixup randomness all derive from config.seed.
    """
    strategy = config.strategy
    n = len(train_data.labels)
    k_classes = train_data.class_count
    bpp = math.ceil(n / config.batch_size)

    rng_orig, rng_avg, rng_pair, rng_mix = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4)
    )
    avg_stream = _batch_stream(rng_avg, n, config.batch_size)
    opt = SGD(model.parameters(), config.learning_rate, config.momentum,
              config.weight_decay)

    always_original = strategy.kind in (StrategyKind.BASELINE, StrategyKind.ULS)
    always_averaged = strategy.kind in (StrategyKind.MIXUP, StrategyKind.PLS_NO_ORIGINAL)
    if always_original or always_averaged:
        steps_per_epoch = bpp
    else:
        steps_per_epoch = bpp * (1 + max(0, config.averaged_per_original))
    milestones = {math.floor(config.epochs * 0.5), math.floor(config.epochs * 0.75)}

    records = []
    last_error = float("nan")
    global_step = 0
    for epoch in range(config.epochs):
        if epoch in milestones and config.lr_decay_factor != 1.0:
            opt.lr *= config.lr_decay_factor
        orig_order = rng_orig.permutation(n)
        orig_batches = iter(
            orig_order[i : i + config.batch_size] for i in range(0, n, config.batch_size)
        )
        loss_sum = 0.0
        mass_sum = 0.0
        seen = 0
        mixed_seen = 0
        for _ in range(steps_per_epoch):
            phase = alternation_schedule(strategy, global_step,
                                         config.averaged_per_original)
            if phase is Phase.ORIGINAL:
                idx = next(orig_batches)
                batch = make_original_batch(train_data.inputs[idx],
                                            train_data.labels[idx], k_classes)
            else:
                idx = next(avg_stream)
                xs, ys = train_data.inputs[idx], train_data.labels[idx]
                partner = rng_pair.permutation(len(idx))
                if strategy.kind is StrategyKind.MIXUP:
                    lam = float(rng_mix.uniform(0.0, 1.0))
                    batch = mixup_batch(xs, ys, partner, lam, k_classes)
                else:
                    batch = make_pair_batch(xs, ys, partner, k_classes)
            try:
                loss, masses = _step_loss(model, strategy, batch)
                value = loss.item()
                if not math.isfinite(value) or value > config.divergence_threshold:
                    raise TrainingDiverged(
                        f"loss {value} at epoch {epoch + 1}, batch {global_step}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"non-finite values at epoch {epoch + 1}, batch {global_step}: {exc}"
                ) from exc
            b = len(batch)
            loss_sum += value * b
            mass_sum += float(masses.sum())
            seen += b
            mixed_seen += masses.size
            global_step += 1
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            last_error = evaluate(model, val_data).error_rate
        records.append(EpochRecord(
            epoch=epoch + 1,
            train_loss=loss_sum / seen,
            val_error_rate=last_error,
            mean_truth_target_mass=mass_sum / mixed_seen if mixed_seen else float("nan"),
            timestamp=time.time(),
        ))
    return model, records


def evaluate(model: DualHeadClassifier, dataset: Dataset,
             batch_size: int = 1024) -> EvalResult:
    """Error rate plus per-sample winning scores; logit head only."""
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    chunks = []
    with no_grad():
        for i in range(0, n, batch_size):
            out = model.forward(dataset.inputs[i : i + batch_size])
            chunks.append(predict_probs(out).data)
    probs = np.concatenate(chunks, axis=0)
    predicted = probs.argmax(axis=1)
    error_rate = float(np.mean(predicted != dataset.labels))
    return EvalResult(error_rate, probs.max(axis=1), probs)


def predict_logits(model: DualHeadClassifier, inputs, batch_size: int = 1024) -> np.ndarray:
    """Raw logit rows for a matrix of inputs (calibration fitting)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    chunks = []
    with no_grad():
        for i in range(0, inputs.shape[0], batch_size):
            chunks.append(model.forward(inputs[i : i + batch_size]).logits.data)
    return np.concatenate(chunks, axis=0)
