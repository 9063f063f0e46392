"""Acceptance gates for the whole package.

Each test prints one PASS/FAIL line through the `acceptance` fixture:
analytic gradients against finite differences, batched label construction
against a per-sample brute-force oracle, exact degeneracy equivalences
between strategies, binned-ECE against a naive re-binning oracle,
temperature-scaling behavior, and a desk-scale five-seed reproduction of the
headline training/calibration comparisons.
"""
import dataclasses
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import finite_difference

from pairsmooth.calibration import (
    apply_temperature,
    compute_ece,
    fit_temperature,
    winning_scores,
)
from pairsmooth.cli import cmd_calibrate, cmd_sweep, cmd_train, load_dataset
from pairsmooth.config import ExperimentConfig
from pairsmooth.data import gen_blobs, split
from pairsmooth.model import (
    DualHeadClassifier,
    load_checkpoint,
    smoothing_distribution,
)
from pairsmooth.smoothing import (
    TargetStrategy,
    effective_targets,
    make_original_batch,
    make_pair_batch,
    mixup_batch,
    one_hot,
    pls_merge,
    uls_target,
)
from pairsmooth.tensor import Tensor, log_softmax_rows, soft_cross_entropy
from pairsmooth.trainer import evaluate, train, TrainConfig

ALPHAS = [0.0, 0.1, 0.2, 0.3, 1.0]
BETAS = [round(0.1 * i, 1) for i in range(11)]


# =============================================================================
# 1. analytic gradients vs central finite differences
# =============================================================================

def _plain_loss(model, inputs, targets):
    logp = log_softmax_rows(model.forward(inputs).logits)
    return soft_cross_entropy(Tensor(targets), logp)


def _two_term_loss(model, inputs, pair_targets, beta):
    out = model.forward(inputs)
    logp = log_softmax_rows(out.logits)
    u = smoothing_distribution(out)
    return ((1.0 - beta) * soft_cross_entropy(Tensor(pair_targets), logp)
            + beta * soft_cross_entropy(u, logp))


def _kink_safe_inputs(rng, model, batch, margin=1e-3, tries=50):
    """Inputs whose trunk pre-activations sit away from the ReLU kink, so
    central differences see a locally smooth function."""
    for _ in range(tries):
        x = rng.uniform(-1.0, 1.0, size=(batch, model.input_dim))
        s, safe = x, True
        for w, b in model.trunk:
            pre = s @ w.data.T + b.data
            if np.abs(pre).min() <= margin:
                safe = False
                break
            s = np.maximum(pre, 0.0)
        if safe:
            return x
    raise AssertionError("could not sample kink-safe inputs")


def test_criterion_1_gradients_match_finite_differences(acceptance):
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    worst = 0.0
    models = 0
    for case in range(100):
        d = int(rng.integers(2, 17))
        m = int(rng.integers(2, 17))
        k = int(rng.integers(2, 7))
        b = int(rng.integers(2, 5))
        hidden = (m, m) if case % 5 == 0 else (m,)
        model = DualHeadClassifier(d, hidden, k, seed=1000 + case)
        x = _kink_safe_inputs(rng, model, b)
        hot = one_hot(rng.integers(0, k, size=b), k)
        q_soft = rng.dirichlet(np.ones(k), size=b)
        pair_q = 0.5 * (hot + hot[rng.permutation(b)])
        beta = float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9]))
        losses = (
            lambda: _plain_loss(model, x, q_soft),
            lambda: _two_term_loss(model, x, pair_q, beta),
        )
        for loss_fn in losses:
            for p in model.parameters():
                p.grad = None
            loss_fn().backward()
            for name, p in model.named_parameters():
                analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
                fd = finite_difference(lambda _: loss_fn().item(), p.data)
                # relative gate 1e-5 with a 1e-9 absolute floor for entries
                # whose true gradient sits at the finite-difference noise level
                used = np.max(np.abs(analytic - fd) / (1e-5 * np.abs(fd) + 1e-9))
                worst = max(worst, float(used))
                assert np.allclose(analytic, fd, rtol=1e-5, atol=1e-9), (
                    f"case {case} param {name}: tolerance exceeded {used:.2f}x"
                )
        models += 1
    elapsed = time.perf_counter() - started
    passed = models == 100 and elapsed < 60.0
    acceptance.add(1, "gradient check", passed,
                   f"{models} models, both losses, worst grad diff at "
                   f"{worst:.2f}x of the 1e-5 rel / 1e-9 abs budget, "
                   f"{elapsed:.1f}s")
    assert passed


# =============================================================================
# 2. batched label construction vs per-sample brute force
# =============================================================================

def _oracle_uls(label, k, alpha):
    return [(1.0 - alpha) * (1.0 if c == label else 0.0) + alpha * (1.0 / k)
            for c in range(k)]


def _oracle_pair(label_i, label_j, k):
    return [((1.0 if c == label_i else 0.0) + (1.0 if c == label_j else 0.0)) / 2.0
            for c in range(k)]


def _oracle_merge(q_row, u_row, beta):
    return [(1.0 - beta) * q + beta * u for q, u in zip(q_row, u_row)]


def test_criterion_2_label_construction_matches_bruteforce(acceptance):
    rng = np.random.default_rng(7)
    rows_per_batch = 10
    worst = 0.0
    samples = 0
    for case in range(100):
        k = int(rng.integers(2, 11))
        alpha = ALPHAS[case % len(ALPHAS)]
        beta = BETAS[case % len(BETAS)]
        labels = rng.integers(0, k, size=rows_per_batch)
        if case % 10 == 0:
            labels[:] = labels[0]  # force same-class pairs
        perm = (np.arange(rows_per_batch) if case % 4 == 0  # self-pairs
                else rng.permutation(rows_per_batch))
        x = rng.uniform(0.0, 1.0, size=(rows_per_batch, 3))
        u = rng.dirichlet(np.ones(k), size=rows_per_batch)

        batch = make_pair_batch(x, labels, perm, k)
        merged = pls_merge(batch.pair_targets, u, beta)
        for r in range(rows_per_batch):
            diffs = [
                np.abs(uls_target(int(labels[r]), k, alpha)
                       - np.array(_oracle_uls(int(labels[r]), k, alpha))).max(),
                np.abs(batch.pair_targets[r]
                       - np.array(_oracle_pair(labels[r], labels[perm[r]], k))).max(),
                np.abs(batch.inputs[r] - 0.5 * (x[r] + x[perm[r]])).max(),
                np.abs(merged[r]
                       - np.array(_oracle_merge(batch.pair_targets[r], u[r], beta))).max(),
            ]
            worst = max(worst, max(float(v) for v in diffs))
            samples += 1
    passed = samples == 1000 and worst <= 1e-12
    acceptance.add(2, "label-construction oracle", passed,
                   f"{samples} samples, alphas {ALPHAS}, betas 0..1, "
                   f"max |diff| {worst:.2e}")
    assert passed


# =============================================================================
# 3. exact degeneracy equivalences between strategies
# =============================================================================

def test_criterion_3_degeneracy_equivalences(acceptance):
    rng = np.random.default_rng(11)

    # (a) zero-weight uniform smoothing trains bit-identically to baseline
    data = gen_blobs(classes=4, per_class=80, dim=8, spread=0.05, seed=21)
    tr, val = split(data, [0.8, 0.2], seed=22)
    trajectories = {}
    for kind in ("baseline", "uls"):
        model = DualHeadClassifier(tr.dim, (16,), 4, seed=3)
        cfg = TrainConfig(batch_size=32, epochs=3, learning_rate=0.1,
                          momentum=0.9, weight_decay=1e-4, seed=5,
                          strategy=TargetStrategy(kind=kind, alpha=0.0))
        model, records = train(model, tr, val, cfg)
        trajectories[kind] = (
            b"".join(p.data.tobytes() for p in model.parameters()),
            [(r.train_loss, r.val_error_rate) for r in records],
        )
    a_ok = trajectories["baseline"] == trajectories["uls"]

    # (b) mixup at lambda=0.5 builds the same batch as plain pair averaging
    b_ok = True
    for _ in range(100):
        n, k = int(rng.integers(2, 30)), int(rng.integers(2, 8))
        x = rng.normal(size=(n, 5))
        y = rng.integers(0, k, size=n)
        perm = rng.permutation(n)
        mix = mixup_batch(x, y, perm, 0.5, k)
        pair = make_pair_batch(x, y, perm, k)
        b_ok &= (np.array_equal(mix.inputs, pair.inputs)
                 and np.array_equal(mix.pair_targets, pair.pair_targets))

    # (c) uniform-merge targets on original batches equal the one-knob
    #     uniform-smoothing formula bit for bit at the same weight
    c_ok = True
    for alpha in ALPHAS:
        for _ in range(40):
            k = int(rng.integers(2, 9))
            y = rng.integers(0, k, size=12)
            batch = make_original_batch(rng.normal(size=(12, 4)), y, k)
            ud = effective_targets(TargetStrategy(kind="pls-ud", alpha=alpha), batch)
            rows = np.stack([uls_target(int(c), k, alpha) for c in y])
            c_ok &= np.array_equal(ud, rows)

    passed = a_ok and b_ok and c_ok
    acceptance.add(3, "degeneracy equivalences", passed,
                   f"zero-alpha trajectory bitwise: {a_ok}; mixup(0.5) == pair "
                   f"batch: {b_ok}; uniform-merge == one-knob smoothing: {c_ok}")
    assert passed


# =============================================================================
# 4. binned ECE vs a naive per-sample re-binning oracle
# =============================================================================

def _ece_oracle(scores, correct, bins):
    """Scan each sample against the bin edges one by one, then re-accumulate
    the weighted reliability gap from scratch."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    count = [0] * bins
    conf_sum = [0.0] * bins
    hit_sum = [0.0] * bins
    for s, c in zip(scores, correct):
        for i in range(bins):
            lo, hi = edges[i], edges[i + 1]
            if (i == 0 and lo <= s <= hi) or (i > 0 and lo < s <= hi):
                count[i] += 1
                conf_sum[i] += float(s)
                hit_sum[i] += float(bool(c))
                break
    n = len(scores)
    ece = 0.0
    for i in range(bins):
        if count[i]:
            ece += (count[i] / n) * abs(hit_sum[i] / count[i] - conf_sum[i] / count[i])
    return ece, count


def test_criterion_4_ece_matches_oracle(acceptance):
    rng = np.random.default_rng(17)
    worst = 0.0
    sets = 0
    for _ in range(1000):
        bins = int(rng.choice([1, 2, 5, 10, 15, 20]))
        n = int(rng.integers(1, 300))
        scores = rng.uniform(0.0, 1.0, size=n)
        edges = np.linspace(0.0, 1.0, bins + 1)
        snap = rng.uniform(size=n) < 0.2  # exercise exact-edge assignment
        scores[snap] = edges[rng.integers(0, bins + 1, size=int(snap.sum()))]
        correct = rng.uniform(size=n) < 0.6
        report = compute_ece(scores, correct, bins)
        ece_o, counts_o = _ece_oracle(scores, correct, bins)
        assert [c for c, *_ in report.per_bin] == counts_o
        worst = max(worst, abs(report.ece - ece_o))
        sets += 1
    oracle_ok = sets == 1000 and worst <= 1e-12

    rng = np.random.default_rng(18)
    scores = rng.uniform(0.0, 1.0, size=10000)
    correct = rng.uniform(size=10000) < scores
    calibrated_ece = compute_ece(scores, correct, bins=15).ece
    calibrated_ok = calibrated_ece < 0.02

    passed = oracle_ok and calibrated_ok
    acceptance.add(4, "ece oracle", passed,
                   f"{sets} random sets, max |diff| {worst:.2e}; perfectly "
                   f"calibrated N=10000 ece {calibrated_ece:.4f} < 0.02")
    assert passed


# =============================================================================
# 5. temperature scaling: argmax invariance + fixing overconfidence
# =============================================================================

def test_criterion_5_temperature_properties(acceptance):
    rng = np.random.default_rng(23)
    z = rng.normal(size=(1000, 10)) * rng.uniform(0.5, 2.0, size=(1000, 1))
    base = z.argmax(axis=1)
    argmax_ok = all(
        np.array_equal(apply_temperature(z, t).argmax(axis=1), base)
        for t in (0.1, 0.5, 1.0, 2.0, 5.0)
    )

    posterior = rng.dirichlet(np.full(10, 2.0), size=4000)
    labels = np.array([rng.choice(10, p=row) for row in posterior])
    logits = 4.0 * np.log(posterior)  # overconfident by construction
    t = fit_temperature(logits, labels)
    ece = {}
    for tt in (t, 1.0):
        scores, preds = winning_scores(apply_temperature(logits, tt))
        ece[tt] = compute_ece(scores, preds == labels, 15).ece
    fit_ok = t != 1.0 and ece[t] < ece[1.0]

    passed = argmax_ok and fit_ok
    acceptance.add(5, "temperature scaling", passed,
                   f"argmax invariant on 1000 rows x 5 temperatures: {argmax_ok}; "
                   f"overconfident fit t={t:.3f}, ece {ece[1.0]:.4f} -> {ece[t]:.4f}")
    assert passed


# =============================================================================
# 6 + 8. desk-scale five-seed reproduction and its calibration pipeline
# =============================================================================

DESK_STRATEGIES = ("baseline", "uls", "pls")


def _desk_dataset_fields() -> dict:
    """Real MNIST when PAIRSMOOTH_MNIST_DIR holds the canonical IDX files
    (training capped to a seeded 10k subset), else the bundled synthetic
    digit task at the same scale."""
    mnist = os.environ.get("PAIRSMOOTH_MNIST_DIR")
    if mnist:
        d = Path(mnist)
        names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
        if all((d / n).exists() for n in names):
            return dict(dataset_kind="idx", images=str(d / names[0]),
                        labels=str(d / names[1]), test_images=str(d / names[2]),
                        test_labels=str(d / names[3]), train_limit=10000)
        print(f"PAIRSMOOTH_MNIST_DIR={mnist} lacks the IDX files; "
              "using the synthetic digit task")
    return dict(dataset_kind="digits", n_train=10000, n_test=2000)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Train baseline / uniform smoothing (alpha=0.1) / pairwise smoothing
    (beta=0.5) on the 10k-sample digit task, 5 seeds x 30 epochs each."""
    root = tmp_path_factory.mktemp("desk")
    base = ExperimentConfig(
        data_seed=7, hidden=(256, 256), batch_size=128, epochs=30,
        learning_rate=0.1, momentum=0.9, weight_decay=1e-4, alpha=0.1,
        beta=0.5, seeds=(0, 1, 2, 3, 4), split_fraction=0.1, out="unset",
        **_desk_dataset_fields(),
    )
    runs = {}
    for name in DESK_STRATEGIES:
        cfg = dataclasses.replace(base, strategy=name, out=str(root / name))
        started = time.perf_counter()
        assert cmd_train(cfg, workers=1) == 0
        elapsed = time.perf_counter() - started
        agg = json.loads((root / name / "aggregate.json").read_text())
        runs[name] = {"cfg": cfg, "out": root / name, "agg": agg,
                      "elapsed": elapsed}
    return runs


def _pooled_winning_scores(run):
    _, test_set = load_dataset(run["cfg"])
    chunks = []
    for seed in run["cfg"].seeds:
        model = load_checkpoint(run["out"] / f"run-seed{seed}" / "model.ckpt")
        chunks.append(evaluate(model, test_set).winning_scores)
    return np.concatenate(chunks)


def test_criterion_6_desk_scale_reproduction(acceptance, desk_runs):
    base, uls, pls = (desk_runs[k] for k in DESK_STRATEGIES)
    k_classes, beta = 10, pls["cfg"].beta

    # (a) accuracy parity: mean error within 0.2pp and per-seed wins
    base_errors = [s["final_val_error"] for s in base["agg"]["per_seed"]]
    pls_errors = [s["final_val_error"] for s in pls["agg"]["per_seed"]]
    wins = sum(p < b for p, b in zip(pls_errors, base_errors))
    a_ok = (pls["agg"]["mean_error"] <= base["agg"]["mean_error"] + 0.002
            and wins >= 3)

    # (b) smoothing keeps terminal training loss above the baseline's
    b_ok = pls["agg"]["mean_train_loss"] > base["agg"]["mean_train_loss"]

    # (c) confidence ordering of pooled winning scores, and top-bin mass
    scores = {name: _pooled_winning_scores(run) for name, run in desk_runs.items()}
    medians = {name: float(np.median(s)) for name, s in scores.items()}
    hi_mass = {name: float(np.mean(s >= 0.9)) for name, s in scores.items()}
    c_ok = (medians["pls"] < medians["uls"] < medians["baseline"]
            and hi_mass["pls"] < hi_mass["uls"])

    # (d) truth mass on mixed pairs: inside the convex band and below the
    #     bound set by the sigmoid-softmax ceiling e/(e+K-1)
    masses = [s["final_mean_truth_target_mass"] for s in pls["agg"]["per_seed"]]
    mass_mean = float(np.mean(masses))
    ceiling = 0.5 + beta * math.e / (math.e + k_classes - 1)
    d_ok = 0.25 <= mass_mean <= 0.75 and mass_mean < ceiling

    per_seed_time = max(run["elapsed"] / 5 for run in desk_runs.values())
    time_ok = per_seed_time < 900.0

    passed = a_ok and b_ok and c_ok and d_ok and time_ok
    acceptance.add(
        6, "desk-scale reproduction", passed,
        f"(a) err pls {pls['agg']['mean_error']:.4f} vs base "
        f"{base['agg']['mean_error']:.4f}, wins {wins}/5: {a_ok}; "
        f"(b) train loss {pls['agg']['mean_train_loss']:.3f} > "
        f"{base['agg']['mean_train_loss']:.3f}: {b_ok}; "
        f"(c) medians pls {medians['pls']:.3f} < uls {medians['uls']:.3f} < "
        f"base {medians['baseline']:.3f}, hi-bin {hi_mass['pls']:.3f} < "
        f"{hi_mass['uls']:.3f}: {c_ok}; "
        f"(d) truth mass {mass_mean:.3f} in [0.25,0.75] and < {ceiling:.3f}: "
        f"{d_ok}; max {per_seed_time:.0f}s/seed")
    assert passed


# =============================================================================
# 7. ablation sweep over strategy variants
# =============================================================================

def test_criterion_7_ablation_sweep(acceptance, tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    cfg = ExperimentConfig(
        dataset_kind="digits", n_train=2500, n_test=800, data_seed=7,
        hidden=(64,), batch_size=128, epochs=8, learning_rate=0.1,
        momentum=0.9, weight_decay=1e-4, strategy="pls", alpha=0.1, beta=0.5,
        seeds=(0, 1, 2, 3, 4), split_fraction=0.1, out=str(root / "variants"),
    )
    variants = ["pls", "pls-no-learned", "pls-no-original", "pls-ud"]
    rc_a = cmd_sweep(cfg, axis="strategy", values=variants, workers=1)

    ud = dataclasses.replace(cfg, strategy="pls-ud", out=str(root / "ud-weights"))
    rc_b = cmd_sweep(ud, axis="alpha", values=["0.1", "0.2", "0.3"], workers=1)

    tables_ok = rc_a == 0 and rc_b == 0
    aggs = {}
    if tables_ok:
        table = (root / "variants" / "table.csv").read_text().splitlines()
        tables_ok &= {line.split(",")[0] for line in table[1:]} == set(variants)
        ud_table = (root / "ud-weights" / "table.csv").read_text().splitlines()
        tables_ok &= len(ud_table) == 4
        for v in variants:
            aggs[v] = json.loads(
                (root / "variants" / f"strategy-{v}" / "aggregate.json").read_text())

    no_orig_wins = worst_is_no_original = 0
    direction_ok = False
    if tables_ok:
        pls_errors = [s["final_val_error"] for s in aggs["pls"]["per_seed"]]
        no_orig_errors = [s["final_val_error"]
                          for s in aggs["pls-no-original"]["per_seed"]]
        no_orig_wins = sum(n >= p for n, p in zip(no_orig_errors, pls_errors))
        direction_ok = no_orig_wins >= 3
        means = {v: aggs[v]["mean_error"] for v in variants}
        worst_is_no_original = max(means, key=means.get) == "pls-no-original"

    passed = tables_ok and direction_ok
    acceptance.add(
        7, "ablation sweep", passed,
        f"variant + merge-weight tables emitted: {tables_ok}; dropping "
        f"original batches hurts in {no_orig_wins}/5 seeds; worst variant is "
        f"pls-no-original: {worst_is_no_original} (reported, not gated)")
    assert passed


# =============================================================================
# 8. calibration pipeline end to end on the desk models
# =============================================================================

def _top_bin_fraction(report: dict, lo_edge: float) -> float:
    total = sum(b["count"] for b in report["per_bin"])
    top = sum(b["count"] for edge, b in zip(report["bin_edges"], report["per_bin"])
              if edge >= lo_edge)
    return top / total


def test_criterion_8_calibration_pipeline(acceptance, desk_runs):
    reports = {}
    for name in ("baseline", "pls"):
        run = desk_runs[name]
        assert cmd_calibrate(run["cfg"]) == 0
        seed_dir = run["out"] / "run-seed0"
        reports[name] = {
            "pre": json.loads((seed_dir / "calibration-pre.json").read_text()),
            "post": json.loads((seed_dir / "calibration-post.json").read_text()),
        }

    pre, post = reports["pls"]["pre"]["ece"], reports["pls"]["post"]["ece"]
    fit_ok = post <= pre + 1e-12

    # 0.9 falls inside bin 13 of 15; compare mass in the bins at and above
    # the 13/15 edge, where both strategies' overconfident tail lives
    edge = 13.0 / 15.0
    pls_top = _top_bin_fraction(reports["pls"]["pre"], edge)
    base_top = _top_bin_fraction(reports["baseline"]["pre"], edge)
    shape_ok = pls_top < base_top

    passed = fit_ok and shape_ok
    acceptance.add(
        8, "calibration pipeline", passed,
        f"pls ece {pre:.4f} -> {post:.4f} at t="
        f"{reports['pls']['post']['temperature']:.3f}: {fit_ok}; top-bin mass "
        f"pls {pls_top:.3f} < baseline {base_top:.3f}: {shape_ok}")
    assert passed
