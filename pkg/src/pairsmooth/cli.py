"""Command-line front end.

Subcommands: train, evaluate, calibrate, sweep, gen-data. A run directory
is self-describing: it holds the resolved config (config.ini), one
subdirectory per seed with metrics.csv / result.json / model.ckpt, an
aggregate.json with mean and standard deviation over seeds, and a meta.json
holding wall-clock details. Everything except meta.json is byte-reproducible
given the same config and seeds.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import math
import multiprocessing
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    apply_temperature,
    compute_ece,
    fit_temperature,
    score_histogram,
    soft_label_statistics,
    winning_scores,
)
from .config import ConfigError, ExperimentConfig
from .data import Dataset, IdxFormatError, gen_blobs, gen_digits, read_idx, split, to_csv, write_idx
from .model import DualHeadClassifier, load_checkpoint, save_checkpoint, smoothing_distribution
from .smoothing import (
    StrategyConfigError,
    StrategyKind,
    TargetStrategy,
    effective_targets,
    make_original_batch,
    make_pair_batch,
)
from .tensor import no_grad
from .trainer import TrainConfig, TrainingDiverged, evaluate, predict_logits, train

_DATASET_CACHE: dict[tuple, tuple[Dataset, Dataset]] = {}


def strategy_from_config(cfg: ExperimentConfig) -> TargetStrategy:
    try:
        kind = StrategyKind(cfg.strategy)
    except ValueError:
        valid = ", ".join(k.value for k in StrategyKind)
        raise ConfigError(f"unknown strategy {cfg.strategy!r}; valid names: {valid}")
    return TargetStrategy(kind=kind, alpha=cfg.alpha, beta=cfg.beta)


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) per the [dataset] section; memoized per config."""
    key = (cfg.dataset_kind, cfg.classes, cfg.per_class, cfg.dim, cfg.spread,
           cfg.n_train, cfg.n_test, cfg.image_size, cfg.images, cfg.labels,
           cfg.test_images, cfg.test_labels, cfg.train_limit, cfg.data_seed)
    if key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    if cfg.dataset_kind == "blobs":
        full = gen_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.spread,
                         cfg.data_seed)
        train_set, test_set = split(full, [0.8, 0.2], cfg.data_seed + 1)
    elif cfg.dataset_kind == "digits":
        train_set, test_set = gen_digits(cfg.n_train, cfg.n_test, cfg.data_seed,
                                         cfg.image_size)
    else:
        if not cfg.images or not cfg.labels:
            raise ConfigError("dataset kind 'idx' needs images= and labels= paths")
        train_set = read_idx(cfg.images, cfg.labels, name="idx-train")
        if cfg.test_images and cfg.test_labels:
            test_set = read_idx(cfg.test_images, cfg.test_labels, name="idx-test")
        else:
            train_set, test_set = split(train_set, [0.8, 0.2], cfg.data_seed + 1)
    if cfg.train_limit and train_set.n > cfg.train_limit:
        rng = np.random.default_rng(cfg.data_seed + 2)
        picks = rng.permutation(train_set.n)[: cfg.train_limit]
        train_set = train_set.subset(picks, f"{train_set.name}[:{cfg.train_limit}]")
    _DATASET_CACHE[key] = (train_set, test_set)
    return train_set, test_set


def fit_and_holdout(cfg: ExperimentConfig, train_set: Dataset):
    """Split the training pool into gradient-step data and the seeded
    held-out slice reserved for temperature fitting."""
    if cfg.split_fraction <= 0:
        return train_set, None
    f = cfg.split_fraction
    fit, holdout = split(train_set, [1.0 - f, f], cfg.data_seed + 3)
    return fit, holdout


def train_config_for_seed(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        seed=seed,
        strategy=strategy_from_config(cfg),
        eval_every=cfg.eval_every,
        averaged_per_original=cfg.averaged_per_original,
        lr_decay_factor=cfg.lr_decay_factor,
        divergence_threshold=cfg.divergence_threshold,
    )


def _write_json(path, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_metrics_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_error", "mean_truth_target_mass"])
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_error_rate),
                             repr(r.mean_truth_target_mass)])


def run_single(cfg: ExperimentConfig, seed: int, run_dir: str) -> dict:
    """Train once; write metrics.csv, result.json, model.ckpt; return the
    summary row used for aggregation."""
    train_full, test_set = load_dataset(cfg)
    fit, _ = fit_and_holdout(cfg, train_full)
    model = DualHeadClassifier(fit.dim, cfg.hidden, fit.class_count, seed=seed)
    tconf = train_config_for_seed(cfg, seed)
    model, records = train(model, fit, test_set, tconf)

    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics_csv(out / "metrics.csv", records)
    save_checkpoint(model, out / "model.ckpt")
    last = records[-1]
    summary = {
        "seed": seed,
        "strategy": tconf.strategy.name,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "epochs": cfg.epochs,
        "final_train_loss": last.train_loss,
        "final_val_error": last.val_error_rate,
        "best_val_error": min(r.val_error_rate for r in records),
        "final_mean_truth_target_mass": last.mean_truth_target_mass,
    }
    result = dict(summary)
    result["config"] = dataclasses.asdict(cfg)
    _write_json(out / "result.json", result)
    return summary


def _run_job(args) -> dict:
    return run_single(*args)


def _run_jobs(jobs, workers: int) -> list[dict]:
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(workers) as pool:
            return pool.map(_run_job, jobs)
    return [_run_job(job) for job in jobs]


def _aggregate(cfg: ExperimentConfig, summaries: list[dict]) -> dict:
    summaries = sorted(summaries, key=lambda s: s["seed"])
    errors = np.array([s["final_val_error"] for s in summaries])
    losses = np.array([s["final_train_loss"] for s in summaries])
    std = float(errors.std(ddof=1)) if errors.size > 1 else 0.0
    return {
        "strategy": summaries[0]["strategy"],
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "seeds": [s["seed"] for s in summaries],
        "mean_error": float(errors.mean()),
        "std_error": std,
        "mean_train_loss": float(losses.mean()),
        "per_seed": summaries,
    }


def _meta(started: float) -> dict:
    iso = lambda t: datetime.datetime.fromtimestamp(t, datetime.timezone.utc).isoformat()
    now = time.time()
    return {
        "started": iso(started),
        "finished": iso(now),
        "duration_sec": now - started,
        "pairsmooth_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
    }


def cmd_train(cfg: ExperimentConfig, workers: int = 1) -> int:
    started = time.time()
    strategy_from_config(cfg)  # fail fast on a bad strategy name
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_ini(out / "config.ini")
    jobs = [(cfg, seed, str(out / f"run-seed{seed}")) for seed in cfg.seeds]
    summaries = _run_jobs(jobs, workers)
    agg = _aggregate(cfg, summaries)
    _write_json(out / "aggregate.json", agg)
    _write_json(out / "meta.json", _meta(started))
    for s in agg["per_seed"]:
        print(f"seed {s['seed']}: val_error {s['final_val_error']:.4f} "
              f"train_loss {s['final_train_loss']:.4f}")
    print(f"{agg['strategy']}: mean_error {agg['mean_error']:.4f} "
          f"+/- {agg['std_error']:.4f} over {len(agg['seeds'])} seeds -> {out}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, seed: int | None = None) -> int:
    out = Path(cfg.out)
    seed = cfg.seeds[0] if seed is None else seed
    ckpt = out / f"run-seed{seed}" / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run `pairsmooth train` first")
    model = load_checkpoint(ckpt)
    _, test_set = load_dataset(cfg)
    res = evaluate(model, test_set)
    probs = res.probs
    nll = float(-np.log(np.maximum(probs[np.arange(test_set.n), test_set.labels],
                                   1e-300)).mean())
    payload = {"seed": seed, "test_error": res.error_rate, "test_nll": nll,
               "n_test": test_set.n}
    _write_json(out / f"run-seed{seed}" / "evaluate.json", payload)
    print(f"seed {seed}: test_error {res.error_rate:.4f} nll {nll:.4f} "
          f"on {test_set.n} samples")
    return 0


def _write_bins_csv(path, report) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count", "mean_confidence",
                         "accuracy", "gap"])
        for i, (count, conf, acc, gap) in enumerate(report.per_bin):
            writer.writerow([repr(float(report.bin_edges[i])),
                             repr(float(report.bin_edges[i + 1])),
                             count, repr(conf), repr(acc), repr(gap)])


def cmd_calibrate(cfg: ExperimentConfig, seed: int | None = None) -> int:
    started = time.time()
    out = Path(cfg.out)
    seed = cfg.seeds[0] if seed is None else seed
    run_dir = out / f"run-seed{seed}"
    ckpt = run_dir / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run `pairsmooth train` first")
    if cfg.split_fraction <= 0:
        raise ConfigError("calibration needs split_fraction > 0 for the held-out fit")
    model = load_checkpoint(ckpt)
    train_full, test_set = load_dataset(cfg)
    fit, holdout = fit_and_holdout(cfg, train_full)

    z_val = predict_logits(model, holdout.inputs)
    scores, preds = winning_scores(apply_temperature(z_val, 1.0))
    pre = compute_ece(scores, preds == holdout.labels, cfg.bins)
    grid = np.unique(np.concatenate([
        np.geomspace(cfg.grid_min, cfg.grid_max, cfg.grid_points), [1.0],
    ]))
    t = fit_temperature(z_val, holdout.labels, grid, cfg.bins)
    post_scores, post_preds = winning_scores(apply_temperature(z_val, t))
    post = compute_ece(post_scores, post_preds == holdout.labels, cfg.bins)
    post.temperature = t
    _write_json(run_dir / "calibration-pre.json", pre.to_dict())
    _write_json(run_dir / "calibration-post.json", post.to_dict())
    _write_bins_csv(run_dir / "calibration-pre-bins.csv", pre)
    _write_bins_csv(run_dir / "calibration-post-bins.csv", post)

    test_scores, _ = winning_scores(apply_temperature(predict_logits(model, test_set.inputs), 1.0))
    hist = score_histogram(test_scores, cfg.histogram_bin_width, cfg.histogram_floor)
    with open(run_dir / "histogram.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_start", "count"])
        for start, count in hist:
            writer.writerow([repr(float(start)), count])

    strategy = strategy_from_config(cfg)
    if strategy.uses_pairing or strategy.kind is StrategyKind.MIXUP:
        rng = np.random.default_rng(cfg.data_seed + 5)
        batch = make_pair_batch(fit.inputs, fit.labels, rng.permutation(fit.n),
                                fit.class_count)
    else:
        batch = make_original_batch(fit.inputs, fit.labels, fit.class_count)
    u_learned = None
    if strategy.uses_learned:
        with no_grad():
            u_learned = smoothing_distribution(model.forward(batch.inputs))
    merged = effective_targets(strategy, batch, u_learned)
    stats = soft_label_statistics(batch.pair_targets, merged, top_k=5,
                                  mixed_only=True)
    with open(run_dir / "softlabels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["statistic", "value"])
        writer.writerow(["sample_count", stats.sample_count])
        writer.writerow(["truth_mean", repr(stats.truth_mean)])
        for i, v in enumerate(stats.top_nontruth, start=1):
            writer.writerow([f"top_nontruth_{i}", repr(float(v))])

    _write_json(run_dir / "calibration-meta.json", _meta(started))
    print(f"seed {seed}: ece {pre.ece:.4f} -> {post.ece:.4f} at temperature {t:.4f}")
    return 0


_SWEEP_AXES = ("strategy", "alpha", "beta")


def cmd_sweep(cfg: ExperimentConfig, axis: str | None = None,
              values=None, workers: int = 1) -> int:
    started = time.time()
    axis = axis or cfg.sweep_axis
    values = list(values) if values else list(cfg.sweep_values)
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(_SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs axis values ([sweep] values = ... or --values)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_ini(out / "config.ini")

    sub_cfgs = []
    for token in values:
        if axis == "strategy":
            sub = dataclasses.replace(cfg, strategy=token)
        else:
            sub = dataclasses.replace(cfg, **{axis: float(token)})
        sub = dataclasses.replace(sub, out=str(out / f"{axis}-{token}"))
        strategy_from_config(sub)  # validate names before any training
        sub_cfgs.append((token, sub))

    jobs = []
    for _, sub in sub_cfgs:
        Path(sub.out).mkdir(parents=True, exist_ok=True)
        sub.to_ini(Path(sub.out) / "config.ini")
        jobs.extend((sub, seed, str(Path(sub.out) / f"run-seed{seed}"))
                    for seed in sub.seeds)
    summaries = _run_jobs(jobs, workers)

    aggregates = []
    i = 0
    for token, sub in sub_cfgs:
        agg = _aggregate(sub, summaries[i : i + len(sub.seeds)])
        i += len(sub.seeds)
        _write_json(Path(sub.out) / "aggregate.json", agg)
        aggregates.append((token, agg))

    if axis == "strategy" and "baseline" in values:
        ref_mean = dict(aggregates)["baseline"]["mean_error"]
    else:
        ref_mean = aggregates[0][1]["mean_error"]
    with open(out / "table.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([axis, "mean_error", "std_error", "rel_improvement_pct"])
        for token, agg in aggregates:
            rel = 0.0 if ref_mean == 0 else (ref_mean - agg["mean_error"]) / ref_mean * 100.0
            writer.writerow([token, repr(agg["mean_error"]), repr(agg["std_error"]),
                             repr(rel)])
            print(f"{axis}={token}: mean_error {agg['mean_error']:.4f} "
                  f"+/- {agg['std_error']:.4f} rel_improvement {rel:+.2f}%")
    _write_json(out / "meta.json", _meta(started))
    print(f"sweep table -> {out / 'table.csv'}")
    return 0


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    if cfg.dataset_kind == "idx":
        raise ConfigError("gen-data writes synthetic datasets; kind=idx is already on disk")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_dataset(cfg)
    written = []
    side = math.isqrt(train_set.dim)
    if side * side == train_set.dim:
        for name, ds in (("train", train_set), ("test", test_set)):
            images, labels = out / f"{name}-images.idx", out / f"{name}-labels.idx"
            write_idx(ds, images, labels)
            written += [images, labels]
    else:
        for name, ds in (("train", train_set), ("test", test_set)):
            path = out / f"{name}.csv"
            to_csv(ds, path)
            written.append(path)
    for path in written:
        print(f"wrote {path}")
    return 0


def _parse_seed_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad --seed list {text!r}; expected comma-separated ints")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_ini(args.config)
    elif args.command in ("evaluate", "calibrate") and args.out:
        echoed = Path(args.out) / "config.ini"
        if not echoed.exists():
            raise ConfigError(f"no config.ini in {args.out}; pass --config")
        cfg = ExperimentConfig.from_ini(echoed)
    else:
        cfg = ExperimentConfig()
    if args.seed:
        cfg = dataclasses.replace(cfg, seeds=_parse_seed_list(args.seed))
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pairsmooth",
        description="Pairwise label smoothing experiments: train, evaluate, "
                    "calibrate, sweep, and generate datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("train", "train one strategy across seeds and aggregate"),
        ("evaluate", "evaluate a trained checkpoint on the test split"),
        ("calibrate", "fit temperature scaling and emit calibration reports"),
        ("sweep", "train across an axis of strategies or merge weights"),
        ("gen-data", "write the configured synthetic dataset to disk"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="INI config path")
        p.add_argument("--seed", help="comma-separated seed list override")
        p.add_argument("--out", help="output directory (or run directory for "
                                     "evaluate/calibrate)")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel training processes")
        if name == "sweep":
            p.add_argument("--axis", choices=_SWEEP_AXES,
                           help="sweep axis (default from [sweep] section)")
            p.add_argument("--values",
                           help="comma-separated axis values (default from config)")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "train":
            return cmd_train(cfg, workers=args.workers)
        if args.command == "evaluate":
            seed = int(args.seed.split(",")[0]) if args.seed else None
            return cmd_evaluate(cfg, seed=seed)
        if args.command == "calibrate":
            seed = int(args.seed.split(",")[0]) if args.seed else None
            return cmd_calibrate(cfg, seed=seed)
        if args.command == "sweep":
            values = args.values.replace(",", " ").split() if args.values else None
            return cmd_sweep(cfg, axis=args.axis, values=values,
                             workers=args.workers)
        return cmd_gen_data(cfg)
    except (ConfigError, StrategyConfigError, IdxFormatError,
            TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
