"""Experiment configuration: a flat INI file with one section per module.

Every field has a default, so an empty file is a valid config; unknown
sections or keys are rejected. Parsing then serializing then parsing again
yields an identical config, which keeps run directories self-describing.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

__all__ = ["ConfigError", "ExperimentConfig"]


class ConfigError(ValueError):
    """Bad experiment config: unknown key, bad value, or missing file."""


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(tok for tok in text.replace(",", " ").split())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    """All knobs for one experiment; see SCHEMA for the section layout."""

    # [dataset]
    dataset_kind: str = "blobs"
    classes: int = 4
    per_class: int = 250
    dim: int = 16
    spread: float = 0.08
    n_train: int = 10000
    n_test: int = 2000
    image_size: int = 28
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_limit: int = 0
    data_seed: int = 7
    # [model]
    hidden: tuple[int, ...] = (256, 256)
    # [train]
    batch_size: int = 128
    epochs: int = 30
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_every: int = 1
    averaged_per_original: int = 1
    lr_decay_factor: float = 0.1
    divergence_threshold: float = 1e4
    # [strategy]
    strategy: str = "baseline"
    alpha: float = 0.1
    beta: float = 0.5
    # [calibration]
    bins: int = 15
    split_fraction: float = 0.1
    grid_min: float = 0.05
    grid_max: float = 5.0
    grid_points: int = 50
    histogram_bin_width: float = 0.1
    histogram_floor: float = 0.1
    # [sweep]
    sweep_axis: str = "strategy"
    sweep_values: tuple[str, ...] = ()
    # [run]
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs/default"

    def __post_init__(self):
        if self.dataset_kind not in ("blobs", "digits", "idx"):
            raise ConfigError(
                f"dataset kind must be blobs, digits, or idx, got {self.dataset_kind!r}"
            )
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.hidden:
            raise ConfigError("need at least one hidden layer width")
        if not 0 <= self.split_fraction < 1:
            raise ConfigError(f"split_fraction must be in [0, 1), got {self.split_fraction}")

    @classmethod
    def from_ini(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        values = {}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(
                    f"unknown section [{section}]; valid: {', '.join(SCHEMA)}"
                )
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(
                        f"unknown key '{key}' in [{section}]; "
                        f"valid: {', '.join(SCHEMA[section])}"
                    )
                attr, parse = SCHEMA[section][key]
                try:
                    values[attr] = parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
        return cls(**values)

    def to_ini(self, path=None) -> str:
        parser = configparser.ConfigParser()
        by_attr = {f.name: f for f in fields(self)}
        for section, keys in SCHEMA.items():
            parser.add_section(section)
            for key, (attr, _) in keys.items():
                parser.set(section, key, _fmt(getattr(self, attr)))
                by_attr.pop(attr, None)
        assert not by_attr, f"fields missing from SCHEMA: {sorted(by_attr)}"
        buf = io.StringIO()
        parser.write(buf)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text


# section -> ini key -> (dataclass attribute, parser)
SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "kind": ("dataset_kind", str),
        "classes": ("classes", int),
        "per_class": ("per_class", int),
        "dim": ("dim", int),
        "spread": ("spread", float),
        "n_train": ("n_train", int),
        "n_test": ("n_test", int),
        "image_size": ("image_size", int),
        "images": ("images", str),
        "labels": ("labels", str),
        "test_images": ("test_images", str),
        "test_labels": ("test_labels", str),
        "train_limit": ("train_limit", int),
        "data_seed": ("data_seed", int),
    },
    "model": {
        "hidden": ("hidden", _int_list),
    },
    "train": {
        "batch_size": ("batch_size", int),
        "epochs": ("epochs", int),
        "learning_rate": ("learning_rate", float),
        "momentum": ("momentum", float),
        "weight_decay": ("weight_decay", float),
        "eval_every": ("eval_every", int),
        "averaged_per_original": ("averaged_per_original", int),
        "lr_decay_factor": ("lr_decay_factor", float),
        "divergence_threshold": ("divergence_threshold", float),
    },
    "strategy": {
        "kind": ("strategy", str),
        "alpha": ("alpha", float),
        "beta": ("beta", float),
    },
    "calibration": {
        "bins": ("bins", int),
        "split_fraction": ("split_fraction", float),
        "grid_min": ("grid_min", float),
        "grid_max": ("grid_max", float),
        "grid_points": ("grid_points", int),
        "histogram_bin_width": ("histogram_bin_width", float),
        "histogram_floor": ("histogram_floor", float),
    },
    "sweep": {
        "axis": ("sweep_axis", str),
        "values": ("sweep_values", _str_list),
    },
    "run": {
        "seeds": ("seeds", _int_list),
        "out": ("out", str),
    },
}
