"""Run configuration: one JSON document covering network, optimizers, and
data, with strict key checking and per-purpose seed fan-out.

Reference defaults: weight SGD at 0.025 (search) or 0.1 with 0.97 per-epoch
decay (final training), momentum 0.9, weight decay 3e-4, batch 64, 50/150
epochs; coefficient updates at 3e-4 with weight decay 1e-3.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .genotype import atrous_free_mask
from .network import NetworkConfig
from .optim import ArchOptConfig, WeightOptConfig
from .search_space import NAME_TO_KIND, OPERATOR_NAMES
from .data import SplitSpec


class ConfigError(ValueError):
    """Configuration file or override is invalid."""


def fanout_seed(seed: int, label: str) -> int:
    """Stable named sub-seed so component streams are independent."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    per_class: int = 64
    size: Optional[int] = None  # defaults to the network input size


@dataclass
class ImageDirSpec:
    root: str = ""


@dataclass
class DataConfig:
    source: Any = field(default_factory=SyntheticSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: bool = True  # horizontal flip during final training only


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    out_dir: str = "runs/out"
    num_runs: int = 3  # independent seeded runs behind every mean +/- std
    network: NetworkConfig = field(default_factory=NetworkConfig)
    search: WeightOptConfig = field(default_factory=WeightOptConfig.search_defaults)
    train: WeightOptConfig = field(default_factory=WeightOptConfig.train_defaults)
    arch: ArchOptConfig = field(default_factory=ArchOptConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.num_runs < 1:
            raise ConfigError("num_runs must be at least 1")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def sub_seed(self, label: str) -> int:
        return fanout_seed(self.seed, label)


_SECTION_FIELDS = {
    "network": ("num_cells", "init_channels", "num_classes", "reduce_positions",
                "input_size", "operators"),
    "search": ("lr0", "momentum", "weight_decay", "epochs", "schedule", "decay",
               "batch_size", "grad_clip"),
    "train": ("lr0", "momentum", "weight_decay", "epochs", "schedule", "decay",
              "batch_size", "grad_clip"),
    "arch": ("lr", "weight_decay", "beta1", "beta2", "eps", "on_train_loss"),
    "data": ("source", "split", "augment"),
}
_TOP_FIELDS = ("seed", "precision", "out_dir", "num_runs") + tuple(_SECTION_FIELDS)


def _check_keys(mapping: dict, allowed, where: str):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _network_from(raw: dict) -> NetworkConfig:
    _check_keys(raw, _SECTION_FIELDS["network"], "network")
    kwargs = {k: raw[k] for k in ("num_cells", "init_channels", "num_classes",
                                  "input_size") if k in raw}
    if raw.get("reduce_positions") is not None:
        kwargs["reduce_positions"] = tuple(raw["reduce_positions"])
    if raw.get("operators") is not None:
        try:
            kwargs["operator_mask"] = tuple(NAME_TO_KIND[n] for n in raw["operators"])
        except KeyError as exc:
            raise ConfigError(f"network.operators names unknown operator {exc}") from None
    try:
        return NetworkConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"network: {exc}") from None


def _weight_opt_from(raw: dict, defaults: WeightOptConfig, where: str) -> WeightOptConfig:
    _check_keys(raw, _SECTION_FIELDS[where], where)
    kwargs = {
        "lr0": defaults.lr0, "momentum": defaults.momentum,
        "weight_decay": defaults.weight_decay, "epochs": defaults.epochs,
        "schedule": defaults.schedule, "decay": defaults.decay,
        "batch_size": defaults.batch_size, "grad_clip": defaults.grad_clip,
    }
    kwargs.update(raw)
    try:
        return WeightOptConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _arch_from(raw: dict) -> ArchOptConfig:
    _check_keys(raw, _SECTION_FIELDS["arch"], "arch")
    try:
        return ArchOptConfig(**raw)
    except ValueError as exc:
        raise ConfigError(f"arch: {exc}") from None


def _data_from(raw: dict) -> DataConfig:
    _check_keys(raw, _SECTION_FIELDS["data"], "data")
    cfg = DataConfig()
    if "source" in raw:
        src = dict(raw["source"])
        kind = src.pop("kind", None)
        if kind == "synthetic":
            _check_keys(src, ("num_classes", "per_class", "size"), "data.source")
            cfg.source = SyntheticSpec(**src)
        elif kind == "image_dir":
            _check_keys(src, ("root",), "data.source")
            if not src.get("root"):
                raise ConfigError("data.source.root is required for image_dir sources")
            cfg.source = ImageDirSpec(**src)
        else:
            raise ConfigError(f"data.source.kind must be 'synthetic' or 'image_dir', got {kind!r}")
    if "split" in raw:
        sp = dict(raw["split"])
        _check_keys(sp, ("kind", "ratio"), "data.split")
        try:
            cfg.split = SplitSpec(**sp)
        except ValueError as exc:
            raise ConfigError(f"data.split: {exc}") from None
    if "augment" in raw:
        cfg.augment = bool(raw["augment"])
    return cfg


def config_from_dict(raw: dict) -> RunConfig:
    _check_keys(raw, _TOP_FIELDS, "config")
    cfg = RunConfig(
        seed=int(raw.get("seed", 0)),
        precision=raw.get("precision", "f32"),
        out_dir=raw.get("out_dir", "runs/out"),
        num_runs=int(raw.get("num_runs", 3)),
    )
    if "network" in raw:
        cfg.network = _network_from(raw["network"])
    if "search" in raw:
        cfg.search = _weight_opt_from(raw["search"], WeightOptConfig.search_defaults(), "search")
    if "train" in raw:
        cfg.train = _weight_opt_from(raw["train"], WeightOptConfig.train_defaults(), "train")
    if "arch" in raw:
        cfg.arch = _arch_from(raw["arch"])
    if "data" in raw:
        cfg.data = _data_from(raw["data"])
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    """Fully resolved plain dict, as embedded in run manifests."""
    if isinstance(cfg.data.source, SyntheticSpec):
        source = {"kind": "synthetic", "num_classes": cfg.data.source.num_classes,
                  "per_class": cfg.data.source.per_class,
                  "size": cfg.data.source.size or cfg.network.input_size}
    else:
        source = {"kind": "image_dir", "root": cfg.data.source.root}
    return {
        "seed": cfg.seed,
        "precision": cfg.precision,
        "out_dir": cfg.out_dir,
        "num_runs": cfg.num_runs,
        "network": {
            "num_cells": cfg.network.num_cells,
            "init_channels": cfg.network.init_channels,
            "num_classes": cfg.network.num_classes,
            "reduce_positions": list(cfg.network.reduce_positions),
            "input_size": cfg.network.input_size,
            "operators": [OPERATOR_NAMES[k] for k in cfg.network.operator_mask],
        },
        "search": _weight_opt_dict(cfg.search),
        "train": _weight_opt_dict(cfg.train),
        "arch": {
            "lr": cfg.arch.lr, "weight_decay": cfg.arch.weight_decay,
            "beta1": cfg.arch.beta1, "beta2": cfg.arch.beta2, "eps": cfg.arch.eps,
            "on_train_loss": cfg.arch.on_train_loss,
        },
        "data": {
            "source": source,
            "split": {"kind": cfg.data.split.kind, "ratio": cfg.data.split.ratio},
            "augment": cfg.data.augment,
        },
    }


def _weight_opt_dict(w: WeightOptConfig) -> dict:
    return {"lr0": w.lr0, "momentum": w.momentum, "weight_decay": w.weight_decay,
            "epochs": w.epochs, "schedule": w.schedule, "decay": w.decay,
            "batch_size": w.batch_size, "grad_clip": w.grad_clip}


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` assignments onto a raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, _, value = item.partition("=")
        keys = path.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty key component")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-section value")
        node[keys[-1]] = _parse_override_value(value.strip())
    return raw


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None,
                **cli_values) -> RunConfig:
    """Build a RunConfig from an optional JSON file, ``--set`` overrides, and
    direct CLI values (seed, out_dir, precision, num_runs, exclude_atrous)."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    apply_overrides(raw, overrides or [])
    for key in ("seed", "out_dir", "precision", "num_runs"):
        if cli_values.get(key) is not None:
            raw[key] = cli_values[key]
    if cli_values.get("exclude_atrous"):
        raw.setdefault("network", {})["operators"] = [
            OPERATOR_NAMES[k] for k in atrous_free_mask()
        ]
    return config_from_dict(raw)
