"""Flat ``key = value`` run configs with dotted keys; CLI flags override file values."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

TRAIN_DEFAULTS = {
    "arch": None,
    "dataset": None,
    "out": None,
    "cache_dir": None,
    "epochs": 10,
    "lr": 1e-3,
    "batch_size": 64,
    "seed": 0,
    "subset_size": None,
    "data_seed": 0,
    "num_classes": None,
    "cnn_features": "flatten",
}

INVERT_DEFAULTS = {
    "classifier": None,
    "out": None,
    "steps": 2000,
    "batch_size": 32,
    "lr": 1e-4,
    "seed": 0,
    "mode": "one_hot_target",
    "smoothing": 0.01,
    "clip_norm": 5.0,
    "log_every": 10,
    "checkpoint_every": 500,
    "latent_dim": 64,
    "base_channels": 64,
    "resume": False,
    "weights.alpha": 1.0,
    "weights.alpha_pert": 1.0,
    "weights.beta": 1.0,
    "weights.beta_pert": 1.0,
    "weights.gamma": 0.1,
    "weights.delta": 0.1,
    "weights.eta1": 1e-4,
    "weights.eta2": 1.0,
    "weights.eta3": 1e-2,
    "pert.kind": "gaussian",
    "pert.magnitude": 0.05,
}

EVALUATE_DEFAULTS = {
    "generator": None,
    "out": None,
    "cache_dir": None,
    "per_class": 64,
    "match_scope": "class",
    "candidate_cap": None,
    "grid_per_class": 5,
    "classes": None,
    "seed": 0,
    "ssim.window": 7,
    "ssim.sigma": 1.5,
    "ssim.k1": 0.01,
    "ssim.k2": 0.03,
}

BENCHMARK_DEFAULTS = {
    "cells": "mnist:mlp,mnist:vit,mnist:cnn,fashionmnist:mlp,fashionmnist:vit,fashionmnist:cnn,"
    "svhn:mlp,svhn:vit,svhn:cnn,cifar10:mlp,cifar10:vit,cifar10:cnn",
    "out": None,
    "cache_dir": None,
    "master_seed": 0,
    "workers": 1,
    "epochs": 15,
    "subset_size": 200,
    "steps": 2000,
    "batch_size": 32,
    "per_class": 64,
    "candidate_cap": 2000,
    "grid_per_class": 5,
    "match_scope": "class",
}

# alternative spellings accepted on the command line / in files
ALIASES = {"weights.eta_1": "weights.eta1", "weights.eta_2": "weights.eta2", "weights.eta_3": "weights.eta3"}


def normalize_key(key: str) -> str:
    key = key.strip().lstrip("-").replace("-", "_")
    return ALIASES.get(key, key)


def parse_value(raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    # unknown type (default None): best effort
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[normalize_key(k)] = v.strip()
    return out


def resolve(defaults: dict, file_values: dict, flag_values: dict) -> dict:
    """defaults < config file < flags; string values are typed by their default."""
    cfg = dict(defaults)
    for source in (file_values, flag_values):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in defaults:
                raise ConfigError(f"{key}: unknown config key")
            if isinstance(raw, str):
                try:
                    raw = parse_value(raw, defaults[key])
                except ValueError as exc:
                    raise ConfigError(f"{key}: {exc}") from None
            cfg[key] = raw
    return cfg


def section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p) :]: v for k, v in cfg.items() if k.startswith(p)}


def require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"{k}: required")


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items()))
