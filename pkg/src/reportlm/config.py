"""Pipeline configuration: YAML file + ``--set key.path=value`` overrides.

Every command writes the merged configuration it actually ran with to
``effective_config.yaml`` in its output directory.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .exceptions import ValidationError

__all__ = ["DEFAULTS", "load_config", "apply_overrides", "merge", "write_effective_config", "require_paths"]

DEFAULTS = {
    "seed": None,
    "paths": {
        "corpus": None,
        "labeled": None,
        "test": None,
        "vocab": None,
        "encoder": None,
        "schema": None,
    },
    "vocab": {"min_count": 5, "max_size": None},
    "split": {"train": 0.85, "valid": 0.10, "test": 0.05},
    "labeled_split": {"train": 0.8, "valid": 0.2, "test": 0.0},
    "synth": {
        "n_reports": 1000,
        "classes": ["SDH", "SAH", "IVH"],
        "prevalence": {},
        "default_prevalence": 0.5,
        "negation_rate": 0.4,
        "distractor_rate": 0.5,
        "vocab_size": 200,
        "filler_sentences": [1, 3],
        "id_prefix": "r",
    },
    "lm": {
        "embedding_dim": 64,
        "hidden_dim": 200,
        "num_layers": 2,
        "dropout": 0.1,
        "bptt": 64,
        "batch_size": 32,
        "epochs": 10,
        "learning_rate": 1e-3,
        "optimizer": "adam",
        "l2": 0.0,
        "pooling": "mean",
        "restore_best": True,
    },
    "finetune": {
        "hidden_sizes": [128],
        "total_epochs": 1500,
        "freeze_epochs": 500,
        "learning_rate": 3e-4,
        "encoder_lr_scale": 0.1,
        "batch_size": 32,
        "dropout": 0.0,
        "l2": 0.0,
        "optimizer": "adam",
        "standardize": False,
        "restore_best": True,
        "threshold": 0.5,
    },
    "baselines": {
        "models": ["naive_bayes", "logistic", "svm", "mlp"],
        "features": ["tfidf", "counts"],
        "embeddings": None,
        "naive_bayes": {"alpha": 1.0},
        "logistic": {"lr": 0.1, "epochs": 500, "l2": 0.0},
        "svm": {"lr": 0.1, "epochs": 500, "C": 1.0},
        "mlp": {"hidden_sizes": [512, 256, 128], "lr": 1e-3, "epochs": 200, "batch_size": 32,
                "dropout": 0.2, "l2": 1e-4},
    },
    "timing": True,
}


def merge(base, override):
    """Recursive dict merge; ``override`` wins, nested dicts are merged key by key."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and out[k] is not None:
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(config, assignments):
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars/lists."""
    config = copy.deepcopy(config)
    for item in assignments or ():
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ValidationError(f"override {item!r} has an empty key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ValidationError(f"override {item!r}: cannot parse value ({exc})") from None
        node = config
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            elif not isinstance(node[p], dict):
                raise ValidationError(f"override {item!r}: {p!r} is not a section")
            node = node[p]
        node[parts[-1]] = value
    return config


def load_config(path=None, overrides=()):
    """Defaults <- YAML file <- overrides.  The seed is mandatory."""
    user = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(user, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
    unknown = sorted(set(user) - set(DEFAULTS))
    if unknown:
        raise ValidationError(f"unknown config section(s): {unknown}")
    config = apply_overrides(merge(DEFAULTS, user), overrides)
    if config.get("seed") is None:
        raise ValidationError("config must set 'seed' (no default seed is used)")
    if not isinstance(config["seed"], int) or isinstance(config["seed"], bool):
        raise ValidationError(f"seed must be an integer, got {config['seed']!r}")
    return config


def require_paths(config, *keys):
    """Check that ``paths.<key>`` is set and exists for each key; returns the Paths."""
    out = []
    for key in keys:
        value = config["paths"].get(key)
        if value is None:
            raise ValidationError(f"config is missing paths.{key}")
        p = Path(value)
        if not p.exists():
            raise FileNotFoundError(f"paths.{key} does not exist: {p}")
        out.append(p)
    return out


def write_effective_config(config, out_dir):
    path = Path(out_dir) / "effective_config.yaml"
    with path.open("w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh, sort_keys=True, default_flow_style=False)
    return path
