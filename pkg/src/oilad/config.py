"""Run configuration: defaults, hyperparameter presets and TOML loading.

Resolution order (later wins): built-in defaults, the ``preset`` named in the
file, the file itself, ``--set section.key=value`` overrides.  Section seeds
left unset fall back to the top-level ``seed``, then to ``$OILAD_SEED``, then 0.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SECTIONS = ("env", "data", "model", "train", "detect", "paths")

DEFAULTS: dict[str, dict[str, Any]] = {
    "env": {"name": "grid15", "grid_file": "", "discount": 0.9},
    "data": {
        "n_train": 2000, "n_test_normal": 1000, "n_detour": 200, "n_perturbed": 200,
        "detour_d": 6.0, "detour_rho": 0.5, "omega": 0.4, "forced_actions": 0,
        "state_sigma": 0.0, "max_len": 200, "test_size": 200, "anomaly_rate": 0.1,
        "resamples": 5, "seed": None,
    },
    "model": {"embed_dim": 64, "layers": 1, "heads": 2, "dropout": 0.1, "max_seq_len": 64,
              "positional": True, "seed": None},
    "train": {
        "iterations": 1500, "monotonic_start": -1, "alpha": 0.05, "batch_size": 32,
        "monotonic_batch_size": 32, "lr_action": 1e-3, "lr_monotonic": 2e-4, "cycle_steps": 200,
        "weight_decay": 0.01, "softrank_eps": 1.0, "action_objective": True,
        "monotonic_objective": True, "seed": None,
    },
    "detect": {"w_q": 6, "w_v": 6, "step": 1, "downsample": "most-anomalous",
               "contamination": 0.001, "n_trees": 100, "subsample": 0, "rule": "any-window",
               "phi": 0.1, "seed": None},
    "paths": {"dataset": "", "test": "", "checkpoint": "", "forest": "", "reports": ""},
}

# Hyperparameters of the three reference datasets: transformer shape, windows,
# entropy weight, boundary contamination, learning rates, data size and
# anomaly rate.  A (low, high) learning rate denotes a cyclical schedule.
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "chengdu": {
        "model": {"layers": 1, "embed_dim": 128, "heads": 2, "dropout": 0.1},
        "detect": {"w_q": 20, "w_v": 15, "step": 1, "contamination": 0.008},
        "train": {"alpha": 0.05, "lr_action": 1e-3, "lr_monotonic": 2e-4},
        "data": {"n_train": 6023, "anomaly_rate": 0.143},
    },
    "ais": {
        "model": {"layers": 3, "embed_dim": 128, "heads": 1, "dropout": 0.1},
        "detect": {"w_q": 40, "w_v": 40, "step": 1, "contamination": 0.045},
        "train": {"alpha": 0.0, "lr_action": [1e-7, 1e-3], "lr_monotonic": 1e-4},
        "data": {"n_train": 1291, "anomaly_rate": 0.091},
    },
    "lunarlander": {
        "model": {"layers": 1, "embed_dim": 256, "heads": 4, "dropout": 0.1},
        "detect": {"w_q": 20, "w_v": 60, "step": 1, "contamination": 0.00035},
        "train": {"alpha": 0.1, "lr_action": 5e-3, "lr_monotonic": 1e-4},
        "data": {"n_train": 8000, "anomaly_rate": 0.05},
    },
    # desk-scale settings for the built-in environments
    "grid15": {},
    "taxi": {
        "env": {"name": "taxi"},
        "train": {"alpha": 0.0, "lr_monotonic": 1e-3},
        "data": {"n_train": 1000, "forced_actions": 6},
    },
    "grid5": {
        "env": {"name": "grid5"},
        "data": {"n_train": 200, "detour_d": 2.0},
        "train": {"iterations": 300},
        "detect": {"w_q": 3, "w_v": 3},
    },
}


def _merge(base: dict, update: Mapping, where: str) -> None:
    for section, values in update.items():
        if section in ("seed", "preset"):
            continue
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if not isinstance(values, Mapping):
            raise ConfigError(f"{where}: [{section}] must be a table")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            base[section][key] = value


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value``; the value is parsed as TOML, falling back to a string."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    lhs, raw = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def resolve(doc: Mapping | None = None, overrides: Sequence[str] = (),
            environ: Mapping[str, str] | None = None) -> dict[str, dict[str, Any]]:
    doc = dict(doc or {})
    cfg = copy.deepcopy(DEFAULTS)
    preset = doc.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (known: {', '.join(PRESETS)})")
        _merge(cfg, PRESETS[preset], f"preset {preset}")
    _merge(cfg, doc, "config")
    upd: dict[str, dict] = {}
    global_seed = doc.get("seed")
    for item in overrides:
        section, key, value = parse_override(item)
        if section == "global" and key == "seed":
            global_seed = value
            continue
        upd.setdefault(section, {})[key] = value
    _merge(cfg, upd, "override")
    environ = os.environ if environ is None else environ
    if global_seed is None and environ.get("OILAD_SEED"):
        try:
            global_seed = int(environ["OILAD_SEED"])
        except ValueError:
            raise ConfigError(f"OILAD_SEED must be an integer, got {environ['OILAD_SEED']!r}") from None
    global_seed = int(global_seed or 0)
    for section in ("data", "model", "train", "detect"):
        if cfg[section]["seed"] is None:
            cfg[section]["seed"] = global_seed
    cfg["seed"] = global_seed
    cfg["preset"] = preset
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    checks = [
        ("data.n_train", cfg["data"]["n_train"] >= 1),
        ("data.anomaly_rate", 0 <= cfg["data"]["anomaly_rate"] <= 1),
        ("data.detour_rho", 0 < cfg["data"]["detour_rho"] <= 1),
        ("data.omega", 0 <= cfg["data"]["omega"] <= 1),
        ("data.state_sigma", cfg["data"]["state_sigma"] >= 0),
        ("env.discount", 0 <= cfg["env"]["discount"] < 1),
        ("detect.contamination", 0 <= cfg["detect"]["contamination"] < 0.5),
        ("train.iterations", cfg["train"]["iterations"] >= 0),
    ]
    for name, ok in checks:
        if not ok:
            section, key = name.split(".")
            raise ConfigError(f"invalid value for {name}: {cfg[section][key]!r}")


def load(path: str | Path | None, overrides: Sequence[str] = (),
         environ: Mapping[str, str] | None = None) -> dict[str, dict[str, Any]]:
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            doc = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return resolve(doc, overrides, environ)


def snapshot(cfg: Mapping) -> str:
    """Canonical JSON of a resolved configuration."""
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


# -- typed views ------------------------------------------------------------------------

def policy_config(cfg: Mapping, state_dim: int, action_count: int):
    from .policy import PolicyConfig

    m = cfg["model"]
    return PolicyConfig(state_dim, action_count, int(m["embed_dim"]), int(m["layers"]),
                        int(m["heads"]), float(m["dropout"]), int(m["max_seq_len"]),
                        bool(m["positional"]), int(m["seed"]))


def _lr(value):
    return tuple(float(v) for v in value) if isinstance(value, (list, tuple)) else float(value)


def train_config(cfg: Mapping):
    from .training import TrainConfig

    t = cfg["train"]
    n1 = int(t["monotonic_start"])
    return TrainConfig(
        iterations=int(t["iterations"]), monotonic_start=None if n1 < 0 else n1,
        alpha=float(t["alpha"]), batch_size=int(t["batch_size"]),
        monotonic_batch_size=int(t["monotonic_batch_size"]), lr_action=_lr(t["lr_action"]),
        lr_monotonic=_lr(t["lr_monotonic"]), cycle_steps=int(t["cycle_steps"]),
        weight_decay=float(t["weight_decay"]), softrank_eps=float(t["softrank_eps"]),
        action_objective=bool(t["action_objective"]),
        monotonic_objective=bool(t["monotonic_objective"]), seed=int(t["seed"]))


def window_config(cfg: Mapping):
    from .features import WindowConfig

    d = cfg["detect"]
    return WindowConfig(int(d["w_q"]), int(d["w_v"]), int(d["step"]), str(d["downsample"]))


def build_env(cfg: Mapping):
    from .mdp import builtin_env, load_grid_file

    e = cfg["env"]
    if e["grid_file"]:
        return load_grid_file(e["grid_file"]).compile()  # the file carries its own discount
    return builtin_env(e["name"], float(e["discount"]))
