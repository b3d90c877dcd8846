"""Config-driven assembly of datasets and experiments."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .config import build_env, window_config
from .data import gen_detours, gen_normal, gen_perturbed, perturb_k_actions, perturb_states
from .evaluation import Experiment
from .mdp import MdpSpec, ValueTables, sample_start, value_iteration
from .trajectory import NORMAL, Dataset

# offsets that keep the random streams of the generated pools apart
_TEST_NORMAL, _DETOUR, _PERTURBED, _NOISE = 1000, 2000, 3000, 4000


def environment(cfg: Mapping) -> tuple[MdpSpec, ValueTables]:
    env = build_env(cfg)
    return env, value_iteration(env)


def train_set(cfg: Mapping, env: MdpSpec, tables: ValueTables) -> Dataset:
    d = cfg["data"]
    return gen_normal(env, tables, int(d["n_train"]), int(d["seed"]), int(d["max_len"]), "train")


def forced_action_set(env: MdpSpec, tables: ValueTables, n: int, k: int, seed: int,
                      max_len: int) -> Dataset:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        start = sample_start(env, rng)
        if env.terminal[start]:
            continue
        t = perturb_k_actions(env, tables, start, k, int(rng.integers(2**31)), max_len,
                              traj_id=f"forced-{len(out):06d}")
        out.append(t)
    return Dataset(out)


def test_pool(cfg: Mapping, env: MdpSpec, tables: ValueTables) -> Dataset:
    """Normal trajectories plus every enabled anomaly class."""
    d = cfg["data"]
    seed = int(d["seed"])
    max_len = int(d["max_len"])
    normal = gen_normal(env, tables, int(d["n_test_normal"]), seed + _TEST_NORMAL, max_len, "test")
    parts = list(normal)
    if d["n_detour"] > 0 and d["detour_d"] > 0:
        parts += gen_detours(env, normal, int(d["n_detour"]), float(d["detour_d"]),
                             float(d["detour_rho"]), seed + _DETOUR)
    if d["n_perturbed"] > 0:
        if d["forced_actions"] > 0:
            parts += forced_action_set(env, tables, int(d["n_perturbed"]), int(d["forced_actions"]),
                                       seed + _PERTURBED, max_len)
        elif d["omega"] > 0:
            parts += gen_perturbed(env, tables, int(d["n_perturbed"]), float(d["omega"]),
                                   seed + _PERTURBED, max_len)
    if d["state_sigma"] > 0:
        rng = np.random.default_rng(seed + _NOISE)
        for i in rng.choice(len(normal), min(int(d["n_perturbed"]), len(normal)), replace=False):
            parts.append(perturb_states(normal[int(i)], float(d["state_sigma"]), int(rng.integers(2**31))))
    return Dataset(parts)


def split_pool(pool: Dataset) -> tuple[Dataset, dict[str, Dataset]]:
    normal = pool.with_label(NORMAL)
    labels = sorted({t.label for t in pool if t.is_anomaly})
    return normal, {lab: pool.with_label(lab) for lab in labels}


def experiment(cfg: Mapping, train: Dataset, pool: Dataset) -> Experiment:
    normal, anomalies = split_pool(pool)
    d, det = cfg["data"], cfg["detect"]
    return Experiment(train.normal(), normal, anomalies, window_config(cfg),
                      float(det["contamination"]), int(det["n_trees"]), int(d["test_size"]),
                      float(d["anomaly_rate"]), int(d["resamples"]), int(det["seed"]),
                      int(det["subsample"]) or None, str(det["rule"]), float(det["phi"]))
