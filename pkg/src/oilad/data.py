"""Trajectory datasets: expert generation, anomaly injection and JSON-lines I/O."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, InjectionError, ParseError, VersionError
from .mdp import (MdpSpec, ValueTables, distances_from, distances_to, greedy_rollout,
                  sample_start, shortest_path, trajectory_from_ids)
from .trajectory import LABELS, NORMAL, PERTURBED_ANOMALY, POLICY_ANOMALY, Dataset, Trajectory

DATASET_VERSION = 1
_HEADER_KEY = "oilad_dataset_version"


def gen_normal(env: MdpSpec, tables: ValueTables, n: int, seed: int, max_len: int = 1000,
               prefix: str = "normal") -> Dataset:
    """``n`` expert rollouts from starts drawn by the start distribution.

    Starts that are already terminal would give empty trajectories and are
    redrawn.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not np.any((env.start_weights > 0) & ~env.terminal):
        raise ConfigError(f"{env.name}: no non-terminal start state")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        start = sample_start(env, rng)
        if env.terminal[start]:
            continue
        tid = f"{prefix}-{len(out):06d}"
        out.append(greedy_rollout(env, tables, start, max_len, seed, traj_id=tid))
    return Dataset(out)


def _source_ids(traj: Trajectory) -> list[int]:
    ids = traj.state_ids
    if ids is None or len(ids) != len(traj) + 1:
        raise InjectionError(f"trajectory {traj.id} carries no state ids; detours need a tabular source")
    return ids


def inject_detour(traj: Trajectory, env: MdpSpec, d: float, rho: float, seed: int,
                  slack: int = 2) -> Trajectory:
    """Replace a contiguous proportion ``rho`` of ``traj`` with a longer valid path.

    The replaced segment keeps its endpoints; the new route goes through a
    random waypoint and is at least ``d`` steps longer.  Waypoints giving an
    extra length within ``[d, d + slack]`` are preferred, otherwise the
    shortest feasible excess is used.  Terminal states are never entered
    before the segment's own end.
    """
    if traj.label != NORMAL:
        raise ValueError(f"trajectory {traj.id} is not normal")
    if not d > 0:
        raise ValueError(f"detour distance must be positive, got {d}")
    if not 0 < rho <= 1:
        raise ValueError(f"detour proportion must lie in (0, 1], got {rho}")
    ids = _source_ids(traj)
    T = len(traj)
    if T < 1:
        raise InjectionError(f"trajectory {traj.id} is empty")
    rng = np.random.default_rng(seed)
    length = min(T, max(1, int(round(rho * T))))
    i = int(rng.integers(T - length + 1))
    a, b = ids[i], ids[i + length]
    blocked = env.terminal_states
    from_a = distances_from(env, a, blocked)
    to_b = distances_to(env, [b], blocked)
    ok = (from_a >= 0) & (to_b >= 0) & ~env.terminal
    extra = np.where(ok, from_a + to_b - length, -1)
    feasible = np.flatnonzero(ok & (extra >= d))
    if feasible.size == 0:
        raise InjectionError(f"no detour of {d} extra steps between states {a} and {b}")
    preferred = feasible[extra[feasible] <= d + slack]
    pool = preferred if preferred.size else feasible[extra[feasible] == extra[feasible].min()]
    w = int(pool[rng.integers(pool.size)])
    ids1, acts1 = shortest_path(env, a, w, rng, blocked)
    ids2, acts2 = shortest_path(env, w, b, rng, blocked)
    new_ids = ids[:i] + ids1 + ids2[1:] + ids[i + length + 1:]
    new_actions = list(traj.actions[:i]) + acts1 + acts2 + list(traj.actions[i + length:])
    meta = {k: v for k, v in traj.meta.items() if k not in ("state_ids", "rewards")}
    meta.update({"source": traj.id, "detour_d": float(d), "detour_rho": float(rho),
                 "segment": [i, i + length], "extra": int(extra[w]), "waypoint": w,
                 "seed": int(seed)})
    return trajectory_from_ids(env, f"{traj.id}-detour", new_ids, new_actions,
                               POLICY_ANOMALY, meta)


def perturb_actions(env: MdpSpec, tables: ValueTables, start: int, omega: float,
                    max_len: int, seed: int, traj_id: str | None = None) -> Trajectory:
    """Expert rollout where each action is replaced, with probability ``omega``,
    by one drawn uniformly from all actions (which may coincide with the expert's).

    Two random numbers are consumed per step regardless of the outcome, so the
    random stream does not depend on ``omega``.
    """
    if not 0 < omega <= 1:
        raise ValueError(f"random-action probability must lie in (0, 1], got {omega}")
    rng = np.random.default_rng(seed)
    ids, actions = [int(start)], []
    s = int(start)
    n_random = 0
    while not env.terminal[s] and len(actions) < max_len:
        u = rng.random()
        alt = int(rng.integers(env.action_count))
        a = alt if u < omega else int(tables.policy[s])
        n_random += a != tables.policy[s]
        s = int(env.next_state[s, a])
        ids.append(s)
        actions.append(a)
    tid = traj_id or f"{env.name}-perturbed-{start}-{seed}"
    meta = {"omega": float(omega), "seed": int(seed), "non_greedy": int(n_random),
            "reached_goal": bool(env.terminal[s])}
    return trajectory_from_ids(env, tid, ids, actions, PERTURBED_ANOMALY, meta)


def perturb_k_actions(env: MdpSpec, tables: ValueTables, start: int, k: int, seed: int,
                      max_len: int = 1000, traj_id: str | None = None) -> Trajectory:
    """Expert rollout with ``k`` forced non-expert actions.

    The forced steps are drawn without replacement among the first ``L``
    steps, ``L`` being the optimal trajectory length from ``start``; each
    takes an action drawn uniformly from the non-expert ones.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if env.action_count < 2:
        raise ValueError("need at least two actions to deviate from the expert")
    rng = np.random.default_rng(seed)
    optimal = len(greedy_rollout(env, tables, start, max_len))
    forced = set(rng.choice(max(optimal, 1), min(k, max(optimal, 1)), replace=False).tolist())
    ids, actions = [int(start)], []
    s = int(start)
    while not env.terminal[s] and len(actions) < max_len:
        a = int(tables.policy[s])
        if len(actions) in forced:
            others = [b for b in range(env.action_count) if b != a]
            a = others[int(rng.integers(len(others)))]
        s = int(env.next_state[s, a])
        ids.append(s)
        actions.append(a)
    tid = traj_id or f"{env.name}-forced-{start}-{seed}"
    meta = {"forced_steps": sorted(forced), "seed": int(seed), "reached_goal": bool(env.terminal[s])}
    return trajectory_from_ids(env, tid, ids, actions, PERTURBED_ANOMALY, meta)


def perturb_states(traj: Trajectory, sigma: float, seed: int) -> Trajectory:
    """Add independent N(0, sigma^2) noise to every recorded state component.

    The noise models measurement error: actions and the underlying state ids
    are untouched.
    """
    if not sigma > 0:
        raise ValueError(f"state noise must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    noisy = traj.states + rng.normal(0.0, sigma, size=traj.states.shape)
    meta = dict(traj.meta)
    meta.update({"source": traj.id, "sigma": float(sigma), "seed": int(seed)})
    return Trajectory(f"{traj.id}-noisy", noisy, traj.actions, PERTURBED_ANOMALY, meta)


def gen_detours(env: MdpSpec, source: Dataset, n: int, d: float, rho: float, seed: int,
                max_attempts: int | None = None) -> Dataset:
    """``n`` detour anomalies from randomly chosen source trajectories.

    Sources where no detour fits are skipped and another is drawn.
    """
    rng = np.random.default_rng(seed)
    pool = source.normal().trajectories
    if not pool:
        raise ValueError("no normal source trajectories")
    limit = max_attempts or 50 * n
    out = []
    attempts = 0
    while len(out) < n:
        if attempts >= limit:
            raise InjectionError(f"only {len(out)} of {n} detours after {attempts} attempts")
        attempts += 1
        src = pool[int(rng.integers(len(pool)))]
        try:
            traj = inject_detour(src, env, d, rho, int(rng.integers(2**31)))
        except InjectionError:
            continue
        out.append(traj.replace(id=f"detour-{len(out):06d}"))
    return Dataset(out)


def gen_perturbed(env: MdpSpec, tables: ValueTables, n: int, omega: float, seed: int,
                  max_len: int = 200, require_deviation: bool = True) -> Dataset:
    """``n`` random-action anomalies from starts drawn by the start distribution.

    With ``require_deviation`` a rollout whose actions all matched the expert
    is redrawn: it would be a normal trajectory carrying an anomaly label.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        start = sample_start(env, rng)
        if env.terminal[start]:
            continue
        traj = perturb_actions(env, tables, start, omega, max_len, int(rng.integers(2**31)),
                               traj_id=f"perturbed-{len(out):06d}")
        if require_deviation and traj.meta["non_greedy"] == 0:
            continue
        out.append(traj)
    return Dataset(out)


def mix(normal: Dataset, anomalous: Dataset, size: int, anomaly_rate: float,
        seed: int) -> Dataset:
    """Random test set of ``size`` trajectories with ``round(size * rate)`` anomalies."""
    if not 0 <= anomaly_rate <= 1:
        raise ValueError("anomaly_rate must lie in [0, 1]")
    n_anom = int(round(size * anomaly_rate))
    n_norm = size - n_anom
    if n_anom > len(anomalous) or n_norm > len(normal):
        raise ValueError(f"pools too small for {n_norm} normal + {n_anom} anomalous trajectories")
    rng = np.random.default_rng(seed)
    picked = [normal[int(i)] for i in rng.choice(len(normal), n_norm, replace=False)]
    picked += [anomalous[int(i)] for i in rng.choice(len(anomalous), n_anom, replace=False)]
    order = rng.permutation(len(picked))
    return Dataset(picked[int(i)] for i in order)


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random partition; the first part gets ``round(fraction * len(ds))`` items."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    k = int(round(fraction * len(ds)))
    return (Dataset(ds[int(i)] for i in order[:k]), Dataset(ds[int(i)] for i in order[k:]))


# -- serialization ----------------------------------------------------------------

def _encode(traj: Trajectory) -> str:
    steps = [{"s": [float(x) for x in s], "a": int(a)} for s, a in zip(traj.states, traj.actions)]
    rec = {"id": traj.id, "label": traj.label, "steps": steps, "meta": traj.meta}
    if not steps:
        rec["state_dim"] = traj.state_dim
    return json.dumps(rec, separators=(",", ":"), sort_keys=False)


def _decode(line: str, lineno: int) -> Trajectory:
    try:
        rec = json.loads(line)
        steps = rec["steps"]
        label = rec["label"]
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        if steps:
            states = np.array([st["s"] for st in steps], dtype=np.float64)
        else:
            states = np.zeros((0, int(rec.get("state_dim", 0))))
        actions = np.array([st["a"] for st in steps], dtype=np.int64)
        return Trajectory(str(rec["id"]), states, actions, label, dict(rec.get("meta", {})))
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"line {lineno}: {exc}") from exc


def dumps(ds: Dataset) -> str:
    lines = [json.dumps({_HEADER_KEY: DATASET_VERSION})]
    lines += [_encode(t) for t in ds]
    return "\n".join(lines) + "\n"


def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_jsonl(ds: Dataset, path: str | Path) -> None:
    atomic_write(path, dumps(ds))


def loads(text: str) -> Dataset:
    lines = text.splitlines()
    header_seen = False
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if not header_seen:
            try:
                rec = json.loads(line)
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            if not isinstance(rec, dict) or _HEADER_KEY not in rec:
                raise ParseError(f"line {lineno}: missing {_HEADER_KEY} header")
            if rec[_HEADER_KEY] != DATASET_VERSION:
                raise VersionError(f"dataset version {rec[_HEADER_KEY]} is not supported "
                                   f"(expected {DATASET_VERSION})")
            header_seen = True
            continue
        out.append(_decode(line, lineno))
    return Dataset(out)


def load_jsonl(path: str | Path) -> Dataset:
    return loads(Path(path).read_text())
