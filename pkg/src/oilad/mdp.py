"""Deterministic tabular MDPs: gridworlds, a taxi world, and exact oracles.

States are integer indices.  Each environment also carries a feature matrix
(one real vector per state) which is what trajectories record and what the
policy network sees.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, ParseError
from .trajectory import NORMAL, Trajectory

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

GRID_ACTIONS = ("north", "east", "south", "west", "stay")
_GRID_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0), (0, 0))

TAXI_ACTIONS = ("south", "north", "east", "west", "pickup", "dropoff")


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """Deterministic MDP: ``next_state[s, a]`` and ``reward[s, a]`` tables."""

    name: str
    next_state: np.ndarray
    reward: np.ndarray
    discount: float
    start_weights: np.ndarray
    terminal: np.ndarray
    features: np.ndarray
    action_names: tuple[str, ...]
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        nxt = np.asarray(self.next_state, dtype=np.int64)
        rew = np.asarray(self.reward, dtype=np.float64)
        b0 = np.asarray(self.start_weights, dtype=np.float64)
        term = np.asarray(self.terminal, dtype=bool)
        feats = np.asarray(self.features, dtype=np.float64)
        n, a = nxt.shape
        if rew.shape != (n, a) or b0.shape != (n,) or term.shape != (n,) or feats.shape[0] != n:
            raise ConfigError(f"{self.name}: inconsistent table shapes")
        if nxt.min() < 0 or nxt.max() >= n:
            raise ConfigError(f"{self.name}: transition to an invalid state")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError(f"{self.name}: discount must lie in [0, 1), got {self.discount}")
        if b0.min() < 0 or abs(b0.sum() - 1.0) > 1e-9:
            raise ConfigError(f"{self.name}: start weights must be a distribution")
        for s in np.flatnonzero(term):
            if np.any(nxt[s] != s) or np.any(rew[s] != 0.0):
                raise ConfigError(f"{self.name}: terminal state {s} is not absorbing with zero reward")
        if len(self.action_names) != a:
            raise ConfigError(f"{self.name}: {len(self.action_names)} action names for {a} actions")
        for name, arr in (("next_state", nxt), ("reward", rew), ("start_weights", b0),
                          ("terminal", term), ("features", feats)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def state_count(self) -> int:
        return self.next_state.shape[0]

    @property
    def action_count(self) -> int:
        return self.next_state.shape[1]

    @property
    def state_dim(self) -> int:
        return self.features.shape[1]

    @property
    def start_states(self) -> np.ndarray:
        return np.flatnonzero(self.start_weights > 0)

    @property
    def terminal_states(self) -> np.ndarray:
        return np.flatnonzero(self.terminal)


@dataclass(frozen=True, eq=False)
class ValueTables:
    V: np.ndarray
    Q: np.ndarray
    policy: np.ndarray
    residual: float = 0.0
    iterations: int = 0


def step(env: MdpSpec, s: int, a: int) -> tuple[int, float, bool]:
    if not 0 <= s < env.state_count:
        raise ValueError(f"state {s} out of range for {env.name}")
    if not 0 <= a < env.action_count:
        raise ValueError(f"action {a} out of range for {env.name}")
    nxt = int(env.next_state[s, a])
    return nxt, float(env.reward[s, a]), bool(env.terminal[nxt])


def value_iteration(env: MdpSpec, tol: float = 1e-8, max_iter: int = 1_000_000) -> ValueTables:
    """Optimal V*, Q* and the greedy policy (ties -> lowest action index)."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    V = np.zeros(env.state_count)
    live = ~env.terminal
    residual = np.inf
    it = 0
    while residual >= tol and it < max_iter:
        Q = env.reward + env.discount * V[env.next_state]
        V_new = np.where(live, Q.max(axis=1), 0.0)
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        it += 1
    Q = env.reward + env.discount * V[env.next_state]
    Q[env.terminal] = 0.0
    residual = float(np.max(np.abs(np.where(live, Q.max(axis=1), 0.0) - V)))
    policy = np.argmax(Q, axis=1)
    for arr in (V, Q, policy):
        arr.setflags(write=False)
    return ValueTables(V=V, Q=Q, policy=policy, residual=residual, iterations=it)


def trajectory_from_ids(env: MdpSpec, traj_id: str, ids, actions, label: str = NORMAL,
                        meta: dict | None = None) -> Trajectory:
    """Trajectory over visited state ids (``len(ids) == len(actions) + 1``).

    Raises ``ValueError`` if a step disagrees with the environment dynamics.
    """
    ids = [int(s) for s in ids]
    actions = [int(a) for a in actions]
    if len(ids) != len(actions) + 1:
        raise ValueError(f"{len(ids)} state ids for {len(actions)} actions")
    rewards = []
    for t, a in enumerate(actions):
        nxt, r, _ = step(env, ids[t], a)
        if nxt != ids[t + 1]:
            raise ValueError(f"step {t}: action {a} from {ids[t]} leads to {nxt}, not {ids[t + 1]}")
        rewards.append(r)
    full = {"env": env.name, "state_ids": ids, "rewards": rewards}
    full.update(meta or {})
    states = env.features[ids[:-1]] if actions else np.zeros((0, env.state_dim))
    return Trajectory(traj_id, states, actions, label, full)


def greedy_rollout(env: MdpSpec, tables: ValueTables, start: int, max_len: int = 1000,
                   seed: int = 0, traj_id: str | None = None) -> Trajectory:
    """Follow the optimal policy from ``start``; zero steps when ``start`` is terminal.

    The rollout is deterministic; ``seed`` is only recorded in ``meta``.
    """
    if not 0 <= start < env.state_count:
        raise ValueError(f"start state {start} out of range")
    ids, actions = [int(start)], []
    s = int(start)
    while not env.terminal[s] and len(actions) < max_len:
        a = int(tables.policy[s])
        s = int(env.next_state[s, a])
        ids.append(s)
        actions.append(a)
    tid = traj_id or f"{env.name}-greedy-{start}"
    return trajectory_from_ids(env, tid, ids, actions, NORMAL, {"seed": int(seed)})


def sample_start(env: MdpSpec, rng: np.random.Generator) -> int:
    return int(rng.choice(env.state_count, p=env.start_weights))


def mc_first_visit(env: MdpSpec, policy, episodes: int, seed: int = 0,
                   max_len: int = 10_000) -> dict[int, float]:
    """First-visit Monte-Carlo estimate of the state values of ``policy``.

    ``policy`` is an (S, A) matrix of action probabilities, a callable mapping
    a state to such a row, or a :class:`ValueTables` (its greedy policy).
    Episodes start from the environment's start distribution.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    probs = _policy_matrix(env, policy)
    rng = np.random.default_rng(seed)
    totals: dict[int, float] = {}
    counts: dict[int, int] = {}
    n_actions = env.action_count
    for _ in range(episodes):
        s = sample_start(env, rng)
        visited, rewards = [], []
        while not env.terminal[s] and len(rewards) < max_len:
            a = int(rng.choice(n_actions, p=probs(s)))
            visited.append(s)
            s, r, _ = step(env, s, a)
            rewards.append(r)
        returns = np.empty(len(rewards))
        g = 0.0
        for t in range(len(rewards) - 1, -1, -1):
            g = rewards[t] + env.discount * g
            returns[t] = g
        seen: set[int] = set()
        for t, st in enumerate(visited):
            if st in seen:
                continue
            seen.add(st)
            totals[st] = totals.get(st, 0.0) + returns[t]
            counts[st] = counts.get(st, 0) + 1
    return {s: totals[s] / counts[s] for s in sorted(totals)}


def _policy_matrix(env: MdpSpec, policy) -> Callable[[int], np.ndarray]:
    if isinstance(policy, ValueTables):
        onehot = np.eye(env.action_count)[policy.policy]
        return lambda s: onehot[s]
    if callable(policy):
        return lambda s: np.asarray(policy(s), dtype=np.float64)
    mat = np.asarray(policy, dtype=np.float64)
    if mat.shape != (env.state_count, env.action_count):
        raise ValueError(f"policy matrix must have shape {(env.state_count, env.action_count)}")
    return lambda s: mat[s]


def epsilon_greedy(tables: ValueTables, epsilon: float) -> np.ndarray:
    n_actions = tables.Q.shape[1]
    probs = np.full(tables.Q.shape, epsilon / n_actions)
    probs[np.arange(len(probs)), tables.policy] += 1.0 - epsilon
    return probs


def distances_to(env: MdpSpec, targets, blocked=None) -> np.ndarray:
    """BFS step counts from every state to the nearest of ``targets``.

    Unreachable states get -1.  States in ``blocked`` are never passed through
    (they can still be targets).
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n = env.state_count
    blocked_mask = np.zeros(n, dtype=bool)
    if blocked is not None:
        blocked_mask[np.asarray(blocked, dtype=np.int64)] = True
    preds: list[list[int]] = [[] for _ in range(n)]
    for s in range(n):
        if blocked_mask[s]:
            continue
        for nxt in set(env.next_state[s].tolist()):
            if nxt != s:
                preds[nxt].append(s)
    dist = np.full(n, -1, dtype=np.int64)
    queue = deque()
    for t in targets:
        dist[t] = 0
        queue.append(int(t))
    while queue:
        u = queue.popleft()
        for p in preds[u]:
            if dist[p] < 0:
                dist[p] = dist[u] + 1
                queue.append(p)
    return dist


def distances_from(env: MdpSpec, source: int, blocked=None) -> np.ndarray:
    """BFS step counts from ``source`` to every state (-1 if unreachable).

    Blocked states can be reached but not left.
    """
    n = env.state_count
    blocked_mask = np.zeros(n, dtype=bool)
    if blocked is not None:
        blocked_mask[np.asarray(blocked, dtype=np.int64)] = True
    dist = np.full(n, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([int(source)])
    while queue:
        u = queue.popleft()
        if blocked_mask[u] and u != source:
            continue
        for nxt in env.next_state[u]:
            if dist[nxt] < 0:
                dist[nxt] = dist[u] + 1
                queue.append(int(nxt))
    return dist


def shortest_path(env: MdpSpec, source: int, target: int, rng: np.random.Generator | None = None,
                  blocked=None) -> tuple[list[int], list[int]]:
    """States and actions of a shortest path; ties broken at random when ``rng`` is given."""
    dist = distances_to(env, [target], blocked)
    if dist[source] < 0:
        raise ValueError(f"state {target} unreachable from {source}")
    ids, actions = [int(source)], []
    s = int(source)
    while s != target:
        options = [a for a in range(env.action_count)
                   if dist[env.next_state[s, a]] == dist[s] - 1 and env.next_state[s, a] != s]
        a = options[0] if rng is None else options[int(rng.integers(len(options)))]
        s = int(env.next_state[s, a])
        ids.append(s)
        actions.append(a)
    return ids, actions


# -- gridworld ------------------------------------------------------------------

@dataclass(frozen=True)
class GridWorld:
    """Goal-reaching grid with a constant negative step reward.

    Entering a goal ends the episode.  A goal with a positive reward pays that
    reward instead of the step reward on the entering transition; a goal with
    reward 0 pays the ordinary step reward.  Moves into walls or the border
    leave the agent in place and still cost ``step_reward``.
    """

    width: int
    height: int
    walls: frozenset = frozenset()
    goals: Mapping = field(default_factory=dict)
    step_reward: float = -1.0
    discount: float = 0.9
    starts: frozenset | None = None
    min_start_distance: int = 1
    name: str = "grid"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("grid dimensions must be positive")
        if not self.step_reward < 0:
            raise ConfigError("step_reward must be negative")
        if not self.goals:
            raise ConfigError("grid needs at least one goal")
        for cell, r in self.goals.items():
            if cell in self.walls:
                raise ConfigError(f"goal {cell} is a wall")
            if r < 0:
                raise ConfigError(f"goal {cell} has negative reward {r}")
        for cell in self.starts or ():
            if cell in self.walls:
                raise ConfigError(f"start {cell} is a wall")
        for x, y in list(self.walls) + list(self.goals):
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ConfigError(f"cell {(x, y)} outside the {self.width}x{self.height} grid")

    def cells(self) -> list[tuple[int, int]]:
        return [(x, y) for y in range(self.height) for x in range(self.width)
                if (x, y) not in self.walls]

    def compile(self) -> MdpSpec:
        cells = self.cells()
        index = {c: i for i, c in enumerate(cells)}
        n, n_actions = len(cells), len(GRID_ACTIONS)
        nxt = np.zeros((n, n_actions), dtype=np.int64)
        rew = np.zeros((n, n_actions))
        terminal = np.array([c in self.goals for c in cells])
        for i, (x, y) in enumerate(cells):
            if terminal[i]:
                nxt[i] = i
                continue
            for a, (dx, dy) in enumerate(_GRID_MOVES):
                target = (x + dx, y + dy)
                j = index.get(target, i)  # walls and the border bounce back
                nxt[i, a] = j
                bonus = self.goals.get(cells[j], 0.0) if terminal[j] else 0.0
                rew[i, a] = bonus if bonus > 0 else self.step_reward
        features = np.array([[x / max(self.width - 1, 1), y / max(self.height - 1, 1)]
                             for x, y in cells])
        # provisional spec to run BFS for the start filter
        probe = MdpSpec(self.name, nxt, rew, self.discount,
                        np.full(n, 1.0 / n), terminal, features, GRID_ACTIONS)
        dist = distances_to(probe, np.flatnonzero(terminal), blocked=np.flatnonzero(terminal))
        if self.starts:
            candidates = [index[c] for c in self.starts if not terminal[index[c]]]
        else:
            candidates = [i for i in range(n) if not terminal[i]]
        candidates = [i for i in candidates if dist[i] >= self.min_start_distance]
        if not candidates:
            raise ConfigError(f"{self.name}: no valid start states")
        b0 = np.zeros(n)
        b0[candidates] = 1.0 / len(candidates)
        info = {"kind": "grid", "width": self.width, "height": self.height, "cells": cells}
        return MdpSpec(self.name, nxt, rew, self.discount, b0, terminal, features,
                       GRID_ACTIONS, info)


_TOKEN = re.compile(r"\s*(#|\.|S|G(?:\d+(?:\.\d*)?)?)")


def parse_grid(rows: str | list[str], step_reward: float = -1.0, discount: float = 0.9,
               name: str = "grid", min_start_distance: int = 1) -> GridWorld:
    """Build a :class:`GridWorld` from ASCII rows.

    Cells: ``#`` wall, ``.`` free, ``S`` start candidate, ``G<k>`` goal with
    reward ``k`` (plain ``G`` means 0).  With no ``S`` cell, every free cell is
    a start candidate.
    """
    if isinstance(rows, str):
        rows = [r for r in rows.strip("\n").splitlines() if r.strip()]
    walls, starts, goals = set(), set(), {}
    width = None
    for y, row in enumerate(rows):
        pos, x = 0, 0
        row = row.rstrip()
        while pos < len(row):
            m = _TOKEN.match(row, pos)
            if not m:
                raise ParseError(f"grid row {y + 1}: unexpected character {row[pos]!r} at column {pos + 1}")
            tok = m.group(1)
            pos = m.end()
            if tok == "#":
                walls.add((x, y))
            elif tok == "S":
                starts.add((x, y))
            elif tok.startswith("G"):
                goals[(x, y)] = float(tok[1:]) if len(tok) > 1 else 0.0
            x += 1
        if width is None:
            width = x
        elif x != width:
            raise ParseError(f"grid row {y + 1} has {x} cells, expected {width}")
    if not rows:
        raise ParseError("empty grid")
    return GridWorld(width, len(rows), frozenset(walls), goals, float(step_reward),
                     float(discount), frozenset(starts) or None, int(min_start_distance), name)


def load_grid_file(path: str | Path) -> GridWorld:
    """Read a TOML grid description (``grid`` plus scalar fields)."""
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if "grid" not in doc:
        raise ParseError(f"{path}: missing 'grid' field")
    return parse_grid(doc["grid"], doc.get("step_reward", -1.0), doc.get("discount", 0.9),
                      doc.get("name", path.stem), doc.get("min_start_distance", 1))


# -- taxi -----------------------------------------------------------------------

_TAXI_LOCS = ((0, 0), (0, 4), (4, 0), (4, 3))  # R, G, Y, B as (row, col)
# walls on the east side of these (row, col) cells
_TAXI_EAST_WALLS = {(0, 1), (1, 1), (3, 0), (3, 2), (4, 0), (4, 2)}


def taxi_env(discount: float = 0.9, name: str = "taxi") -> MdpSpec:
    """5x5 pickup/drop-off world with four depots.

    -1 per move, -10 for an illegal pickup/drop-off, +20 for delivering the
    passenger (terminal).  Dropping the passenger at a wrong depot leaves them
    there.  State features: normalised taxi row/column, passenger location
    one-hot (4 depots + in taxi) and destination one-hot.
    """
    def encode(row, col, pas, dest):
        return ((row * 5 + col) * 5 + pas) * 4 + dest

    n, n_actions = 500, len(TAXI_ACTIONS)
    nxt = np.zeros((n, n_actions), dtype=np.int64)
    rew = np.zeros((n, n_actions))
    terminal = np.zeros(n, dtype=bool)
    features = np.zeros((n, 11))
    b0 = np.zeros(n)
    for row in range(5):
        for col in range(5):
            for pas in range(5):
                for dest in range(4):
                    s = encode(row, col, pas, dest)
                    features[s, :2] = row / 4.0, col / 4.0
                    features[s, 2 + pas] = 1.0
                    features[s, 7 + dest] = 1.0
                    if pas == dest:
                        terminal[s] = True
                        nxt[s] = s
                        continue
                    if pas < 4:
                        b0[s] = 1.0
                    for a in range(n_actions):
                        r, c, p, reward = row, col, pas, -1.0
                        if a == 0:
                            r = min(row + 1, 4)
                        elif a == 1:
                            r = max(row - 1, 0)
                        elif a == 2 and (row, col) not in _TAXI_EAST_WALLS:
                            c = min(col + 1, 4)
                        elif a == 3 and (row, col - 1) not in _TAXI_EAST_WALLS:
                            c = max(col - 1, 0)
                        elif a == 4:
                            if pas < 4 and (row, col) == _TAXI_LOCS[pas]:
                                p = 4
                            else:
                                reward = -10.0
                        elif a == 5:
                            if pas == 4 and (row, col) == _TAXI_LOCS[dest]:
                                p, reward = dest, 20.0
                            elif pas == 4 and (row, col) in _TAXI_LOCS:
                                p = _TAXI_LOCS.index((row, col))
                            else:
                                reward = -10.0
                        nxt[s, a] = encode(r, c, p, dest)
                        rew[s, a] = reward
    b0 /= b0.sum()
    return MdpSpec(name, nxt, rew, discount, b0, terminal, features, TAXI_ACTIONS, {"kind": "taxi"})


# -- built-ins ------------------------------------------------------------------

GRID5 = """
.....
.....
.....
.....
....G10
"""

GRID15 = """
...............
...............
..........#...G10
..........#....
....#.....#....
....#.....#....
....#..........
....#.........G10
....#..........
....#.....#....
....#.....#....
..........#....
..........#...G10
...............
...............
"""


def builtin_grid(name: str, discount: float = 0.9) -> GridWorld:
    if name == "grid5":
        return parse_grid(GRID5, -1.0, discount, "grid5")
    if name == "grid15":
        return parse_grid(GRID15, -1.0, discount, "grid15", min_start_distance=8)
    raise ConfigError(f"{name!r} is not a built-in gridworld (grid5, grid15)")


def builtin_env(name: str, discount: float | None = None) -> MdpSpec:
    """``grid5`` (toy), ``grid15`` (three goals) or ``taxi``."""
    if name in ("grid5", "grid15"):
        return builtin_grid(name, 0.9 if discount is None else discount).compile()
    if name == "taxi":
        return taxi_env(0.9 if discount is None else discount)
    raise ConfigError(f"unknown built-in environment {name!r} (grid5, grid15, taxi)")
