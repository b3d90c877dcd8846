"""Trajectory and dataset containers."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

NORMAL = "normal"
POLICY_ANOMALY = "policy_anomaly"
PERTURBED_ANOMALY = "perturbed_anomaly"
LABELS = (NORMAL, POLICY_ANOMALY, PERTURBED_ANOMALY)
ANOMALY_LABELS = (POLICY_ANOMALY, PERTURBED_ANOMALY)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A labelled sequence of (state vector, action id) pairs.

    ``meta`` carries generation details; for discrete environments it holds
    ``state_ids`` (T + 1 entries, the last one being the state reached after
    the final action) and the per-step ``rewards``.
    """

    id: str
    states: np.ndarray
    actions: np.ndarray
    label: str = NORMAL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64)
        actions = np.array(self.actions, dtype=np.int64).reshape(-1)
        if states.ndim == 1 and len(actions) == 0:
            states = states.reshape(0, 0)
        if states.ndim != 2 or states.shape[0] != len(actions):
            raise ValueError(
                f"trajectory {self.id}: {states.shape[0] if states.ndim == 2 else '?'} states "
                f"vs {len(actions)} actions")
        if self.label not in LABELS:
            raise ValueError(f"trajectory {self.id}: unknown label {self.label!r}")
        if len(actions) and actions.min() < 0:
            raise ValueError(f"trajectory {self.id}: negative action id")
        object.__setattr__(self, "states", _frozen(states))
        object.__setattr__(self, "actions", _frozen(actions))

    def __len__(self) -> int:
        return len(self.actions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.id == other.id and self.label == other.label and self.meta == other.meta
                and self.states.shape == other.states.shape
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions))

    __hash__ = None

    @property
    def steps(self) -> list[tuple[np.ndarray, int]]:
        return [(s, int(a)) for s, a in zip(self.states, self.actions)]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def degenerate(self) -> bool:
        return len(self) == 0

    @property
    def is_anomaly(self) -> bool:
        return self.label != NORMAL

    @property
    def state_ids(self) -> list[int] | None:
        ids = self.meta.get("state_ids")
        return None if ids is None else list(ids)

    def replace(self, **changes) -> "Trajectory":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    @property
    def anomaly_rate(self) -> float:
        if not self.trajectories:
            return 0.0
        return sum(t.is_anomaly for t in self.trajectories) / len(self.trajectories)

    def with_label(self, *labels: str) -> "Dataset":
        return Dataset(t for t in self.trajectories if t.label in labels)

    def normal(self) -> "Dataset":
        return self.with_label(NORMAL)

    def validate(self, action_count: int | None = None) -> None:
        """Check the dataset-level invariants; raises ``ValueError``."""
        dims = {t.state_dim for t in self.trajectories}
        if len(dims) > 1:
            raise ValueError(f"mixed state dimensionality {sorted(dims)}")
        for t in self.trajectories:
            if len(t) < 1:
                raise ValueError(f"trajectory {t.id} is empty")
            if action_count is not None and t.actions.max() >= action_count:
                raise ValueError(f"trajectory {t.id} uses action >= {action_count}")
