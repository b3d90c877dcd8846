"""Sliding-window behaviour features.

``f_AO`` (action optimality) is minus the area between the Q value of the
action actually taken and the best Q value, integrated over a window with the
trapezoidal rule.  ``f_SA`` (sequential association) is the Spearman
coefficient between the window's state values and time.  Both drop when
behaviour is anomalous.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError
from .policy import TransformerPolicy, state_values
from .softrank import time_correlation_rows
from .trajectory import Trajectory

MOST_ANOMALOUS = "most-anomalous"
LARGEST_VALUE = "largest-value"


@dataclass(frozen=True)
class WindowConfig:
    w_q: int = 20
    w_v: int = 15
    step: int = 1
    downsample: str = MOST_ANOMALOUS

    def __post_init__(self):
        if self.w_q < 2 or self.w_v < 2:
            raise ConfigError(f"window sizes must be >= 2, got w_q={self.w_q}, w_v={self.w_v}")
        if self.step < 1:
            raise ConfigError(f"window step must be >= 1, got {self.step}")
        if self.downsample not in (MOST_ANOMALOUS, LARGEST_VALUE):
            raise ConfigError(f"downsample must be {MOST_ANOMALOUS!r} or {LARGEST_VALUE!r}")

    @property
    def span(self) -> int:
        return max(self.w_q, self.w_v)


@dataclass(frozen=True)
class FeaturePoint:
    traj_id: str
    window_end: int
    f_ao: float
    f_sa: float
    label: str = ""
    degenerate: bool = False  # f_SA undefined (constant values), reported as 0
    fallback: bool = False  # trajectory shorter than the windows: one whole-trajectory window

    @property
    def point(self) -> tuple[float, float]:
        return (self.f_ao, self.f_sa)


# -- per-window features from precomputed Q rows ---------------------------------------

def optimality_gaps(q: np.ndarray, actions) -> np.ndarray:
    """``max_a q(s_t, a) - q(s_t, a_t)`` per step (never negative)."""
    q = np.asarray(q, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    return q.max(axis=1) - q[np.arange(len(actions)), actions]


def area_feature(gaps) -> float:
    """Minus the trapezoidal area under the gap curve on unit spacing."""
    g = np.asarray(gaps, dtype=np.float64)
    if len(g) < 2:
        raise ValueError("action optimality needs a window of at least 2 steps")
    return float(_windows_ao(g, len(g))[0])


def association_feature(values) -> tuple[float, bool]:
    """Spearman coefficient of ``values`` against time, with a degenerate flag."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise ValueError("sequential association needs a window of at least 2 steps")
    r, degenerate = time_correlation_rows(v[None])
    return float(r[0]), bool(degenerate[0])


# -- model-backed features --------------------------------------------------------------

def trajectory_q(model: TransformerPolicy, states) -> np.ndarray:
    """Eval-mode Q rows for every step, each row computed with causal context.

    Sequences longer than ``max_seq_len`` use the most recent ``max_seq_len``
    states as context for each row.
    """
    states = np.asarray(states, dtype=np.float64)
    T, L = len(states), model.max_seq_len
    if T <= L:
        return model.q_values(states)
    rows = [model.q_values(states[:L])]
    rows += [model.q_values(states[t - L + 1:t + 1])[-1:] for t in range(L, T)]
    return np.concatenate(rows)


def action_optimality(model: TransformerPolicy, window_states, window_actions,
                      context=None) -> float:
    states = np.asarray(window_states, dtype=np.float64)
    if context is not None and len(context):
        states = np.concatenate([np.asarray(context, dtype=np.float64), states])
    w = len(window_actions)
    q = trajectory_q(model, states)[-w:]
    return area_feature(optimality_gaps(q, window_actions))


def sequential_association(model: TransformerPolicy, window_states,
                           context=None) -> tuple[float, bool]:
    states = np.asarray(window_states, dtype=np.float64)
    w = len(states)
    if context is not None and len(context):
        states = np.concatenate([np.asarray(context, dtype=np.float64), states])
    v = state_values(trajectory_q(model, states))[-w:]
    return association_feature(v)


def _windows_ao(gaps: np.ndarray, w: int) -> np.ndarray:
    """f_AO of every length-``w`` window, indexed by window start.

    Each window is summed on its own (no running sums), so a window's value
    does not depend on where the trajectory or stream began.
    """
    inner = (gaps[1:] + gaps[:-1]) / 2.0
    # 0.0 - x rather than -x keeps a zero area at +0.0
    return 0.0 - np.lib.stride_tricks.sliding_window_view(inner, w - 1).sum(axis=1)


def _windows_sa(values: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    return time_correlation_rows(np.lib.stride_tricks.sliding_window_view(values, w))


def features_from_q(q: np.ndarray, actions, cfg: WindowConfig, traj_id: str = "",
                    label: str = "") -> list[FeaturePoint]:
    """Window features from precomputed Q rows of one trajectory."""
    q = np.asarray(q, dtype=np.float64)
    T = len(q)
    if T == 0:
        return []
    gaps = optimality_gaps(q, actions)
    values = state_values(q)
    span = cfg.span
    if T < span:
        f_ao = area_feature(gaps) if T >= 2 else 0.0
        f_sa, degen = association_feature(values) if T >= 2 else (0.0, True)
        return [FeaturePoint(traj_id, T - 1, f_ao, f_sa, label, degen, True)]

    ao = _windows_ao(gaps, cfg.w_q)
    sa, sa_degen = _windows_sa(values, cfg.w_v)
    pick = np.min if cfg.downsample == MOST_ANOMALOUS else np.max
    out = []
    for end in range(span - 1, T, cfg.step):
        lo = end - span + 1  # start of the large window
        # every small window lying fully inside [lo, end]
        ao_win = ao[lo:end - cfg.w_q + 2]
        sa_win = sa[lo:end - cfg.w_v + 2]
        degen_win = sa_degen[lo:end - cfg.w_v + 2]
        f_ao = float(pick(ao_win))
        if len(sa_win) == 1:
            f_sa, degen = float(sa_win[0]), bool(degen_win[0])
        else:
            j = int(np.argmin(sa_win) if cfg.downsample == MOST_ANOMALOUS else np.argmax(sa_win))
            f_sa, degen = float(sa_win[j]), bool(degen_win[j])
        out.append(FeaturePoint(traj_id, end, f_ao, f_sa, label, degen, False))
    return out


def windowed_features(model: TransformerPolicy, traj: Trajectory,
                      cfg: WindowConfig) -> list[FeaturePoint]:
    """Feature points of every window position of ``traj``.

    The larger window slides with ``cfg.step``; the feature with the smaller
    window is downsampled over the small windows inside each large window.
    Trajectories shorter than the larger window give one flagged point
    covering the whole trajectory.
    """
    if len(traj) == 0:
        return []
    q = trajectory_q(model, traj.states)
    return features_from_q(q, traj.actions, cfg, traj.id, traj.label)


def dataset_features(model: TransformerPolicy, trajs: Iterable[Trajectory],
                     cfg: WindowConfig) -> list[FeaturePoint]:
    out = []
    for t in trajs:
        out.extend(windowed_features(model, t, cfg))
    return out


def as_array(points: Iterable[FeaturePoint]) -> np.ndarray:
    pts = [p.point for p in points]
    return np.array(pts, dtype=np.float64).reshape(len(pts), 2)


class OnlineFeatures:
    """Incremental feature extraction for a single stream of (state, action) steps.

    ``push`` returns the feature point completed by the new step, if any.  Each
    step costs one forward pass over at most ``max_seq_len`` states, so the
    per-step cost does not grow with the stream length.
    """

    def __init__(self, model: TransformerPolicy, cfg: WindowConfig, traj_id: str = "",
                 label: str = ""):
        self.model = model
        self.cfg = cfg
        self.traj_id = traj_id
        self.label = label
        self._states: deque = deque(maxlen=model.max_seq_len)
        self._q: deque = deque(maxlen=cfg.span)
        self._actions: deque = deque(maxlen=cfg.span)
        self.t = 0

    def push(self, state, action: int) -> FeaturePoint | None:
        self._states.append(np.asarray(state, dtype=np.float64))
        row = self.model.q_values(np.array(self._states))[-1]
        self._q.append(row)
        self._actions.append(int(action))
        self.t += 1
        span = self.cfg.span
        if self.t < span or (self.t - span) % self.cfg.step:
            return None
        pts = features_from_q(np.array(self._q), list(self._actions),
                              WindowConfig(self.cfg.w_q, self.cfg.w_v, 1, self.cfg.downsample),
                              self.traj_id, self.label)
        p = pts[-1]
        return FeaturePoint(p.traj_id, self.t - 1, p.f_ao, p.f_sa, p.label, p.degenerate, False)

    def finish(self) -> FeaturePoint | None:
        """Fallback point for a stream that ended before the first full window."""
        if self.t == 0 or self.t >= self.cfg.span:
            return None
        return features_from_q(np.array(self._q), list(self._actions), self.cfg,
                               self.traj_id, self.label)[0]


FEATURE_COLUMNS = ["traj_id", "window_end", "f_AO", "f_SA", "label"]


def features_csv(points: Iterable[FeaturePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FEATURE_COLUMNS)
    for p in points:
        w.writerow([p.traj_id, p.window_end, repr(p.f_ao), repr(p.f_sa), p.label])
    return buf.getvalue()


def read_features_csv(path: str | Path) -> list[FeaturePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [FeaturePoint(r["traj_id"], int(r["window_end"]), float(r["f_AO"]),
                         float(r["f_SA"]), r.get("label", "")) for r in rows]


def iter_windows(points: Iterable[FeaturePoint]) -> Iterator[tuple[str, list[FeaturePoint]]]:
    """Group consecutive points by trajectory id."""
    current, group = None, []
    for p in points:
        if p.traj_id != current and group:
            yield current, group
            group = []
        current = p.traj_id
        group.append(p)
    if group:
        yield current, group
