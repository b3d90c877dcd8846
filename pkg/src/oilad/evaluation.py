"""Detection metrics, trajectory verdicts, value checks, ablations and window sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import iforest
from .features import WindowConfig, as_array, dataset_features, windowed_features
from .mdp import MdpSpec, ValueTables, value_iteration
from .policy import TransformerPolicy, state_values
from .softrank import pearson, rank_correlation
from .trajectory import NORMAL, PERTURBED_ANOMALY, POLICY_ANOMALY, Dataset, Trajectory
from .training import TrainConfig, train

ANY_WINDOW = "any-window"
FRACTION = "fraction"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def metrics(counts: ConfusionCounts) -> Metrics:
    """Precision, recall and F1; a zero denominator gives 0 and sets ``degenerate``."""
    degenerate = False
    if counts.tp + counts.fp:
        p = counts.tp / (counts.tp + counts.fp)
    else:
        p, degenerate = 0.0, True
    if counts.tp + counts.fn:
        r = counts.tp / (counts.tp + counts.fn)
    else:
        r, degenerate = 0.0, True
    if p + r:
        f1 = 2 * p * r / (p + r)
    else:
        f1, degenerate = 0.0, True
    return Metrics(p, r, f1, degenerate)


def confusion(predicted: Sequence[bool], actual: Sequence[bool]) -> ConfusionCounts:
    pred = np.asarray(predicted, dtype=bool)
    act = np.asarray(actual, dtype=bool)
    if pred.shape != act.shape:
        raise ValueError("predicted and actual must have the same length")
    return ConfusionCounts(int(np.sum(pred & act)), int(np.sum(pred & ~act)),
                           int(np.sum(~pred & ~act)), int(np.sum(~pred & act)))


def trajectory_verdict(window_flags: Sequence[bool], rule: str = ANY_WINDOW,
                       phi: float = 0.1) -> bool:
    """True (anomalous) if any window is flagged, or, under the fraction rule,
    if at least ``phi`` of the windows are."""
    flags = np.asarray(window_flags, dtype=bool)
    if flags.size == 0:
        raise ValueError("trajectory verdict needs at least one window prediction")
    if rule == ANY_WINDOW:
        return bool(flags.any())
    if rule == FRACTION:
        return bool(flags.mean() >= phi)
    raise ValueError(f"unknown verdict rule {rule!r}")


# -- detector -------------------------------------------------------------------------

@dataclass
class Detector:
    """A trained policy, a window configuration and a fitted boundary."""

    model: TransformerPolicy
    windows: WindowConfig
    forest: iforest.IsoForest
    rule: str = ANY_WINDOW
    phi: float = 0.1

    def window_flags(self, traj: Trajectory) -> np.ndarray:
        pts = windowed_features(self.model, traj, self.windows)
        return self.forest.predict(as_array(pts)) if pts else np.zeros(0, dtype=bool)

    def verdict(self, traj: Trajectory) -> bool:
        return trajectory_verdict(self.window_flags(traj), self.rule, self.phi)

    def verdicts(self, trajs: Iterable[Trajectory]) -> dict[str, bool]:
        """Verdicts for many trajectories, scoring all their windows in one pass."""
        trajs = list(trajs)
        per_traj = [windowed_features(self.model, t, self.windows) for t in trajs]
        flat = [p for pts in per_traj for p in pts]
        flags = self.forest.predict(as_array(flat)) if flat else np.zeros(0, dtype=bool)
        out, k = {}, 0
        for t, pts in zip(trajs, per_traj):
            out[t.id] = trajectory_verdict(flags[k:k + len(pts)], self.rule, self.phi)
            k += len(pts)
        return out


def fit_boundary(model: TransformerPolicy, train_trajs: Iterable[Trajectory], windows: WindowConfig,
                 contamination: float, n_trees: int = 100, subsample: int | None = None,
                 seed: int = 0) -> iforest.IsoForest:
    """Isolation forest over the window features of (normal) training trajectories."""
    trajs = list(train_trajs)
    if any(t.is_anomaly for t in trajs):
        raise ValueError("the boundary is fitted on normal trajectories only")
    pts = as_array(dataset_features(model, trajs, windows))
    return iforest.fit(pts, n_trees=n_trees, subsample=subsample,
                       contamination=contamination, seed=seed)


# -- test protocol ----------------------------------------------------------------------

@dataclass
class ClassResult:
    label: str
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    runs: list = field(default_factory=list)  # per-resample (P, R, F1)


@dataclass
class EvalReport:
    classes: dict[str, ClassResult]
    seeds: list[int]
    config: dict = field(default_factory=dict)

    @property
    def average_f1(self) -> float:
        return float(np.mean([c.f1 for c in self.classes.values()]))

    def to_dict(self) -> dict:
        return {
            "classes": {k: {"precision": c.precision, "recall": c.recall, "f1": c.f1,
                            "counts": asdict(c.counts), "runs": [list(r) for r in c.runs]}
                        for k, c in sorted(self.classes.items())},
            "average_f1": self.average_f1, "seeds": list(self.seeds), "config": self.config,
        }

    def table_row(self) -> str:
        """Recall / precision / F1 per class, in percent."""
        cells = []
        for k in (POLICY_ANOMALY, PERTURBED_ANOMALY):
            if k in self.classes:
                c = self.classes[k]
                cells.append(f"{k}: R={100 * c.recall:.1f} P={100 * c.precision:.1f} F1={100 * c.f1:.1f}")
        return " | ".join(cells)


def evaluate_verdicts(verdicts: Mapping[str, bool], normal: Dataset,
                      anomalies: Mapping[str, Dataset], test_size: int = 200,
                      anomaly_rate: float = 0.1, resamples: int = 5, seed: int = 0,
                      config: dict | None = None) -> EvalReport:
    """Mean metrics per anomaly class over random test sets drawn from the pools.

    Each test set mixes normal trajectories with anomalies of a single class
    at ``anomaly_rate``.
    """
    from .data import mix

    seeds = [seed + i for i in range(resamples)]
    classes = {}
    for label, pool in sorted(anomalies.items()):
        runs, total = [], ConfusionCounts()
        for s in seeds:
            test = mix(normal, pool, test_size, anomaly_rate, s)
            counts = confusion([verdicts[t.id] for t in test], [t.is_anomaly for t in test])
            m = metrics(counts)
            runs.append((m.precision, m.recall, m.f1))
            total = total + counts
        mean = np.mean(runs, axis=0)
        classes[label] = ClassResult(label, float(mean[0]), float(mean[1]), float(mean[2]), total, runs)
    return EvalReport(classes, seeds, dict(config or {}))


def evaluate(detector: Detector, normal: Dataset, anomalies: Mapping[str, Dataset],
             test_size: int = 200, anomaly_rate: float = 0.1, resamples: int = 5,
             seed: int = 0, config: dict | None = None) -> EvalReport:
    trajs = list(normal) + [t for pool in anomalies.values() for t in pool]
    return evaluate_verdicts(detector.verdicts(trajs), normal, anomalies, test_size,
                             anomaly_rate, resamples, seed, config)


# -- value checks -----------------------------------------------------------------------

def value_correlation(model: TransformerPolicy, env: MdpSpec, trajectories: Iterable[Trajectory],
                      truth=None) -> tuple[float, float]:
    """Pearson and Spearman coefficients between model state values and true
    values over every visited (trajectory, step) pair.

    ``truth`` maps state id to value (array or dict); it defaults to the
    optimal values from value iteration.
    """
    if truth is None:
        truth = value_iteration(env).V
    predicted, actual = [], []
    for t in trajectories:
        ids = t.state_ids
        if ids is None:
            raise ValueError(f"trajectory {t.id} has no state ids")
        if len(t) == 0:
            continue
        predicted.extend(state_values(model.q_values(t.states)))
        actual.extend(truth[s] for s in ids[:len(t)])
    if len(predicted) < 3:
        raise ValueError(f"value correlation needs at least 3 pairs, got {len(predicted)}")
    pcc, _ = pearson(predicted, actual)
    scc, _ = rank_correlation(predicted, actual)
    return pcc, scc


def theorem1_check(rewards: Sequence[float], gamma: float) -> list[bool]:
    """Per consecutive pair of non-terminal states, whether the reward sequence
    satisfies the sufficient condition for ``v(s_t) <= v(s_{t+1})``.

    ``rewards[k]`` is the reward received after step ``k``.  Entry ``t``
    (``0 <= t <= T - 2``) tests ``r_{t+1} <= sum_{k=t+2}^{T} (1-gamma) gamma^(k-t-2) r_k``
    (rewards numbered from 1).
    """
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    r = np.asarray(rewards, dtype=np.float64)
    T = len(r)
    out = []
    for t in range(T - 1):
        tail = r[t + 1:]
        weights = (1 - gamma) * gamma ** np.arange(len(tail))
        out.append(bool(r[t] <= float(np.dot(weights, tail)) + 1e-12))
    return out


def remark_values(T: int, gamma: float, step_reward: float = -1.0,
                  terminal_reward: float = 0.0) -> np.ndarray:
    """Closed-form values of the states of an optimal length-``T`` trajectory
    under a constant step reward and an optional positive terminal reward."""
    t = np.arange(T)
    k = T - t  # steps remaining
    if terminal_reward > 0:
        return step_reward * (1 - gamma ** (k - 1)) / (1 - gamma) + gamma ** (k - 1) * terminal_reward
    return step_reward * (1 - gamma ** k) / (1 - gamma)


# -- ablation and sweeps ------------------------------------------------------------------

OBJECTIVES = {
    "Obj1": {"action_objective": True, "monotonic_objective": False},
    "Obj2": {"action_objective": False, "monotonic_objective": True, "monotonic_start": 0},
    "Obj1+2": {"action_objective": True, "monotonic_objective": True},
}


@dataclass
class Experiment:
    """Everything needed to train, fit and evaluate one detector."""

    train_set: Dataset
    normal_pool: Dataset
    anomaly_pools: dict[str, Dataset]
    windows: WindowConfig
    contamination: float
    n_trees: int = 100
    test_size: int = 200
    anomaly_rate: float = 0.1
    resamples: int = 5
    seed: int = 0
    subsample: int | None = None
    rule: str = ANY_WINDOW
    phi: float = 0.1

    def detector(self, model: TransformerPolicy) -> Detector:
        forest = fit_boundary(model, self.train_set, self.windows, self.contamination,
                              self.n_trees, self.subsample, self.seed)
        return Detector(model, self.windows, forest, self.rule, self.phi)

    def report(self, model: TransformerPolicy, windows: WindowConfig | None = None,
               config: dict | None = None) -> EvalReport:
        exp = self if windows is None else dataclasses.replace(self, windows=windows)
        det = exp.detector(model)
        return evaluate(det, exp.normal_pool, exp.anomaly_pools, exp.test_size,
                        exp.anomaly_rate, exp.resamples, exp.seed, config)


def ablation_run(exp: Experiment, model: TransformerPolicy, base: TrainConfig,
                 arms: Sequence[str] = ("Obj1", "Obj2", "Obj1+2"),
                 trained: Mapping[str, TransformerPolicy] | None = None) -> dict[str, EvalReport]:
    """Train one model per objective arm from the same initial weights and seed,
    then evaluate each identically.  ``trained`` may supply already trained arms."""
    out = {}
    for arm in arms:
        if trained and arm in trained:
            fitted = trained[arm]
        else:
            cfg = base.replace(**OBJECTIVES[arm])
            fitted = train(model, exp.train_set, cfg).model
        out[arm] = exp.report(fitted, config={"arm": arm})
    return out


def ablation_csv(reports: Mapping[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["objective", "policy_f1", "perturbed_f1", "average_f1"])
    for arm, rep in reports.items():
        pol = rep.classes.get(POLICY_ANOMALY)
        per = rep.classes.get(PERTURBED_ANOMALY)
        w.writerow([arm, "" if pol is None else repr(pol.f1), "" if per is None else repr(per.f1),
                    repr(rep.average_f1)])
    return buf.getvalue()


def window_sweep(exp: Experiment, model: TransformerPolicy, sizes: Sequence[int],
                 vary: str = "both") -> list[dict]:
    """Re-extract features and refit the boundary for each window size.

    ``vary`` selects which window changes (``w_q``, ``w_v`` or ``both``); the
    other keeps its value from ``exp.windows``.
    """
    if vary not in ("w_q", "w_v", "both"):
        raise ValueError("vary must be 'w_q', 'w_v' or 'both'")
    rows = []
    for w in sizes:
        w_q = w if vary in ("w_q", "both") else exp.windows.w_q
        w_v = w if vary in ("w_v", "both") else exp.windows.w_v
        win = WindowConfig(w_q, w_v, exp.windows.step, exp.windows.downsample)
        rep = exp.report(model, win)
        row = {"w_q": w_q, "w_v": w_v}
        for k, c in sorted(rep.classes.items()):
            row[f"{k}_f1"] = c.f1
        row["average_f1"] = rep.average_f1
        rows.append(row)
    return rows


def rows_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def bootstrap_mean_difference(a, b, n_boot: int = 2000, seed: int = 0,
                              level: float = 0.95) -> tuple[float, float, float]:
    """``mean(a) - mean(b)`` with a percentile bootstrap interval."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    diffs = np.empty(n_boot)
    for i in range(n_boot):
        diffs[i] = a[rng.integers(len(a), size=len(a))].mean() - b[rng.integers(len(b), size=len(b))].mean()
    lo, hi = np.quantile(diffs, [(1 - level) / 2, (1 + level) / 2])
    return float(a.mean() - b.mean()), float(lo), float(hi)
