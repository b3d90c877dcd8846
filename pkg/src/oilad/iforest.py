"""Isolation forest with a contamination-derived decision threshold.

Points isolated by few random axis-aligned splits get scores near 1; the
threshold is an order statistic of the training scores, so at most a
``contamination`` fraction of the training points lies above it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateDataError, ParseError, VersionError

FOREST_VERSION = 1
_EXACT_HARMONIC_LIMIT = 1_000_000
_EULER_GAMMA = 0.5772156649015329


@lru_cache(maxsize=1)
def _harmonic_table() -> np.ndarray:
    table = np.zeros(_EXACT_HARMONIC_LIMIT + 1)
    table[1:] = np.cumsum(1.0 / np.arange(1, _EXACT_HARMONIC_LIMIT + 1))
    return table


def harmonic(n: int) -> float:
    """``H(n) = 1 + 1/2 + ... + 1/n`` (0 for n <= 0); summed exactly up to 10**6."""
    n = int(n)
    if n <= 0:
        return 0.0
    if n <= 64:
        return math.fsum(1.0 / k for k in range(1, n + 1))
    if n <= _EXACT_HARMONIC_LIMIT:
        return float(_harmonic_table()[n])
    return math.log(n) + _EULER_GAMMA + 1.0 / (2 * n) - 1.0 / (12 * n * n)


def average_path_length(m: int) -> float:
    """Mean unsuccessful-search path length in a BST of ``m`` keys; c(1) = 0."""
    if m <= 1:
        return 0.0
    return 2.0 * harmonic(m - 1) - 2.0 * (m - 1) / m


@dataclass(frozen=True, eq=False)
class IsoTree:
    """Flat node arrays; ``feature == -1`` marks an external node."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    @classmethod
    def build(cls, X: np.ndarray, height_limit: int, rng: np.random.Generator) -> "IsoTree":
        feature, threshold, left, right, size = [], [], [], [], []

        def new_node(n):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            size.append(n)
            return len(feature) - 1

        stack = [(new_node(len(X)), X, 0)]
        while stack:
            node, data, depth = stack.pop()
            if depth >= height_limit or len(data) <= 1:
                continue
            lo, hi = data.min(axis=0), data.max(axis=0)
            dims = np.flatnonzero(hi > lo)
            if dims.size == 0:
                continue
            dim = int(dims[rng.integers(dims.size)])
            split = rng.uniform(lo[dim], hi[dim])
            while not lo[dim] < split < hi[dim]:
                split = rng.uniform(lo[dim], hi[dim])
            mask = data[:, dim] < split
            feature[node] = dim
            threshold[node] = float(split)
            l_node = new_node(int(mask.sum()))
            r_node = new_node(int((~mask).sum()))
            left[node], right[node] = l_node, r_node
            stack.append((r_node, data[~mask], depth + 1))
            stack.append((l_node, data[mask], depth + 1))
        return cls(np.array(feature, dtype=np.int64), np.array(threshold),
                   np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                   np.array(size, dtype=np.int64))

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Depth of the external node reached, plus c(size) of that node."""
        node = np.zeros(len(X), dtype=np.int64)
        depth = np.zeros(len(X))
        active = self.feature[node] >= 0
        rows = np.arange(len(X))
        while active.any():
            idx = rows[active]
            n = node[idx]
            go_left = X[idx, self.feature[n]] < self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            depth[idx] += 1
            active = self.feature[node] >= 0
        return depth + self._correction()[node]

    def _correction(self) -> np.ndarray:
        """c(size) of every node, computed once per tree."""
        cached = self.__dict__.get("_c")
        if cached is None:
            cached = np.array([average_path_length(int(n)) for n in self.size])
            object.__setattr__(self, "_c", cached)
        return cached

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "size")}

    @classmethod
    def from_dict(cls, d: dict) -> "IsoTree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["size"], dtype=np.int64))


@dataclass(frozen=True, eq=False)
class IsoForest:
    trees: tuple
    subsample: int
    contamination: float
    threshold: float
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def score(self, points) -> np.ndarray:
        """Anomaly scores in (0, 1]; higher means easier to isolate."""
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        mean_h = np.mean([t.path_lengths(X) for t in self.trees], axis=0)
        return np.power(2.0, -mean_h / average_path_length(self.subsample))

    def predict(self, points) -> np.ndarray:
        """True where a point is anomalous (score strictly above the threshold)."""
        return self.score(points) > self.threshold

    def to_json(self) -> str:
        doc = {"oilad_forest_version": FOREST_VERSION, "subsample": self.subsample,
               "contamination": self.contamination, "threshold": self.threshold,
               "seed": self.seed, "trees": [t.to_dict() for t in self.trees]}
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "IsoForest":
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise ParseError(f"forest file is not valid JSON: {exc}") from exc
        version = doc.get("oilad_forest_version") if isinstance(doc, dict) else None
        if version != FOREST_VERSION:
            raise VersionError(f"forest version {version} is not supported (expected {FOREST_VERSION})")
        try:
            trees = tuple(IsoTree.from_dict(t) for t in doc["trees"])
            return cls(trees, int(doc["subsample"]), float(doc["contamination"]),
                       float(doc["threshold"]), int(doc["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed forest file: {exc}") from exc

    def save(self, path: str | Path) -> None:
        from .data import atomic_write

        atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "IsoForest":
        return cls.from_json(Path(path).read_text())


def score_threshold(scores, contamination: float) -> float:
    """The ``ceil((1 - c) N)``-th smallest training score."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    k = max(1, math.ceil((1.0 - contamination) * len(s) - 1e-9))
    return float(s[k - 1])


def fit(points, n_trees: int = 100, subsample: int | None = None, contamination: float = 0.0,
        seed: int = 0) -> IsoForest:
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"points must be a 2-D array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    if len(np.unique(X, axis=0)) < 2:
        raise DegenerateDataError("isolation forest needs at least 2 distinct points")
    if not 0.0 <= contamination < 0.5:
        raise ConfigError(f"contamination must lie in [0, 0.5), got {contamination}")
    if n_trees < 1:
        raise ConfigError("n_trees must be positive")
    N = len(X)
    psi = min(256, N) if subsample is None else int(subsample)
    if not 2 <= psi <= N:
        raise ConfigError(f"subsample must lie in [2, {N}], got {psi}")
    height_limit = math.ceil(math.log2(psi))
    trees = []
    for i in range(n_trees):
        rng = np.random.default_rng([seed, i])
        sample = X[rng.choice(N, psi, replace=False)]
        trees.append(IsoTree.build(sample, height_limit, rng))
    forest = IsoForest(tuple(trees), psi, float(contamination), 0.0, int(seed))
    threshold = score_threshold(forest.score(X), contamination)
    return IsoForest(forest.trees, psi, float(contamination), threshold, int(seed))
