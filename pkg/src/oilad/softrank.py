"""Ranking utilities: differentiable soft ranks and hard rank correlations.

Soft ranks are the Euclidean projection of ``values / eps`` onto the
permutahedron spanned by ``(n, n-1, ..., 1)``.  The projection reduces to an
isotonic regression on the sorted input, solved here by pool-adjacent-violators;
its Jacobian is block-diagonal (block means), which gives an exact backward.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "isotonic_decreasing", "soft_rank", "soft_spearman", "spearman_loss",
    "hard_ranks", "rank_correlation", "pearson", "time_correlation_rows",
]


def isotonic_decreasing(y: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Solve ``argmin_{v_1 >= ... >= v_n} ||v - y||^2`` with PAV.

    Returns the solution and the sizes of its constant blocks, in order.
    """
    sums: list[float] = []
    counts: list[int] = []
    for yi in np.asarray(y, dtype=np.float64):
        sums.append(float(yi))
        counts.append(1)
        # adjacent blocks violate the ordering when the later mean is not smaller
        while len(sums) > 1 and sums[-2] * counts[-1] <= sums[-1] * counts[-2]:
            s, c = sums.pop(), counts.pop()
            sums[-1] += s
            counts[-1] += c
    solution = np.repeat([s / c for s, c in zip(sums, counts)], counts)
    return solution, counts


def soft_rank(values, eps: float = 1.0) -> Tensor:
    """Ascending soft ranks of a 1-D tensor (smallest value -> rank near 1).

    The output always sums to ``n(n+1)/2``; as ``eps -> 0`` it approaches the
    hard ranks.
    """
    values = values if isinstance(values, Tensor) else Tensor(values)
    if values.ndim != 1 or values.shape[0] < 2:
        raise ValueError(f"soft_rank needs a 1-D input of length >= 2, got shape {values.shape}")
    if not eps > 0:
        raise ValueError(f"soft_rank regularisation must be positive, got {eps}")
    n = values.shape[0]
    theta = values.data / eps
    perm = np.argsort(-theta, kind="stable")
    s = theta[perm]
    w = np.arange(n, 0, -1, dtype=np.float64)
    dual, sizes = isotonic_decreasing(s - w)
    out = np.empty(n)
    out[perm] = s - dual
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        gs = g[perm]
        pooled = np.concatenate([np.full(len(blk), blk.mean()) for blk in np.split(gs, bounds)])
        res = np.empty(n)
        res[perm] = gs - pooled
        return (res / eps,)

    return ad._make(out, (values,), bw, "soft_rank")


def soft_spearman(values, eps: float = 1.0) -> Tensor:
    """Differentiable Spearman coefficient between ``values`` and time ``1..n``.

    An all-pooled soft rank vector has no variance; the coefficient is then
    defined as 0 (a constant, carrying no gradient).
    """
    ranks = soft_rank(values, eps)
    n = ranks.shape[0]
    tc = np.arange(1, n + 1, dtype=np.float64) - (n + 1) / 2.0
    rc = ranks - (n + 1) / 2.0  # soft ranks always have this mean
    ss_r = float(np.sum(rc.data ** 2))
    if ss_r <= 1e-12:
        return Tensor(0.0)
    num = ad.sum(rc * tc)
    return num / (ad.sqrt(ad.sum(rc * rc)) * math.sqrt(float(np.sum(tc * tc))))


def spearman_loss(values, eps: float = 1.0) -> Tensor:
    """Negative soft Spearman coefficient; minimising it favours rising values."""
    return -soft_spearman(values, eps)


def hard_ranks(values) -> np.ndarray:
    """Ascending ranks starting at 1, ties get their average rank."""
    return rankdata(np.asarray(values, dtype=np.float64), method="average")


def pearson(x, y) -> tuple[float, bool]:
    """Pearson coefficient and a degenerate flag (True when either side is constant)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r)), False


def rank_correlation(x, y=None) -> tuple[float, bool]:
    """Spearman coefficient with average-rank ties; ``y`` defaults to ``1..n``."""
    x = np.asarray(x, dtype=np.float64)
    ry = np.arange(1, len(x) + 1, dtype=np.float64) if y is None else hard_ranks(y)
    return pearson(hard_ranks(x), ry)


def time_correlation_rows(rows) -> tuple[np.ndarray, np.ndarray]:
    """Spearman coefficient of each row against ``1..n``, with degenerate flags.

    Row-wise equivalent of ``rank_correlation(row)``; constant rows give 0.
    """
    m = np.asarray(rows, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 2:
        raise ValueError(f"expected a 2-D array with at least 2 columns, got shape {m.shape}")
    n = m.shape[1]
    ranks = rankdata(m, method="average", axis=1)
    rc = ranks - (n + 1) / 2.0
    tc = np.arange(1, n + 1, dtype=np.float64) - (n + 1) / 2.0
    srr = np.sum(rc * rc, axis=1)
    stt = float(np.dot(tc, tc))
    degenerate = srr == 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (rc @ tc) / np.sqrt(srr * stt)
    r = np.where(degenerate, 0.0, np.clip(r, -1.0, 1.0))
    return r, degenerate
