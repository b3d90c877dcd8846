"""Behavioural-cloning objectives and the two-stage training schedule.

Every iteration takes one action-loss step.  After ``monotonic_start``
iterations each iteration additionally takes one monotonicity-loss step, with
its own optimiser state and learning rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor
from .errors import ConfigError, NumericalError
from .policy import TransformerPolicy, state_values_t
from .softrank import soft_spearman
from .trajectory import Dataset, Trajectory


@dataclass(frozen=True)
class TrainConfig:
    """``lr_action`` / ``lr_monotonic`` are a float or a ``(low, high)`` pair
    for a triangular cyclical schedule with half-period ``cycle_steps``."""

    iterations: int = 1000
    monotonic_start: int | None = None
    alpha: float = 0.0
    batch_size: int = 32
    monotonic_batch_size: int = 32
    lr_action: float | tuple[float, float] = 1e-3
    lr_monotonic: float | tuple[float, float] = 2e-4
    cycle_steps: int = 200
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    softrank_eps: float = 1.0
    action_objective: bool = True
    monotonic_objective: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        n1 = self.n1
        if not 0 <= n1 <= self.iterations:
            raise ConfigError(f"monotonic_start must lie in [0, {self.iterations}], got {n1}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.batch_size < 1 or self.monotonic_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if not self.softrank_eps > 0:
            raise ConfigError("softrank_eps must be positive")
        if self.cycle_steps < 1:
            raise ConfigError("cycle_steps must be positive")
        for name in ("lr_action", "lr_monotonic"):
            lr = getattr(self, name)
            lows = lr if isinstance(lr, (tuple, list)) else (lr,)
            if len(lows) not in (1, 2) or any(not v > 0 for v in lows):
                raise ConfigError(f"{name} must be a positive value or a (low, high) pair")
            if isinstance(lr, list):
                object.__setattr__(self, name, tuple(lr))

    @property
    def n1(self) -> int:
        return self.iterations // 2 if self.monotonic_start is None else self.monotonic_start

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


def learning_rate(setting, iteration: int, cycle_steps: int) -> float:
    """Constant rate, or a triangular wave from ``high`` down to ``low`` and back.

    ``iteration`` counts from 0; the wave starts at the high end.
    """
    if not isinstance(setting, (tuple, list)):
        return float(setting)
    low, high = sorted(setting)
    phase = (iteration % (2 * cycle_steps)) / cycle_steps  # in [0, 2)
    frac = phase if phase <= 1 else 2 - phase
    return high - (high - low) * frac


# -- objectives -------------------------------------------------------------------

def action_loss(q: Tensor, actions, alpha: float = 0.0, mask=None) -> Tensor:
    """Mean cross-entropy of the softmax policy minus ``alpha`` times its entropy.

    ``q`` is ``(T, A)`` or ``(B, T, A)``; ``mask`` (same leading shape) selects
    the steps that count.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    actions = np.asarray(actions, dtype=np.int64)
    n_actions = q.shape[-1]
    if actions.shape != q.shape[:-1]:
        raise ValueError(f"actions shape {actions.shape} does not match Q shape {q.shape}")
    m = np.ones(actions.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    valid = m > 0
    if np.any((actions[valid] < 0) | (actions[valid] >= n_actions)):
        raise ValueError(f"action ids must lie in [0, {n_actions})")
    count = float(m.sum())
    if count == 0:
        raise ValueError("action_loss over zero steps")
    onehot = np.zeros(q.shape)
    np.put_along_axis(onehot, np.clip(actions, 0, n_actions - 1)[..., None], 1.0, axis=-1)
    onehot *= m[..., None]
    logp = ad.log_softmax(q)
    ce = -ad.sum(logp * onehot) / count
    if alpha == 0:
        return ce
    p = ad.row_softmax(q)
    entropy = -ad.sum(p * logp * m[..., None]) / count
    return ce - alpha * entropy


def monotonicity_loss(q: Tensor, lengths: Sequence[int], eps: float = 1.0) -> Tensor:
    """Mean negative soft Spearman coefficient between each sequence's state
    values and its time steps.  Sequences shorter than 2 steps are skipped."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    if q.ndim == 2:
        q = ad.reshape(q, (1,) + q.shape)
    v = state_values_t(q)
    terms = [soft_spearman(v[b, :T], eps) for b, T in enumerate(lengths) if T >= 2]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return -total / len(terms)


# -- batching -----------------------------------------------------------------------

def _pad(chunks: Sequence[tuple[np.ndarray, np.ndarray]]):
    T = max(len(a) for _, a in chunks)
    d = chunks[0][0].shape[1]
    X = np.zeros((len(chunks), T, d))
    A = np.zeros((len(chunks), T), dtype=np.int64)
    M = np.zeros((len(chunks), T))
    for i, (s, a) in enumerate(chunks):
        X[i, :len(a)] = s
        A[i, :len(a)] = a
        M[i, :len(a)] = 1.0
    return X, A, M


def _chunks(trajs: Sequence[Trajectory], max_len: int) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for t in trajs:
        for start in range(0, len(t), max_len):
            out.append((t.states[start:start + max_len], t.actions[start:start + max_len]))
    return out


@dataclass
class TrainResult:
    model: TransformerPolicy
    history: list[tuple[int, float, float]] = field(default_factory=list)

    def write_history(self, path: str | Path) -> None:
        write_history_csv(self.history, path)


def write_history_csv(history, path: str | Path) -> None:
    from .data import atomic_write
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "action_loss", "monotonicity_loss"])
    for it, la, lm in history:
        w.writerow([it, "" if math.isnan(la) else repr(la), "" if math.isnan(lm) else repr(lm)])
    atomic_write(path, buf.getvalue())


def train(model: TransformerPolicy, dataset: Dataset | Sequence[Trajectory], cfg: TrainConfig,
          callback: Callable[[int, TransformerPolicy], None] | None = None) -> TrainResult:
    """Fit a copy of ``model`` to normal trajectories; ``model`` itself is untouched.

    ``callback(i, model)`` runs after iteration ``i`` (1-based).
    """
    trajs = [t for t in dataset if len(t) > 0]
    if not trajs:
        raise ValueError("training needs at least one non-empty trajectory")
    bad = [t.id for t in trajs if t.is_anomaly]
    if bad:
        raise ValueError(f"training data must be normal only; {len(bad)} anomalous "
                         f"trajectories (first: {bad[0]})")
    if any(t.state_dim != model.state_dim for t in trajs):
        raise ValueError(f"state dimensionality differs from the model's {model.state_dim}")
    if any(t.actions.max() >= model.action_count for t in trajs):
        raise ValueError(f"action ids must be < {model.action_count}")

    model = model.copy()
    history: list[tuple[int, float, float]] = []
    if cfg.iterations == 0:
        return TrainResult(model, history)

    max_len = model.max_seq_len
    action_chunks = _chunks(trajs, max_len)
    mono_seqs = [(t.states[:max_len], t.actions[:max_len]) for t in trajs if len(t) >= 2]
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    opt_action = AdamW(model.params, betas=cfg.betas, eps=cfg.adam_eps,
                       weight_decay=cfg.weight_decay)
    opt_mono = AdamW(model.params, betas=cfg.betas, eps=cfg.adam_eps,
                     weight_decay=cfg.weight_decay)
    n1 = cfg.n1

    for i in range(1, cfg.iterations + 1):
        la = lm = math.nan
        if cfg.action_objective:
            idx = rng.choice(len(action_chunks), min(cfg.batch_size, len(action_chunks)),
                             replace=False)
            X, A, M = _pad([action_chunks[j] for j in idx])
            opt_action.zero_grad()
            loss = action_loss(model.forward(X, train=True, seed=drop_rng), A, cfg.alpha, M)
            _check_finite(loss, "action", i)
            ad.backward(loss)
            opt_action.step(learning_rate(cfg.lr_action, i - 1, cfg.cycle_steps))
            la = loss.item()
        if cfg.monotonic_objective and i > n1 and mono_seqs:
            idx = rng.choice(len(mono_seqs), min(cfg.monotonic_batch_size, len(mono_seqs)),
                             replace=False)
            batch = [mono_seqs[j] for j in idx]
            X, _, _ = _pad(batch)
            opt_mono.zero_grad()
            loss = monotonicity_loss(model.forward(X, train=True, seed=drop_rng),
                                     [len(a) for _, a in batch], cfg.softrank_eps)
            _check_finite(loss, "monotonicity", i)
            if loss.requires_grad:
                ad.backward(loss)
                opt_mono.step(learning_rate(cfg.lr_monotonic, i - 1 - n1, cfg.cycle_steps))
            lm = loss.item()
        history.append((i, la, lm))
        if callback is not None:
            callback(i, model)
    model.zero_grad()
    return TrainResult(model, history)


def _check_finite(loss: Tensor, which: str, iteration: int) -> None:
    # the per-op check lives in ad.detect_anomaly(); this catches divergence cheaply
    if not math.isfinite(loss.item()):
        raise NumericalError(f"{which} loss became {loss.item()} at iteration {iteration}")
