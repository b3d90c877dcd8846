"""Causal transformer policy whose per-step pre-softmax outputs are Q values.

The network reads the state sequence only.  Row ``t`` of the output depends on
states ``0..t``; the policy is the softmax of that row and the state value is
the policy-weighted mean of the row.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ParseError, ShapeError, VersionError

CHECKPOINT_MAGIC = b"OILADCK\x00"
CHECKPOINT_VERSION = 1
_NEG_INF = -1e9


@dataclass(frozen=True)
class PolicyConfig:
    state_dim: int
    action_count: int
    embed_dim: int = 64
    layers: int = 1
    heads: int = 2
    dropout: float = 0.1
    max_seq_len: int = 512
    positional: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("state_dim", "action_count", "embed_dim", "layers", "heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


def _param_shapes(cfg: PolicyConfig) -> dict[str, tuple[tuple[int, ...], int | None]]:
    """Parameter name -> (shape, fan_in); fan_in None marks layer-norm gains/biases."""
    E, F = cfg.embed_dim, 4 * cfg.embed_dim
    shapes = {"embed.W": ((cfg.state_dim, E), cfg.state_dim), "embed.b": ((E,), cfg.state_dim)}
    if cfg.positional:
        shapes["pos"] = ((cfg.max_seq_len, E), E)
    for i in range(cfg.layers):
        p = f"block{i}."
        shapes.update({
            p + "ln1.g": ((E,), None), p + "ln1.b": ((E,), None),
            p + "Wq": ((E, E), E), p + "Wk": ((E, E), E), p + "Wv": ((E, E), E),
            p + "Wo": ((E, E), E), p + "bo": ((E,), E),
            p + "ln2.g": ((E,), None), p + "ln2.b": ((E,), None),
            p + "W1": ((E, F), E), p + "b1": ((F,), E),
            p + "W2": ((F, E), F), p + "b2": ((E,), F),
        })
    shapes.update({"lnf.g": ((E,), None), "lnf.b": ((E,), None),
                   "head.W": ((E, cfg.action_count), E), "head.b": ((cfg.action_count,), E)})
    return shapes


class TransformerPolicy:
    """Pre-layer-norm causal transformer with learned absolute positions."""

    def __init__(self, cfg: PolicyConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        shapes = _param_shapes(cfg)
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = {}
            for name, (shape, fan_in) in shapes.items():
                if fan_in is None:
                    params[name] = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
                else:
                    bound = 1.0 / math.sqrt(fan_in)
                    params[name] = rng.uniform(-bound, bound, size=shape)
        if set(params) != set(shapes):
            raise VersionError("parameter names do not match the architecture")
        for name, (shape, _) in shapes.items():
            if np.shape(params[name]) != shape:
                raise VersionError(f"parameter {name} has shape {np.shape(params[name])}, expected {shape}")
        self.params = {name: Tensor(np.array(params[name], dtype=np.float64), requires_grad=True)
                       for name in shapes}

    # -- bookkeeping ----------------------------------------------------------
    @property
    def state_dim(self) -> int:
        return self.cfg.state_dim

    @property
    def action_count(self) -> int:
        return self.cfg.action_count

    @property
    def max_seq_len(self) -> int:
        return self.cfg.max_seq_len

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def copy(self) -> "TransformerPolicy":
        return TransformerPolicy(self.cfg, self.arrays())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ----------------------------------------------------------------
    def forward(self, states, train: bool = False, seed=None) -> Tensor:
        """Q values for a batch ``(B, T, d)`` or a single sequence ``(T, d)``.

        In training mode dropout draws from ``seed`` (an int or a Generator).
        A Tensor input stays in the graph, so gradients reach the states too.
        """
        xt = states if isinstance(states, Tensor) else Tensor(np.asarray(states, dtype=np.float64))
        single = xt.ndim == 2
        if single:
            xt = ad.reshape(xt, (1,) + xt.shape)
        x = xt.data
        if x.ndim != 3 or x.shape[2] != self.cfg.state_dim:
            raise ShapeError(f"expected states of shape (T, {self.cfg.state_dim}), got {tuple(xt.shape)}")
        B, T, _ = x.shape
        if not 1 <= T <= self.cfg.max_seq_len:
            raise ShapeError(f"sequence length {T} outside [1, {self.cfg.max_seq_len}]")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        P = self.params
        rate = self.cfg.dropout
        h = xt @ P["embed.W"] + P["embed.b"]
        if self.cfg.positional:
            h = h + P["pos"][:T]
        h = ad.dropout(h, rate, rng, train)
        mask = np.triu(np.full((T, T), _NEG_INF), k=1)
        for i in range(self.cfg.layers):
            p = f"block{i}."
            a = ad.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
            a = self._attention(a, p, mask, B, T)
            h = h + ad.dropout(a, rate, rng, train)
            f = ad.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
            f = ad.gelu(f @ P[p + "W1"] + P[p + "b1"]) @ P[p + "W2"] + P[p + "b2"]
            h = h + ad.dropout(f, rate, rng, train)
        h = ad.layer_norm(h, P["lnf.g"], P["lnf.b"])
        q = h @ P["head.W"] + P["head.b"]
        return q[0] if single else q

    def _attention(self, a: Tensor, p: str, mask: np.ndarray, B: int, T: int) -> Tensor:
        P = self.params
        H = self.cfg.heads
        E = self.cfg.embed_dim
        Dh = E // H

        def split(t):
            return ad.transpose(ad.reshape(t, (B, T, H, Dh)), (0, 2, 1, 3))

        q, k, v = split(a @ P[p + "Wq"]), split(a @ P[p + "Wk"]), split(a @ P[p + "Wv"])
        scores = (q @ ad.transpose(k)) * (1.0 / math.sqrt(Dh)) + mask
        att = ad.row_softmax(scores) @ v
        merged = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, E))
        return merged @ P[p + "Wo"] + P[p + "bo"]

    def q_values(self, states) -> np.ndarray:
        """Eval-mode Q values ``(T, |A|)`` of one sequence.

        The input is zero-padded to ``max_seq_len`` so that every call runs the
        same computation; a prefix therefore gets bitwise the same rows as the
        full sequence.
        """
        x = np.asarray(states, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.state_dim:
            raise ShapeError(f"expected states of shape (T, {self.cfg.state_dim}), got {x.shape}")
        T = x.shape[0]
        if not 1 <= T <= self.cfg.max_seq_len:
            raise ShapeError(f"sequence length {T} outside [1, {self.cfg.max_seq_len}]")
        padded = np.zeros((self.cfg.max_seq_len, self.cfg.state_dim))
        padded[:T] = x
        with ad.no_grad():
            q = self.forward(padded, train=False).data
        return q[:T].copy()


def forward(model: TransformerPolicy, states, train_flag: bool = False, seed=None) -> np.ndarray:
    """Q-value rows for ``states``; eval mode is a pure function of the input."""
    if train_flag:
        with ad.no_grad():
            return model.forward(states, train=True, seed=seed).data
    return model.q_values(states)


def policy_probs(q) -> np.ndarray:
    """Softmax over actions, row by row."""
    q = np.asarray(q, dtype=np.float64)
    z = np.exp(q - q.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def state_values(q) -> np.ndarray:
    """Policy-weighted mean of each Q row."""
    q = np.asarray(q, dtype=np.float64)
    return np.sum(policy_probs(q) * q, axis=-1)


def state_values_t(q: Tensor) -> Tensor:
    """Differentiable :func:`state_values` (last axis = actions)."""
    return ad.sum(ad.row_softmax(q) * q, axis=-1)


# -- checkpoints --------------------------------------------------------------------

def checkpoint_bytes(model: TransformerPolicy) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    arch = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    names = list(_param_shapes(model.cfg))
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(model: TransformerPolicy, path: str | Path) -> None:
    from .data import atomic_write

    atomic_write(path, checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes, expect: dict | None = None) -> TransformerPolicy:
    r = _Reader(data)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ParseError("not a policy checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    (n,) = r.unpack("<I")
    try:
        arch = json.loads(r.take(n).decode())
        cfg = PolicyConfig(**arch)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad architecture record: {exc}") from exc
    if expect:
        diff = {k: (arch.get(k), v) for k, v in expect.items() if arch.get(k) != v}
        if diff:
            raise VersionError(f"checkpoint architecture mismatch: {diff}")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} trailing bytes after the last parameter")
    return TransformerPolicy(cfg, params)


def load_checkpoint(path: str | Path, expect: dict | None = None) -> TransformerPolicy:
    return checkpoint_from_bytes(Path(path).read_bytes(), expect)
