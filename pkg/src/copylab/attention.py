"""Softmax attention heads with positional bias schemes (forward pass only).

Conventions follow the column-vector form: ``k_j = W_k x_j``, ``q_i = W_q x_i``,
``v_j = W_v x_j`` and ``o_i = V_i softmax(K_i q_i + b_i)``, causal, with no
``1/sqrt(d)`` scaling on this path. The trainable models in ``models`` reuse
``bias_matrix`` and ``rope_tables`` but add the scaling themselves.

Positions passed to ``bias_row`` are 1-based, as in the formulas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .numerics import NEG_INF, relu, softmax_stable


@dataclass(frozen=True)
class HardAlibi:
    """Attend only to the ``m`` most recent positions (``m = inf`` disables the mask)."""

    m: float

    def __post_init__(self):
        if not (self.m >= 1):
            raise ValueError("Hard-ALiBi window must be >= 1 (or inf)")


@dataclass(frozen=True)
class Alibi:
    slope: float

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError("ALiBi slope must be positive")


@dataclass(frozen=True)
class NoPE:
    pass


@dataclass(frozen=True)
class Rope:
    angle_base: float = 10000.0


BiasScheme = Union[HardAlibi, Alibi, NoPE, Rope]


def alibi_slopes(heads: int) -> list[float]:
    """Per-head slopes ``2^(-h/2)`` for ``h = 1..heads``."""
    return [2.0 ** (-h / 2) for h in range(1, heads + 1)]


def bias_row(scheme: BiasScheme, i: int, length: int | None = None) -> np.ndarray:
    """Biases ``b_{i,1..i}`` for query position ``i`` (1-based)."""
    if i < 1 or (length is not None and i > length):
        raise ValueError("query position out of range")
    j = np.arange(1, i + 1)
    if isinstance(scheme, HardAlibi):
        return np.where(j <= i - scheme.m, NEG_INF, 0.0)
    if isinstance(scheme, Alibi):
        return -scheme.slope * (i - j).astype(np.float64)
    if isinstance(scheme, (NoPE, Rope)):
        return np.zeros(i)
    raise TypeError(f"unknown bias scheme {scheme!r}")


def bias_matrix(scheme: BiasScheme, T: int) -> np.ndarray:
    """``T x T`` additive bias including the causal mask (row = query)."""
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    dist = (i - j).astype(np.float64)
    if isinstance(scheme, HardAlibi):
        out = np.where(dist >= scheme.m, NEG_INF, 0.0)
    elif isinstance(scheme, Alibi):
        out = -scheme.slope * dist
    elif isinstance(scheme, (NoPE, Rope)):
        out = np.zeros((T, T))
    else:
        raise TypeError(f"unknown bias scheme {scheme!r}")
    out[j > i] = NEG_INF
    return out


def rope_tables(T: int, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``(T, dim // 2)`` for half-split rotary embedding."""
    if dim % 2:
        raise ValueError("rotary dimension must be even")
    inv = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = np.arange(T, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


@dataclass
class HeadParams:
    W_k: np.ndarray
    W_q: np.ndarray
    W_v: np.ndarray
    bias: BiasScheme = field(default_factory=NoPE)

    def __post_init__(self):
        d = self.W_k.shape[0]
        for W in (self.W_k, self.W_q, self.W_v):
            if W.shape != (d, d):
                raise ValueError("head projections must be square and share dimension d")

    @property
    def d(self) -> int:
        return self.W_k.shape[0]


def head_attention(params: HeadParams, xs: np.ndarray) -> np.ndarray:
    """Attention weights, row ``i`` = distribution of query ``i+1`` over positions ``1..i+1``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != params.d:
        raise ValueError(f"expected inputs of shape (T, {params.d}), got {xs.shape}")
    T = len(xs)
    k = xs @ params.W_k.T
    q = xs @ params.W_q.T
    if isinstance(params.bias, Rope):
        cos, sin = rope_tables(T, params.d, params.bias.angle_base)
        k, q = apply_rope(k, cos, sin), apply_rope(q, cos, sin)
    scores = q @ k.T + bias_matrix(params.bias, T)
    return softmax_stable(scores, axis=-1)


def head_forward_all(params: HeadParams, xs: np.ndarray) -> np.ndarray:
    """Outputs ``o_1..o_T`` of one head, shape ``(T, d)``."""
    v = np.asarray(xs, dtype=np.float64) @ params.W_v.T
    return head_attention(params, xs) @ v


def head_forward(params: HeadParams, xs: np.ndarray) -> np.ndarray:
    """Output ``o_i`` at the last position ``i = len(xs)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) < 1:
        raise ValueError("need at least one position")
    if xs.ndim != 2 or xs.shape[1] != params.d:
        raise ValueError(f"expected inputs of shape (i, {params.d}), got {xs.shape}")
    i = len(xs)
    k = xs @ params.W_k.T
    q = xs[-1] @ params.W_q.T
    if isinstance(params.bias, Rope):
        cos, sin = rope_tables(i, params.d, params.bias.angle_base)
        k = apply_rope(k, cos, sin)
        q = apply_rope(q, cos[-1], sin[-1])
    s = softmax_stable(k @ q + bias_row(params.bias, i))
    return (xs @ params.W_v.T).T @ s


def window_sums(xs: np.ndarray, t: int) -> np.ndarray:
    """``sum_{s=0}^{t-1} x_{i-s}`` at every position, accumulated newest-first.

    The fixed accumulation order makes per-position and whole-sequence
    evaluation agree bit for bit.
    """
    xs = np.asarray(xs, dtype=np.float64)
    acc = xs.copy()
    for s in range(1, t):
        if s >= len(xs):
            break
        acc[s:] += xs[:-s]
    return acc


def avg_heads(xs: np.ndarray, t: int) -> np.ndarray:
    """Running window average ``h_t`` at every position, shape ``(T, d)``."""
    if t < 1:
        raise ValueError("window must be >= 1")
    counts = np.minimum(np.arange(1, len(xs) + 1), t).astype(np.float64)
    return window_sums(xs, t) / counts[:, None]


def avg_head(t: int, xs: np.ndarray) -> np.ndarray:
    """``h_t(x_1..x_i) = mean of the last min(t, i) inputs``."""
    if t < 1:
        raise ValueError("window must be >= 1")
    xs = np.asarray(xs, dtype=np.float64)
    i = len(xs)
    acc = xs[i - 1].copy()
    for s in range(1, min(t, i)):
        acc += xs[i - 1 - s]
    return acc / float(min(t, i))


def averaging_head(d: int, t: float) -> HeadParams:
    """Zero key/query, identity value, Hard-ALiBi window ``t``: computes ``h_t``."""
    return HeadParams(np.zeros((d, d)), np.zeros((d, d)), np.eye(d), HardAlibi(t))


@dataclass
class BlockParams:
    heads: Sequence[HeadParams]
    U1: np.ndarray  # (d*l, hidden)
    U2: np.ndarray  # (hidden, d*l)

    def __post_init__(self):
        if not self.heads:
            raise ValueError("a block needs at least one head")
        d = self.heads[0].d
        if any(h.d != d for h in self.heads):
            raise ValueError("all heads must share dimension d")
        width = d * len(self.heads)
        if self.U2.shape[1] != width or self.U1.shape[0] != width or self.U1.shape[1] != self.U2.shape[0]:
            raise ValueError("MLP shapes do not match the concatenated head width")


def block_forward(params: BlockParams, xs: np.ndarray, residual: bool = False) -> np.ndarray:
    """Heads in parallel, concatenated, then the token-wise MLP ``U1 relu(U2 z)``.

    ``residual`` adds the concatenated head output back (only meaningful when
    the MLP width matches); the proof-faithful path leaves it off.
    """
    z = np.concatenate([head_forward_all(h, xs) for h in params.heads], axis=1)
    out = relu(z @ params.U2.T) @ params.U1.T
    return z + out if residual else out
