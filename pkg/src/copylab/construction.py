"""Hand-set depth-2 copy transformer that copies by n-gram hashing, plus its table oracle.

Prompt layout, 0-based: position 0 holds BOS, positions ``1..L`` the string
``x``, position ``L+1`` the COPY token; generated tokens follow. The copier
with match parameter ``n`` hashes windows of ``w = n + 1`` tokens, the window
used by the repeated-n-gram scan in ``tasks``, so every string without a
repeated n-gram is copied exactly.

The first block is computed from Hard-ALiBi window averages ``h_1..h_{w+1}``
followed by ReLU gates. The second block is one softmax head at temperature
``tau`` whose output is decoded by nearest codeword.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attention import averaging_head, head_forward_all
from .numerics import relu, softmax_stable
from .tasks import Vocab

__all__ = [
    "PreconditionError",
    "ProofEmbedding",
    "ConstructedCopier",
    "FirstBlockOut",
    "IdentityCheck",
    "check_identities",
    "HashCopyState",
    "embed",
    "build_copier",
    "first_block",
    "retrieve",
    "attention_weights",
    "decode",
    "decode_batch",
    "generate_copy",
    "generate_copy_batch",
    "generate_copy_reference",
    "algorithm1_copy",
    "algorithm1_copy_batch",
    "manifest_text",
    "write_manifest",
]


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class ProofEmbedding:
    """Unit-norm token codes: BOS and COPY on the first two axes, sign vectors elsewhere."""

    D: int
    d: int
    table: np.ndarray = field(repr=False)  # (D+2, d): ordinary 0..D-1, then BOS, COPY
    codewords: np.ndarray = field(repr=False)  # (D, d-2) bits, 0 -> +, 1 -> -

    @property
    def bos(self) -> int:
        return self.D

    @property
    def copy(self) -> int:
        return self.D + 1

    @property
    def size(self) -> int:
        return self.D + 2

    def __call__(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.size):
            raise ValueError(f"token outside 0..{self.size - 1}")
        return self.table[tokens]


def embed(vocab) -> ProofEmbedding:
    D = vocab.D if isinstance(vocab, Vocab) else int(vocab)
    if D < 1:
        raise ValueError("alphabet needs at least one ordinary token")
    # one sign coordinate even for D == 1
    dp = max(1, (D - 1).bit_length())
    d = dp + 2
    bits = (np.arange(D)[:, None] >> np.arange(dp - 1, -1, -1)[None, :]) & 1
    table = np.zeros((D + 2, d))
    table[:D, 2:] = (1 - 2 * bits) / math.sqrt(dp)
    table[D, 0] = 1.0
    table[D + 1, 1] = 1.0
    table.setflags(write=False)
    bits.setflags(write=False)
    return ProofEmbedding(D, d, table, bits)


@dataclass(frozen=True)
class ConstructedCopier:
    D: int
    n: int
    L_max: int
    tau: float
    emb: ProofEmbedding

    @property
    def w(self) -> int:
        """Hash window in tokens."""
        return self.n + 1

    @property
    def d(self) -> int:
        return self.emb.d

    @property
    def K(self) -> int:
        # also covers every position the head can attend to
        return max(self.D**self.n, 2 * self.L_max + 2)

    @property
    def key_width(self) -> int:
        return (self.d + 1) * self.w

    @property
    def epsilon(self) -> float:
        """Bound on attention mass off the matching key."""
        return 2 * self.K * math.exp(-self.tau / self.d)


def default_tau(d: int, K: int) -> float:
    return d * math.log(8 * K * d)


def build_copier(D: int, n: int, L_max: int, tau: float | None = None, check_range: bool = True) -> ConstructedCopier:
    """Copier guaranteed exact on strings of length ``<= L_max`` without repeated n-grams.

    ``check_range`` enforces ``2n <= L_max <= D^n``.
    """
    if n < 1:
        raise ValueError("match parameter n must be >= 1")
    if L_max < 1:
        raise ValueError("L_max must be >= 1")
    if check_range and not (2 * n <= L_max <= D**n):
        raise PreconditionError(f"need 2n <= L_max <= D^n, got n={n}, L_max={L_max}, D^n={D**n}")
    emb = embed(D)
    c = ConstructedCopier(D, n, L_max, 0.0, emb)
    t = default_tau(emb.d, c.K) if tau is None else float(tau)
    if not t > 0:
        raise ValueError("temperature must be positive")
    return ConstructedCopier(D, n, L_max, t, emb)


# ---------------------------------------------------------------------------
# first block
# ---------------------------------------------------------------------------


@dataclass
class FirstBlockOut:
    keys: np.ndarray  # (..., T, (d+1)w)
    queries: np.ndarray  # (..., T, (d+1)w)
    values: np.ndarray  # (..., T, d)


def _window_sums(xs: np.ndarray, m: int) -> np.ndarray:
    """``S[t-1]`` = sum of the last ``min(t, p+1)`` rows at each position, newest first."""
    T = xs.shape[-2]
    S = np.empty((m,) + xs.shape)
    acc = xs.copy()
    S[0] = acc
    for t in range(1, m):
        if t < T:
            acc[..., t:, :] += xs[..., :-t, :]
        S[t] = acc
    return S


def _counts(T: int, m: int) -> np.ndarray:
    return np.minimum(np.arange(1, T + 1)[None, :], np.arange(1, m + 1)[:, None]).astype(np.float64)


def _gates(h: np.ndarray, w: int):
    """Key, query and value features from the averages ``h[t-1] = h_t``, ``t = 1..w+1``.

    ``g_t = (t+1) h_{t+1} - t h_t`` recovers the embedding ``t`` steps back.
    Embedding blocks are gated off until the window is clear of BOS; the
    indicator coordinates mark the first ``w`` positions (keys) and the ``w``
    positions starting at COPY (queries).
    """
    g = np.empty((w + 1,) + h.shape[1:])
    g[0] = h[0]
    for t in range(1, w + 1):
        g[t] = (t + 1) * h[t] - t * h[t - 1]
    gate = (w * g[w][..., 0])[..., None]
    hat = relu(g - gate) - relu(-g - gate)
    tilde = relu(2.0 * (g[1:, ..., 0] - h[0][..., 0]) - 1.0)
    star = relu(g[:w, ..., 1])
    keys = np.concatenate([hat[t] for t in range(1, w + 1)] + [np.moveaxis(tilde, 0, -1)], axis=-1)
    queries = np.concatenate([hat[t] for t in range(w)] + [w * np.moveaxis(star, 0, -1)], axis=-1)
    return keys, queries, h[0].copy()


def _check_bos(copier: ConstructedCopier, xs: np.ndarray):
    if xs.shape[-2] < 1 or not np.all(xs[..., 0, :] == copier.emb.table[copier.emb.bos]):
        raise ValueError("input must begin with BOS")


def first_block(copier: ConstructedCopier, xs: np.ndarray, via_heads: bool = False) -> FirstBlockOut:
    """Per-position key, query and value features of an embedded sequence ``(..., T, d)``.

    With ``via_heads`` the averages come from explicit Hard-ALiBi attention
    heads (2-D input only) instead of exact window sums.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[-1] != copier.d:
        raise ValueError(f"embedded inputs must have width {copier.d}")
    _check_bos(copier, xs)
    m = copier.w + 1
    if via_heads:
        if xs.ndim != 2:
            raise ValueError("head path takes a single (T, d) sequence")
        h = np.stack([head_forward_all(averaging_head(copier.d, t), xs) for t in range(1, m + 1)])
    else:
        cnt = _counts(xs.shape[-2], m).reshape((m,) + (1,) * (xs.ndim - 2) + (xs.shape[-2], 1))
        h = _window_sums(xs, m) / cnt
    return FirstBlockOut(*_gates(h, copier.w))


@dataclass
class IdentityCheck:
    positions: int
    embed_max_err: float  # worst embedding-block deviation
    embed_violations: int  # blocks off by more than ``tol``
    indicator_violations: int  # indicator or value coordinates not exactly as predicted

    @property
    def ok(self) -> bool:
        return self.embed_violations == 0 and self.indicator_violations == 0


def check_identities(copier: ConstructedCopier, tokens, L: int, tol: float = 1e-12) -> IdentityCheck:
    """Compare first-block features of ``tokens`` (BOS, x, COPY, ...) with their closed forms.

    At 0-based position ``p``, block ``t = 1..w``: the key block equals
    ``Psi(tok[p-t])`` and the query block ``Psi(tok[p-t+1])`` once ``p >= w+1``
    (zero before); key indicator ``t`` is ``1{p = t}``; query indicator ``t`` is
    ``w * 1{p = L+t}``; the value is ``Psi(tok[p])``. The closed forms assume a
    single COPY, at position ``L+1``, and ``L >= n - 1``; shorter strings leave
    BOS inside the truncated windows right after COPY.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.flatnonzero(tokens == copier.emb.copy).tolist() != [L + 1]:
        raise ValueError("tokens must contain exactly one COPY, at position L+1")
    E = copier.emb(tokens)
    fb = first_block(copier, E)
    w, d = copier.w, copier.d
    T = len(tokens)
    worst = 0.0
    bad_e = bad_i = 0
    for p in range(T):
        live = p >= w + 1
        for t in range(1, w + 1):
            sl = slice((t - 1) * d, t * d)
            ek = E[p - t] if live else 0.0
            eq = E[p - t + 1] if live else 0.0
            err = max(np.abs(fb.keys[p, sl] - ek).max(), np.abs(fb.queries[p, sl] - eq).max())
            worst = max(worst, float(err))
            bad_e += err > tol
            bad_i += fb.keys[p, w * d + t - 1] != (1.0 if p == t else 0.0)
            bad_i += fb.queries[p, w * d + t - 1] != (float(w) if p == L + t else 0.0)
        bad_i += not np.array_equal(fb.values[p], E[p])
    return IdentityCheck(T, worst, int(bad_e), int(bad_i))


def _features_at(copier: ConstructedCopier, E: np.ndarray, p: int):
    """Features at position ``p`` of a batch buffer ``E (B, P, d)``; bitwise equal to ``first_block``."""
    m = copier.w + 1
    S = np.empty((m, E.shape[0], E.shape[2]))
    acc = E[:, p].copy()
    S[0] = acc
    for t in range(1, m):
        if p - t >= 0:
            acc += E[:, p - t]
        S[t] = acc
    cnt = np.minimum(np.arange(1, m + 1), p + 1).astype(np.float64)
    return _gates(S / cnt[:, None, None], copier.w)


# ---------------------------------------------------------------------------
# second block and decoding
# ---------------------------------------------------------------------------


def attention_weights(copier: ConstructedCopier, keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    return softmax_stable(copier.tau * (np.asarray(keys) @ np.asarray(query)))


def retrieve(copier: ConstructedCopier, keys: np.ndarray, values: np.ndarray, query: np.ndarray) -> np.ndarray:
    """``values^T softmax(tau * keys query)`` over the given positions."""
    return np.asarray(values).T @ attention_weights(copier, keys, query)


def decode(emb: ProofEmbedding, z) -> int:
    """Token maximizing ``<z, Psi(x)>`` over the full vocabulary, lowest id on ties."""
    return int(np.argmax(emb.table @ np.asarray(z, dtype=np.float64)))


def decode_batch(emb: ProofEmbedding, Z: np.ndarray) -> np.ndarray:
    return np.argmax(Z @ emb.table.T, axis=-1)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

_CHUNK_BYTES = 64 << 20


def _parse_prompt(copier: ConstructedCopier, prompt) -> np.ndarray:
    prompt = np.asarray(prompt, dtype=np.int64)
    e = copier.emb
    if prompt.ndim != 1 or len(prompt) < 3 or prompt[0] != e.bos or prompt[-1] != e.copy:
        raise ValueError("prompt must be BOS, x_1..x_L, COPY with L >= 1")
    x = prompt[1:-1]
    if np.any((x < 0) | (x >= copier.D)):
        raise ValueError("prompt body must contain ordinary tokens only")
    return x


def _check_strings(copier: ConstructedCopier, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("strings must be a (B, L) array with L >= 1")
    if X.shape[1] > copier.L_max:
        raise PreconditionError(f"L={X.shape[1]} exceeds L_max={copier.L_max}")
    if X.size and (X.min() < 0 or X.max() >= copier.D):
        raise ValueError("strings must contain ordinary tokens only")


def _generate_chunk(copier: ConstructedCopier, X: np.ndarray) -> np.ndarray:
    B, L = X.shape
    e = copier.emb
    P = 2 * L + 1  # positions that ever act as keys or queries
    toks = np.empty((B, P + 1), dtype=np.int64)
    toks[:, 0] = e.bos
    toks[:, 1 : L + 1] = X
    toks[:, L + 1] = e.copy
    E = np.zeros((B, P, copier.d))
    E[:, : L + 2] = e.table[toks[:, : L + 2]]
    keys_t = np.zeros((B, copier.key_width, P))
    vals = np.zeros((B, P, copier.d))
    fb = first_block(copier, E[:, : L + 2])
    keys_t[:, :, : L + 2] = np.swapaxes(fb.keys, 1, 2)
    vals[:, : L + 2] = fb.values
    q = fb.queries[:, L + 1]
    for p in range(L + 1, P):
        z = kernels.softmax_read(keys_t, vals, q, p, copier.tau)
        y = decode_batch(e, z)
        toks[:, p + 1] = y
        if p + 1 < P:
            E[:, p + 1] = e.table[y]
            k, q, v = _features_at(copier, E, p + 1)
            keys_t[:, :, p + 1] = k
            vals[:, p + 1] = v
    return toks[:, L + 2 :]


def generate_copy_batch(copier: ConstructedCopier, X, chunk: int | None = None) -> np.ndarray:
    """Greedy autoregressive copies of each row of ``X (B, L)``; returns ``(B, L)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.int64))
    _check_strings(copier, X)
    B, L = X.shape
    if kernels.backend() == "numba":
        return kernels.copier_generate(X, copier.emb.table, copier.w, copier.tau)
    if chunk is None:
        per_row = (2 * L + 1) * (copier.key_width + 2 * copier.d) * 8
        chunk = max(1, _CHUNK_BYTES // per_row)
    out = np.empty_like(X)
    for s in range(0, B, chunk):
        out[s : s + chunk] = _generate_chunk(copier, X[s : s + chunk])
    return out


def generate_copy(copier: ConstructedCopier, prompt) -> np.ndarray:
    """Run the copier on ``BOS, x, COPY`` and return the ``L`` generated tokens."""
    x = _parse_prompt(copier, prompt)
    return generate_copy_batch(copier, x[None, :])[0]


def generate_copy_reference(copier: ConstructedCopier, prompt) -> np.ndarray:
    """Slow path: recompute the first block over the whole sequence at every step."""
    x = _parse_prompt(copier, prompt)
    _check_strings(copier, x[None, :])
    seq = list(np.asarray(prompt, dtype=np.int64))
    L = len(x)
    for _ in range(L):
        fb = first_block(copier, copier.emb(seq))
        z = retrieve(copier, fb.keys, fb.values, fb.queries[-1])
        seq.append(decode(copier.emb, z))
    return np.array(seq[L + 2 :], dtype=np.int64)


# ---------------------------------------------------------------------------
# hash-table oracle
# ---------------------------------------------------------------------------


class HashCopyState:
    """Map from each length-``w`` window of ``x`` to its successor; first occurrence wins."""

    def __init__(self, x, w: int):
        self.x = [int(t) for t in x]
        self.w = w
        self.table: dict[tuple, tuple[int, int]] = {}
        for i in range(len(self.x) - w):
            key = tuple(self.x[i : i + w])
            if key not in self.table:
                self.table[key] = (self.x[i + w], i)

    def lookup(self, window) -> int | None:
        hit = self.table.get(tuple(int(t) for t in window))
        return None if hit is None else hit[0]


def algorithm1_copy(x, n: int) -> tuple[np.ndarray, int]:
    """Copy ``x`` by hashing the previous ``n + 1`` outputs; returns ``(y, misses)``.

    The first ``n + 1`` tokens are copied directly. A lookup that finds no key
    emits token 0 and counts as a miss.
    """
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 1 or len(x) < 1:
        raise ValueError("x must be a non-empty 1-D token array")
    w = n + 1
    state = HashCopyState(x, w)
    y = list(state.x[:w])
    misses = 0
    for j in range(w, len(x)):
        nxt = state.lookup(y[j - w : j])
        if nxt is None:
            nxt = 0
            misses += 1
        y.append(nxt)
    return np.array(y, dtype=np.int64), misses


def algorithm1_copy_batch(X, n: int, D: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``algorithm1_copy`` over the rows of ``X``."""
    return kernels.hash_copy(np.atleast_2d(np.asarray(X, dtype=np.int64)), n + 1, D)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def manifest_text(copier: ConstructedCopier) -> str:
    lines = [
        f"D = {copier.D}",
        f"n = {copier.n}",
        f"window = {copier.w}",
        f"L_max = {copier.L_max}",
        f"d = {copier.d}",
        f"K = {copier.K}",
        f"tau = {copier.tau!r}",
        f"epsilon = {copier.epsilon!r}",
    ]
    for tok in range(copier.D):
        bits = "".join(str(int(b)) for b in copier.emb.codewords[tok])
        lines.append(f"codeword {tok} = {bits}")
    return "\n".join(lines) + "\n"


def write_manifest(copier: ConstructedCopier, path) -> None:
    with open(path, "w") as f:
        f.write(manifest_text(copier))
