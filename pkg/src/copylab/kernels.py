"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The backend is chosen once from the environment: set ``COPYLAB_DISABLE_NUMBA=1``
to force the numpy path (also used automatically when numba is missing).
``set_backend`` switches at runtime, which the benchmark and the parity tests
rely on.

Every public function here takes plain integer / float arrays and returns
plain arrays, so callers never see which path ran.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


_ENV_FLAG = "COPYLAB_DISABLE_NUMBA"
_BACKEND = "numpy" if (os.environ.get(_ENV_FLAG, "0") not in ("", "0") or not HAS_NUMBA) else "numba"

# window codes must stay exact in int64
_CODE_LIMIT = 2**62


def backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, _BACKEND = _BACKEND, name
    return prev


def _codes_fit(base: int, w: int) -> bool:
    return w <= 0 or base**w < _CODE_LIMIT


# ---------------------------------------------------------------------------
# repeated windows
# ---------------------------------------------------------------------------


@njit(cache=True)
def _repeated_windows_nb(X, w, base):
    B, L = X.shape
    P = L - w + 1
    out = np.zeros(B, dtype=np.bool_)
    if P < 2:
        return out
    top = 1
    for _ in range(w - 1):
        top *= base
    size = 4
    while size < 2 * P:
        size *= 2
    slots = np.empty(size, dtype=np.int64)
    used = np.zeros(size, dtype=np.int64)
    for b in range(B):
        stamp = b + 1  # avoids clearing the table per row
        c = 0
        for s in range(w - 1):
            c = c * base + X[b, s]
        for i in range(P):
            if i:
                c -= X[b, i - 1] * top
            c = c * base + X[b, i + w - 1]
            h = ((c ^ (c >> 17)) * 0x2545F4914F6CDD1D) & (size - 1)
            while used[h] == stamp and slots[h] != c:
                h = (h + 1) & (size - 1)
            if used[h] == stamp:
                out[b] = True
                break
            used[h] = stamp
            slots[h] = c
    return out


def _repeated_windows_np(X, w, base):
    B, L = X.shape
    if L - w + 1 < 2:
        return np.zeros(B, dtype=bool)
    powers = base ** np.arange(w - 1, -1, -1, dtype=np.int64)
    codes = sliding_window_view(X, w, axis=1) @ powers
    codes.sort(axis=1)
    return (np.diff(codes, axis=1) == 0).any(axis=1)


def _repeated_windows_exact_row(row, w) -> bool:
    seen = set()
    for i in range(len(row) - w + 1):
        key = tuple(row[i : i + w])
        if key in seen:
            return True
        seen.add(key)
    return False


def repeated_windows(X: np.ndarray, w: int, base: int | None = None) -> np.ndarray:
    """Per row of ``X``, whether two length-``w`` windows at distinct offsets coincide."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.int64)
    if w < 1:
        raise ValueError("window length must be >= 1")
    if base is None:
        base = int(X.max()) + 1 if X.size else 1
    base = max(base, 2)
    w_fit = w
    while not _codes_fit(base, w_fit):
        w_fit -= 1
    fn = _repeated_windows_nb if _BACKEND == "numba" else _repeated_windows_np
    out = fn(X, w_fit, base)
    if w_fit < w:
        # a repeat at length w implies one at w_fit; confirm candidates exactly
        for b in np.flatnonzero(out):
            out[b] = _repeated_windows_exact_row(X[b], w)
    return out


# ---------------------------------------------------------------------------
# hash-table copying (the reference n-gram lookup algorithm)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _hash_copy_nb(X, w, base):
    B, L = X.shape
    Y = np.zeros((B, L), dtype=np.int64)
    miss = np.zeros(B, dtype=np.int64)
    nkeys = max(L - w, 0)
    codes = np.empty(nkeys, dtype=np.int64)
    for b in range(B):
        for j in range(min(w, L)):
            Y[b, j] = X[b, j]
        if nkeys == 0:
            continue
        for i in range(nkeys):
            c = 0
            for s in range(w):
                c = c * base + X[b, i + s]
            codes[i] = c
        # stable sort keeps earliest position first among equal codes
        order = np.argsort(codes, kind="mergesort")
        srt = codes[order]
        for j in range(w, L):
            q = 0
            for s in range(w):
                q = q * base + Y[b, j - w + s]
            k = np.searchsorted(srt, q)
            if k < nkeys and srt[k] == q:
                Y[b, j] = X[b, order[k] + w]
            else:
                Y[b, j] = 0
                miss[b] += 1
    return Y, miss


def _hash_copy_np(X, w, base):
    B, L = X.shape
    Y = np.zeros((B, L), dtype=np.int64)
    miss = np.zeros(B, dtype=np.int64)
    Y[:, : min(w, L)] = X[:, : min(w, L)]
    nkeys = L - w
    if nkeys <= 0:
        return Y, miss
    powers = base ** np.arange(w - 1, -1, -1, dtype=np.int64)
    keys = sliding_window_view(X[:, :-1], w, axis=1) @ powers  # (B, nkeys)
    rows = np.arange(B)
    for j in range(w, L):
        q = Y[:, j - w : j] @ powers
        hit = keys == q[:, None]
        found = hit.any(axis=1)
        first = hit.argmax(axis=1)
        Y[:, j] = np.where(found, X[rows, first + w], 0)
        miss += ~found
    return Y, miss


def hash_copy(X: np.ndarray, w: int, base: int) -> tuple[np.ndarray, np.ndarray]:
    """Copy each row of ``X`` by looking up its previous ``w`` outputs.

    Returns the copies and, per row, the number of lookups that found no key.
    """
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.int64)
    if not _codes_fit(max(base, 2), w):
        raise ValueError(f"window {w} too long for exact int64 codes at base {base}")
    fn = _hash_copy_nb if _BACKEND == "numba" else _hash_copy_np
    return fn(X, w, max(base, 2))


# ---------------------------------------------------------------------------
# exhaustive enumeration of all D^L strings
# ---------------------------------------------------------------------------


@njit(cache=True)
def _count_repeats_all_nb(D, L, w):
    P = L - w + 1
    if P < 2:
        return 0
    total = 1
    for _ in range(L):
        total *= D
    digits = np.zeros(L, dtype=np.int64)
    codes = np.empty(P, dtype=np.int64)
    count = 0
    for _ in range(total):
        for i in range(P):
            c = 0
            for s in range(w):
                c = c * D + digits[i + s]
            codes[i] = c
        hit = False
        for i in range(P):
            for j in range(i + 1, P):
                if codes[i] == codes[j]:
                    hit = True
                    break
            if hit:
                break
        if hit:
            count += 1
        # increment base-D counter, last position fastest
        pos = L - 1
        while pos >= 0:
            digits[pos] += 1
            if digits[pos] < D:
                break
            digits[pos] = 0
            pos -= 1
    return count


def all_strings(D: int, L: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Rows ``start..stop`` of the lexicographic enumeration of ``range(D)^L``."""
    total = D**L
    stop = total if stop is None else min(stop, total)
    idx = np.arange(start, stop, dtype=np.int64)
    powers = D ** np.arange(L - 1, -1, -1, dtype=np.int64)
    return (idx[:, None] // powers) % D


def _count_repeats_all_np(D, L, w, chunk=1 << 16):
    if L - w + 1 < 2:
        return 0
    total = D**L
    count = 0
    for start in range(0, total, chunk):
        X = all_strings(D, L, start, start + chunk)
        count += int(_repeated_windows_np(X, w, max(D, 2)).sum())
    return count


def count_repeats_all(D: int, L: int, w: int) -> int:
    """Number of strings in ``range(D)^L`` with two equal length-``w`` windows."""
    if D < 1 or L < 0 or w < 1:
        raise ValueError("need D >= 1, L >= 0, w >= 1")
    if D == 1:
        return 1 if L - w + 1 >= 2 else 0
    if not _codes_fit(D, w):
        raise ValueError("window codes overflow; alphabet too large for enumeration")
    if _BACKEND == "numba":
        return int(_count_repeats_all_nb(D, L, w))
    return _count_repeats_all_np(D, L, w)


# ---------------------------------------------------------------------------
# exhaustive copy evaluation of a finite-state sequence model
# ---------------------------------------------------------------------------


@njit(cache=True)
def _gssm_copy_nb(update, readout, s0, D, L, bos, copy):
    total = 1
    for _ in range(L):
        total *= D
    digits = np.zeros(L, dtype=np.int64)
    correct = 0
    for _ in range(total):
        s = update[s0, bos]
        for i in range(L):
            s = update[s, digits[i]]
        s = update[s, copy]
        ok = True
        for i in range(L):
            y = readout[s]
            if y != digits[i]:
                ok = False
                break
            s = update[s, y]
        if ok:
            correct += 1
        pos = L - 1
        while pos >= 0:
            digits[pos] += 1
            if digits[pos] < D:
                break
            digits[pos] = 0
            pos -= 1
    return correct


def _gssm_copy_np(update, readout, s0, D, L, bos, copy, chunk=1 << 16):
    total = D**L
    correct = 0
    for start in range(0, total, chunk):
        X = all_strings(D, L, start, start + chunk)
        s = np.full(len(X), update[s0, bos], dtype=np.int64)
        for i in range(L):
            s = update[s, X[:, i]]
        s = update[s, copy]
        ok = np.ones(len(X), dtype=bool)
        for i in range(L):
            y = readout[s]
            ok &= y == X[:, i]
            s = update[s, y]
        correct += int(ok.sum())
    return correct


def gssm_copy_correct(update, readout, s0: int, D: int, L: int, bos: int, copy: int) -> int:
    """Count strings ``x`` in ``range(D)^L`` that the table machine copies exactly."""
    update = np.ascontiguousarray(update, dtype=np.int64)
    readout = np.ascontiguousarray(readout, dtype=np.int64)
    if _BACKEND == "numba":
        return int(_gssm_copy_nb(update, readout, int(s0), D, L, bos, copy))
    return _gssm_copy_np(update, readout, int(s0), D, L, bos, copy)


# ---------------------------------------------------------------------------
# diagonal linear recurrence h_t = a_t * h_{t-1} + b_t along axis 1
# ---------------------------------------------------------------------------


@njit(cache=True)
def _scan_fwd_nb(a, b):
    B, T, N = a.shape
    h = np.empty_like(b)
    for i in range(B):
        for k in range(N):
            acc = 0.0
            for t in range(T):
                acc = a[i, t, k] * acc + b[i, t, k]
                h[i, t, k] = acc
    return h


@njit(cache=True)
def _scan_bwd_nb(g, a, h):
    B, T, N = a.shape
    ga = np.zeros_like(a)
    gb = np.empty_like(a)
    for i in range(B):
        for k in range(N):
            carry = 0.0
            for t in range(T - 1, -1, -1):
                gz = g[i, t, k] + carry
                gb[i, t, k] = gz
                if t > 0:
                    ga[i, t, k] = gz * h[i, t - 1, k]
                carry = gz * a[i, t, k]
    return ga, gb


def _scan_fwd_np(a, b):
    h = np.empty_like(b)
    acc = np.zeros_like(b[:, 0])
    for t in range(a.shape[1]):
        acc = a[:, t] * acc + b[:, t]
        h[:, t] = acc
    return h


def _scan_bwd_np(g, a, h):
    ga = np.zeros_like(a)
    gb = np.empty_like(a)
    carry = np.zeros_like(a[:, 0])
    for t in range(a.shape[1] - 1, -1, -1):
        gz = g[:, t] + carry
        gb[:, t] = gz
        if t > 0:
            ga[:, t] = gz * h[:, t - 1]
        carry = gz * a[:, t]
    return ga, gb


def diag_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _scan_fwd_nb(a, b) if _BACKEND == "numba" else _scan_fwd_np(a, b)


def diag_scan_grad(g: np.ndarray, a: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = np.ascontiguousarray(g, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    return _scan_bwd_nb(g, a, h) if _BACKEND == "numba" else _scan_bwd_np(g, a, h)


# ---------------------------------------------------------------------------
# one causal softmax-attention read for a batch of sequences
# ---------------------------------------------------------------------------


@njit(cache=True)
def _softmax_read_nb(keys_t, values, q, upto, tau):
    B = keys_t.shape[0]
    K = keys_t.shape[1]
    d = values.shape[2]
    n = upto + 1
    out = np.zeros((B, d))
    s = np.empty(n)
    for b in range(B):
        s[:] = 0.0
        # position-inner loop: independent accumulators, same order per score
        for k in range(K):
            qk = q[b, k]
            for j in range(n):
                s[j] += keys_t[b, k, j] * qk
        m = -np.inf
        for j in range(n):
            s[j] *= tau
            if s[j] > m:
                m = s[j]
        tot = 0.0
        for j in range(n):
            e = np.exp(s[j] - m)
            s[j] = e
            tot += e
        for j in range(n):
            wgt = s[j] / tot
            for c in range(d):
                out[b, c] += wgt * values[b, j, c]
    return out


def _softmax_read_np(keys_t, values, q, upto, tau):
    s = np.matmul(q[:, None, :], keys_t[:, :, : upto + 1])[:, 0] * tau
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    wgt = e / e.sum(axis=1, keepdims=True)
    return np.matmul(wgt[:, None, :], values[:, : upto + 1])[:, 0]


def softmax_read(keys_t: np.ndarray, values: np.ndarray, q: np.ndarray, upto: int, tau: float) -> np.ndarray:
    """``values^T softmax(tau * keys q)`` over positions ``0..upto`` of each row.

    Keys are stored position-last, ``keys_t`` of shape ``(B, K, T)``;
    ``values`` is ``(B, T, d)`` and ``q`` is ``(B, K)``.
    """
    if not 0 <= upto < keys_t.shape[2]:
        raise ValueError("upto outside the key buffer")
    keys_t = np.ascontiguousarray(keys_t, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    if _BACKEND == "numba":
        return _softmax_read_nb(keys_t, values, q, int(upto), float(tau))
    return _softmax_read_np(keys_t, values, q, int(upto), float(tau))


# ---------------------------------------------------------------------------
# fused copier generation (numba only; the numpy twin lives in construction)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _copier_generate_nb(X, table, w, tau):
    B, L = X.shape
    V, d = table.shape
    bos = V - 2
    cp = V - 1
    P = 2 * L + 1
    m = w + 1
    kw = (d + 1) * w
    out = np.empty((B, L), dtype=np.int64)
    E = np.zeros((P, d))
    kt = np.zeros((kw, P))
    vals = np.zeros((P, d))
    S = np.empty((m, d))
    h = np.empty((m, d))
    g = np.empty((w + 1, d))
    acc = np.empty(d)
    q = np.empty(kw)
    s = np.empty(P)
    z = np.empty(d)
    for b in range(B):
        tok = bos
        for p in range(P):
            if p == 0:
                tok = bos
            elif p <= L:
                tok = X[b, p - 1]
            elif p == L + 1:
                tok = cp
            for c in range(d):
                E[p, c] = table[tok, c]
                vals[p, c] = table[tok, c]
            # window sums newest first, then averages h_1..h_{w+1}
            for c in range(d):
                acc[c] = E[p, c]
                S[0, c] = acc[c]
            for t in range(1, m):
                if p - t >= 0:
                    for c in range(d):
                        acc[c] += E[p - t, c]
                for c in range(d):
                    S[t, c] = acc[c]
            for t in range(m):
                cnt = float(min(t + 1, p + 1))
                for c in range(d):
                    h[t, c] = S[t, c] / cnt
            for c in range(d):
                g[0, c] = h[0, c]
            for t in range(1, w + 1):
                for c in range(d):
                    g[t, c] = (t + 1) * h[t, c] - t * h[t - 1, c]
            gate = w * g[w, 0]
            # key: hat_1..hat_w, then tilde_1..tilde_w
            for t in range(1, w + 1):
                for c in range(d):
                    kt[(t - 1) * d + c, p] = max(g[t, c] - gate, 0.0) - max(-g[t, c] - gate, 0.0)
                kt[w * d + t - 1, p] = max(2.0 * (g[t, 0] - h[0, 0]) - 1.0, 0.0)
            if p < L + 1:
                continue
            # query: hat_0..hat_{w-1}, then w * star_1..star_w
            for t in range(w):
                for c in range(d):
                    q[t * d + c] = max(g[t, c] - gate, 0.0) - max(-g[t, c] - gate, 0.0)
                q[w * d + t] = w * max(g[t, 1], 0.0)
            n = p + 1
            for j in range(n):
                s[j] = 0.0
            for k in range(kw):
                qk = q[k]
                for j in range(n):
                    s[j] += kt[k, j] * qk
            mx = -np.inf
            for j in range(n):
                s[j] *= tau
                if s[j] > mx:
                    mx = s[j]
            tot = 0.0
            for j in range(n):
                # drop weights that would be subnormal: they sit far below the
                # resolution of a sum >= 1 and subnormal arithmetic is very slow
                e = np.exp(s[j] - mx) if s[j] - mx > -708.0 else 0.0
                s[j] = e
                tot += e
            for c in range(d):
                z[c] = 0.0
            for j in range(n):
                if s[j] == 0.0:
                    continue
                wgt = s[j] / tot
                for c in range(d):
                    z[c] += wgt * vals[j, c]
            best = -np.inf
            y = 0
            for v in range(V):
                sc = 0.0
                for c in range(d):
                    sc += table[v, c] * z[c]
                if sc > best:
                    best = sc
                    y = v
            out[b, p - L - 1] = y
            tok = y
    return out


def copier_generate(X: np.ndarray, table: np.ndarray, w: int, tau: float) -> np.ndarray:
    """Whole greedy copy loop for the constructed copier, one string at a time in cache."""
    if not HAS_NUMBA:
        raise RuntimeError("fused generation needs numba")
    X = np.ascontiguousarray(X, dtype=np.int64)
    table = np.ascontiguousarray(table, dtype=np.float64)
    return _copier_generate_nb(X, table, int(w), float(tau))
