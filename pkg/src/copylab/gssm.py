"""Finite-state sequence models: state tables, exact copy-error counting, explicit machines.

A model is a state set ``0..S-1``, an initial state, an update table
``u[s, token]`` and a readout ``r[s]``. Reading a prompt applies ``u`` token by
token; generating emits ``r(s)`` and feeds the emitted token back through
``u``. Its output therefore depends on the prompt only through the state
reached at the end of the prompt, so at most ``|S|`` distinct continuations
exist. That count bounds the fraction of strings any such model can copy.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from . import kernels
from .tasks import Vocab

ENUM_BUDGET = 10_000_000


class BudgetError(ValueError):
    """Exhaustive enumeration would exceed the configured budget."""


@dataclass(frozen=True)
class GssmSpec:
    update: np.ndarray  # (S, V) int
    readout: np.ndarray  # (S,) int
    s0: int = 0
    name: str = "gssm"

    def __post_init__(self):
        u = np.asarray(self.update)
        r = np.asarray(self.readout)
        if u.ndim != 2 or r.shape != (u.shape[0],):
            raise ValueError("update must be (S, V) and readout (S,)")
        S, V = u.shape
        if S < 1 or V < 1:
            raise ValueError("empty state set or vocabulary")
        if u.min() < 0 or u.max() >= S:
            raise ValueError("update table leaves the state set")
        if r.min() < 0 or r.max() >= V:
            raise ValueError("readout emits a token outside the vocabulary")
        if not 0 <= self.s0 < S:
            raise ValueError("initial state outside the state set")

    @property
    def n_states(self) -> int:
        return self.update.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.update.shape[1]

    @property
    def mem_bits(self) -> float:
        return math.log2(self.n_states)


@dataclass
class GssmRun:
    states: np.ndarray  # S_0..S_i
    outputs: np.ndarray  # R_1..R_i


def _check_tokens(spec: GssmSpec, tokens: np.ndarray):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.vocab_size):
        raise ValueError(f"token outside vocabulary 0..{spec.vocab_size - 1}")


def run(spec: GssmSpec, tokens) -> GssmRun:
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(spec, tokens)
    states = np.empty(len(tokens) + 1, dtype=np.int64)
    states[0] = spec.s0
    for i, x in enumerate(tokens):
        states[i + 1] = spec.update[states[i], x]
    return GssmRun(states, spec.readout[states[1:]])


def final_state(spec: GssmSpec, prompts) -> np.ndarray:
    """End-of-prompt state for each row of ``prompts (B, P)``."""
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    _check_tokens(spec, prompts)
    s = np.full(len(prompts), spec.s0, dtype=np.int64)
    for i in range(prompts.shape[1]):
        s = spec.update[s, prompts[:, i]]
    return s


def continue_from(spec: GssmSpec, states, steps: int) -> np.ndarray:
    """Emit ``r(s)`` and feed it back, ``steps`` times, from each state."""
    s = np.array(states, dtype=np.int64, ndmin=1)
    out = np.empty((len(s), steps), dtype=np.int64)
    for j in range(steps):
        y = spec.readout[s]
        out[:, j] = y
        s = spec.update[s, y]
    return out


def generate(spec: GssmSpec, prompt, steps: int) -> np.ndarray:
    """Greedy continuation of one prompt."""
    return continue_from(spec, final_state(spec, [prompt]), steps)[0]


def generate_batch(spec: GssmSpec, prompts, steps: int) -> np.ndarray:
    return continue_from(spec, final_state(spec, prompts), steps)


def _check_budget(D: int, L: int, budget: int):
    if D**L > budget:
        raise BudgetError(f"D^L = {D**L} exceeds enumeration budget {budget}")


def exact_copy_correct(spec: GssmSpec, D: int, L: int, budget: int = ENUM_BUDGET) -> int:
    """Number of ``x`` in ``range(D)^L`` with ``generate(BOS, x, COPY) == x``."""
    _check_budget(D, L, budget)
    v = Vocab(D)
    if spec.vocab_size < v.copy + 1:
        raise ValueError("spec vocabulary lacks the BOS/COPY tokens")
    return kernels.gssm_copy_correct(spec.update, spec.readout, spec.s0, D, L, v.bos, v.copy)


def exact_copy_error(spec: GssmSpec, D: int, L: int, budget: int = ENUM_BUDGET) -> float:
    return 1.0 - exact_copy_correct(spec, D, L, budget) / D**L


def copy_error_floor(n_states: int, D: int, L: int) -> float:
    """No model with ``n_states`` states copies more than ``n_states`` of the ``D^L`` strings."""
    return max(0.0, 1.0 - n_states / D**L)


# ---------------------------------------------------------------------------
# automata built from a transition function
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Automaton:
    """State machine over hashable states, given as functions."""

    start: Hashable
    step: Callable[[Hashable, int], Hashable]
    emit: Callable[[Hashable], int]
    vocab_size: int
    name: str = "automaton"

    def final_state(self, prompt) -> Hashable:
        s = self.start
        for x in prompt:
            s = self.step(s, int(x))
        return s

    def generate(self, prompt, steps: int) -> np.ndarray:
        s = self.final_state(prompt)
        out = np.empty(steps, dtype=np.int64)
        for j in range(steps):
            y = self.emit(s)
            out[j] = y
            s = self.step(s, y)
        return out

    def generate_batch(self, prompts, steps: int) -> np.ndarray:
        return np.stack([self.generate(p, steps) for p in np.atleast_2d(prompts)])


def tabulate(auto: Automaton, max_states: int = 1_000_000) -> tuple[GssmSpec, dict]:
    """Breadth-first closure of the reachable states into update/readout tables."""
    index = {auto.start: 0}
    order = [auto.start]
    rows: list[list[int]] = []
    queue = deque([auto.start])
    while queue:
        s = queue.popleft()
        row = []
        for x in range(auto.vocab_size):
            t = auto.step(s, x)
            if t not in index:
                if len(index) >= max_states:
                    raise BudgetError(f"more than {max_states} reachable states")
                index[t] = len(order)
                order.append(t)
                queue.append(t)
            row.append(index[t])
        rows.append(row)
    update = np.array(rows, dtype=np.int64)
    readout = np.array([auto.emit(s) for s in order], dtype=np.int64)
    return GssmSpec(update, readout, 0, auto.name), index


# ---------------------------------------------------------------------------
# explicit families
# ---------------------------------------------------------------------------


def store_last_k(D: int, k: int, vocab_size: int | None = None) -> GssmSpec:
    """Shift register over the last ``k`` ordinary tokens; reads out the oldest.

    ``D^k`` states, specials leave the state unchanged. With ``k = L`` it copies
    every string of length ``L``; for ``k`` dividing ``L`` it copies exactly the
    ``D^k`` strings of period ``k``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    V = Vocab(D).size if vocab_size is None else vocab_size
    S = D**k
    s = np.arange(S, dtype=np.int64)
    update = np.repeat(s[:, None], V, axis=1)
    for a in range(D):
        update[:, a] = (s * D + a) % S
    readout = s // D ** (k - 1)
    return GssmSpec(update, readout, 0, f"store-last-{k}")


def full_memory(D: int, L: int) -> GssmSpec:
    spec = store_last_k(D, L)
    return GssmSpec(spec.update, spec.readout, 0, "full-memory")


def store_prefix_automaton(D: int, k: int) -> Automaton:
    """Keep the first ``k`` tokens after BOS, replay them after COPY, then emit 0."""
    v = Vocab(D)

    def step(s, x):
        phase, buf = s
        if x == v.bos:
            return ("r", ())
        if x == v.copy:
            return ("e", buf)
        if phase == "e":
            return ("e", buf[1:])
        if phase == "r" and v.is_ordinary(x):
            buf = buf + (x,)
            return ("h", buf) if len(buf) == k else ("r", buf)
        return s

    def emit(s):
        phase, buf = s
        return buf[0] if phase == "e" and buf else 0

    return Automaton(("r", ()), step, emit, v.size, f"store-prefix-{k}")


def store_prefix_size(D: int, k: int) -> int:
    """Reachable states of ``store_prefix(D, k)``: reading, holding and replaying buffers."""
    geo = lambda m: sum(D**j for j in range(m + 1))  # noqa: E731
    return geo(k - 1) + D**k + geo(k)


def store_prefix(D: int, k: int) -> GssmSpec:
    return tabulate(store_prefix_automaton(D, k))[0]


def random_spec(n_states: int, vocab_size: int, D: int, rng: np.random.Generator) -> GssmSpec:
    update = rng.integers(0, n_states, size=(n_states, vocab_size))
    readout = rng.integers(0, D, size=n_states)
    return GssmSpec(update, readout, 0, f"random-{n_states}")


def hill_climb(
    n_states: int, D: int, L: int, rng: np.random.Generator, iters: int = 2000, start: GssmSpec | None = None
) -> tuple[GssmSpec, int]:
    """Single-entry mutations of a random table, keeping any change that does not lose strings."""
    V = Vocab(D).size
    spec = start if start is not None else random_spec(n_states, V, D, rng)
    update = spec.update.copy()
    readout = spec.readout.copy()
    best = kernels.gssm_copy_correct(update, readout, 0, D, L, D, D + 1)
    for _ in range(iters):
        if rng.random() < 0.25:
            i = int(rng.integers(0, n_states))
            old = readout[i]
            readout[i] = rng.integers(0, D)
            c = kernels.gssm_copy_correct(update, readout, 0, D, L, D, D + 1)
            if c >= best:
                best = c
            else:
                readout[i] = old
        else:
            i = int(rng.integers(0, n_states))
            a = int(rng.integers(0, V))
            old = update[i, a]
            update[i, a] = rng.integers(0, n_states)
            c = kernels.gssm_copy_correct(update, readout, 0, D, L, D, D + 1)
            if c >= best:
                best = c
            else:
                update[i, a] = old
        if best == min(n_states, D**L):
            break
    return GssmSpec(update, readout, 0, f"hill-climb-{n_states}"), int(best)


# ---------------------------------------------------------------------------
# capacity frontier
# ---------------------------------------------------------------------------


@dataclass
class FrontierRow:
    n_states: int
    mem_bits: float
    floor_error: float
    best_found_error: float
    D: int
    L: int
    best_name: str = ""


def capacity_frontier(
    D: int,
    L: int,
    state_budgets: Sequence[int],
    rng: np.random.Generator,
    climbs: int = 4,
    iters: int = 1000,
) -> list[FrontierRow]:
    """Counting floor and best error found per state budget.

    Candidates per budget: the largest shift register and prefix store that fit,
    plus hill-climbed random tables. A machine with fewer states also fits any
    larger budget (extra states stay unreachable), so the best-found column is
    carried forward and never increases.
    """
    if not state_budgets:
        raise ValueError("need at least one state budget")
    if any(b < 1 for b in state_budgets):
        raise ValueError("state budgets must be >= 1")
    total = D**L
    _check_budget(D, L, ENUM_BUDGET)
    budgets = sorted({min(int(b), total) for b in state_budgets})
    rows = []
    carried, carried_name = 0, ""
    for b in budgets:
        cands: list[tuple[int, str]] = [(carried, carried_name)]
        k = 0
        while D ** (k + 1) <= b and k + 1 <= L:
            k += 1
        if k >= 1:
            sp = store_last_k(D, k)
            cands.append((exact_copy_correct(sp, D, L), sp.name))
        for kp in range(L, 0, -1):
            if store_prefix_size(D, kp) <= b:
                sp = store_prefix(D, kp)
                cands.append((exact_copy_correct(sp, D, L), sp.name))
                break
        for _ in range(climbs):
            _, c = hill_climb(b, D, L, rng, iters=iters)
            cands.append((c, f"hill-climb-{b}"))
        carried, carried_name = max(cands, key=lambda t: t[0])
        rows.append(
            FrontierRow(b, math.log2(b), copy_error_floor(b, D, L), 1.0 - carried / total, D, L, carried_name)
        )
    return rows


FRONTIER_COLUMNS = ["|S|", "mem_bits", "floor_error", "best_found_error", "D", "L"]


def write_frontier_csv(rows: Sequence[FrontierRow], path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(FRONTIER_COLUMNS)
        for r in rows:
            wr.writerow([r.n_states, f"{r.mem_bits:.6g}", f"{r.floor_error:.6g}", f"{r.best_found_error:.6g}", r.D, r.L])


# ---------------------------------------------------------------------------
# n-gram lookup machines
# ---------------------------------------------------------------------------


def prefix_lookup_automaton(D: int, n: int, k: int) -> Automaton:
    """Streaming solver for prefix-key lookup: ``BOS, key, COPY, context, COPY`` -> answer.

    Stores the ``n``-token key, scans the context with a sliding window, latches
    the ``k`` tokens after the first match and replays them after the second
    COPY. Phases: key, scan, cap(ture), latch, emit.
    """
    v = Vocab(D)

    def step(s, x):
        if x == v.bos:
            return ("key", ())
        phase = s[0]
        if phase == "key":
            if x == v.copy:
                return ("scan", s[1], ())
            return ("key", (s[1] + (x,))[-n:])
        if phase == "scan":
            key, win = s[1], s[2]
            if x == v.copy:
                return ("emit", ())
            win = (win + (x,))[-n:]
            if win == key:
                return ("cap", ())
            return ("scan", key, win)
        if phase == "cap":
            if x == v.copy:
                return ("emit", s[1])
            buf = s[1] + (x,)
            return ("latch", buf) if len(buf) == k else ("cap", buf)
        if phase == "latch":
            return ("emit", s[1]) if x == v.copy else s
        # emit: drop the token just produced
        return ("emit", s[1][1:])

    def emit(s):
        if s[0] == "emit":
            return s[1][0] if s[1] else v.eos
        return 0

    return Automaton(("key", ()), step, emit, v.size, f"prefix-latch-n{n}-k{k}")


def suffix_lookup_correct(spec: GssmSpec, D: int, L: int, n: int, k: int, q: int, budget: int = ENUM_BUDGET) -> int:
    """Contexts in ``range(D)^L`` for which ``BOS, ctx, COPY, ctx[q:q+n]`` yields ``ctx[q+n:q+n+k]``.

    Fixing every context token except the ``k`` answer tokens leaves ``D^k``
    contexts with the same query suffix; their outputs depend only on the
    state before the suffix, so at most ``|S|`` of each group are correct.
    """
    if not (0 <= q and q + n + k <= L):
        raise ValueError("key and answer must fit in the context")
    _check_budget(D, L, budget)
    v = Vocab(D)
    X = kernels.all_strings(D, L)
    prompts = np.concatenate(
        [np.full((len(X), 1), v.bos), X, np.full((len(X), 1), v.copy), X[:, q : q + n]], axis=1
    )
    out = generate_batch(spec, prompts, k)
    return int(np.all(out == X[:, q + n : q + n + k], axis=1).sum())
