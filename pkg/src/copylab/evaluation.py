"""Accuracy metrics, collision probabilities and evaluation sweeps.

Any object with ``generate(prompts: (B, P) int array, steps: int) -> (B, steps)``
can be evaluated; adapters below wrap the constructed copier, table machines,
automata and the hash-table oracle. Sweeps default to 10 batches of 128
instances, greedy decoding, and report the mean and standard deviation across
batches.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import binomtest

from . import construction, gssm, kernels
from .numerics import make_rng
from .tasks import (
    Vocab,
    plant_duplicate,
    sample_lookup,
    sample_unique_ngram_strings,
    uniform_strings,
)

BATCHES = 10
BATCH_SIZE = 128


class Generator(Protocol):
    def generate(self, prompts: np.ndarray, steps: int) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _pairs(outputs, targets):
    outputs = list(outputs)
    targets = list(targets)
    if len(outputs) != len(targets):
        raise ValueError("outputs and targets differ in count")
    if not outputs:
        raise ValueError("no instances to score")
    out = []
    for o, t in zip(outputs, targets):
        o = np.asarray(o)
        t = np.asarray(t)
        if o.shape != t.shape:
            raise ValueError(f"length mismatch: {o.shape} vs {t.shape}")
        out.append((o, t))
    return out


def string_accuracy(outputs, targets) -> float:
    """Fraction of instances reproduced with no token error."""
    pairs = _pairs(outputs, targets)
    return sum(bool(np.array_equal(o, t)) for o, t in pairs) / len(pairs)


def char_accuracy(outputs, targets) -> float:
    """Per-position match rate pooled over all target positions."""
    pairs = _pairs(outputs, targets)
    total = sum(t.size for _, t in pairs)
    if total == 0:
        raise ValueError("targets are all empty")
    return sum(int((o == t).sum()) for o, t in pairs) / total


@dataclass
class Estimate:
    p: float
    lo: float
    hi: float
    hits: int
    samples: int


def wilson(hits: int, samples: int, confidence: float = 0.95) -> Estimate:
    if samples < 1:
        raise ValueError("need at least one sample")
    ci = binomtest(int(hits), int(samples)).proportion_ci(confidence_level=confidence, method="wilson")
    return Estimate(hits / samples, float(ci.low), float(ci.high), int(hits), int(samples))


# ---------------------------------------------------------------------------
# repeated n-gram probabilities
# ---------------------------------------------------------------------------


def ngram_union_bound(D: int, L: int, n: int) -> float:
    return L * L * float(D) ** (-n)


def p_ngram_exact(D: int, L: int, n: int, budget: int = gssm.ENUM_BUDGET) -> float:
    """Probability that a uniform string repeats some ``n+1``-token window, by enumeration."""
    if D < 1 or L < 0 or n < 0:
        raise ValueError("need D >= 1, L >= 0, n >= 0")
    if D**L > budget:
        raise gssm.BudgetError(f"D^L = {D**L} exceeds enumeration budget {budget}")
    return kernels.count_repeats_all(D, L, n + 1) / D**L


def p_ngram_mc(D: int, L: int, n: int, samples: int, rng: np.random.Generator, chunk: int = 4096) -> Estimate:
    """Monte-Carlo frequency of repeated ``n+1``-token windows with a Wilson 95% interval."""
    if samples < 1:
        raise ValueError("need at least one sample")
    hits = 0
    v = Vocab(D)
    for s in range(0, samples, chunk):
        X = uniform_strings(v, L, min(chunk, samples - s), rng)
        hits += int(kernels.repeated_windows(X, n + 1, D).sum())
    return wilson(hits, samples)


def perfect_ngram_accuracy(D: int, L: int, n: int, samples: int, rng: np.random.Generator) -> Estimate:
    """String accuracy of the hash-table copier on uniform strings."""
    if samples < 1:
        raise ValueError("need at least one sample")
    X = uniform_strings(Vocab(D), L, samples, rng)
    Y, _ = construction.algorithm1_copy_batch(X, n, D)
    return wilson(int(np.all(Y == X, axis=1).sum()), samples)


# ---------------------------------------------------------------------------
# model adapters
# ---------------------------------------------------------------------------


def copy_prompts(vocab: Vocab, X: np.ndarray) -> np.ndarray:
    B = len(X)
    return np.concatenate([np.full((B, 1), vocab.bos), X, np.full((B, 1), vocab.copy)], axis=1)


def _copy_body(prompts: np.ndarray, D: int) -> np.ndarray:
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    if np.any(prompts[:, 0] != D) or np.any(prompts[:, -1] != D + 1):
        raise ValueError("copy prompts must be BOS, x, COPY")
    return prompts[:, 1:-1]


@dataclass
class CopierModel:
    copier: construction.ConstructedCopier
    name: str = "constructed"

    def generate(self, prompts, steps: int) -> np.ndarray:
        X = _copy_body(prompts, self.copier.D)
        if steps != X.shape[1]:
            raise ValueError("the copier emits exactly L tokens")
        return construction.generate_copy_batch(self.copier, X)


@dataclass
class HashOracleModel:
    """Hash-table copier with windows of ``n + 1`` tokens."""

    D: int
    n: int
    name: str = "hash-oracle"

    def generate(self, prompts, steps: int) -> np.ndarray:
        X = _copy_body(prompts, self.D)
        return construction.algorithm1_copy_batch(X, self.n, self.D)[0][:, :steps]


@dataclass
class GssmModel:
    spec: gssm.GssmSpec
    name: str = "gssm"

    def generate(self, prompts, steps: int) -> np.ndarray:
        return gssm.generate_batch(self.spec, prompts, steps)


@dataclass
class AutomatonModel:
    auto: gssm.Automaton
    name: str = "automaton"

    def generate(self, prompts, steps: int) -> np.ndarray:
        return self.auto.generate_batch(prompts, steps)


@dataclass
class LookupSearchModel:
    """String-search baseline for lookup prompts: find the key, emit what follows it."""

    D: int
    n: int
    variant: str
    name: str = "string-search"

    def generate(self, prompts, steps: int) -> np.ndarray:
        v = Vocab(self.D)
        out = np.zeros((len(prompts), steps), dtype=np.int64)
        for r, p in enumerate(np.atleast_2d(prompts)):
            if self.variant == "suffix":
                key = p[-self.n :]
                ctx = p[1 : len(p) - self.n - 1]
            else:
                key = p[1 : 1 + self.n]
                ctx = p[self.n + 2 : -1]
            for i in range(len(ctx) - self.n + 1):
                if np.array_equal(ctx[i : i + self.n], key):
                    ans = ctx[i + self.n : i + self.n + steps]
                    out[r, : len(ans)] = ans
                    if len(ans) < steps:
                        out[r, len(ans) :] = v.eos
                    break
        return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    x: int
    metric: str
    mean: float
    sd: float
    n: int
    L: int | None = None


@dataclass
class EvalReport:
    task: str
    model: str
    x_name: str = "L"
    rows: list = field(default_factory=list)
    seed: int | None = None

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r.x, r.metric))

    def series(self, metric: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = [r for r in self.sorted_rows() if r.metric == metric]
        return (
            np.array([r.x for r in rows]),
            np.array([r.mean for r in rows]),
            np.array([r.sd for r in rows]),
        )

    def value(self, x: int, metric: str) -> float:
        for r in self.rows:
            if r.x == x and r.metric == metric:
                return r.mean
        raise KeyError((x, metric))


def report_columns(reports: Sequence[EvalReport]) -> list[str]:
    extra = sorted({r.x_name for r in reports} - {"L"})
    return ["task", "model", "L", *extra, "metric", "mean", "sd", "n"]


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    cols = report_columns(reports)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(cols)
        for rep in reports:
            for r in rep.sorted_rows():
                rec = {"task": rep.task, "model": rep.model, "metric": r.metric, "mean": f"{r.mean:.6g}", "sd": f"{r.sd:.6g}", "n": r.n}
                if rep.x_name == "L":
                    rec["L"] = r.x
                else:
                    rec["L"] = "" if r.L is None else r.L
                    rec[rep.x_name] = r.x
                wr.writerow([rec.get(c, "") for c in cols])


def write_chart_svg(reports: Sequence[EvalReport], path, metric: str = "string_acc", title: str = "") -> None:
    """Line chart, one series per report, x = sweep variable, y = ``metric``."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.fonttype"] = "path"
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        x, y, sd = rep.series(metric)
        if len(x):
            ax.errorbar(x, y, yerr=sd, marker="o", capsize=3, label=rep.model)
    xs = {rep.x_name for rep in reports}
    ax.set_xlabel(xs.pop() if len(xs) == 1 else "x")
    ax.set_ylabel(metric)
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _base_seed(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**62))


def _run_cells(cells, fn, threads: int):
    if threads <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, cells))


def _summarize(rep: EvalReport, x: int, per_batch: list[dict], batch_size: int, L: int | None = None):
    for metric in per_batch[0]:
        vals = np.array([b[metric] for b in per_batch])
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rep.rows.append(ReportRow(x, metric, float(vals.mean()), sd, len(vals) * batch_size, L))


def _score(Y: np.ndarray, T: np.ndarray) -> dict:
    return {"string_acc": float(np.all(Y == T, axis=1).mean()), "char_acc": float((Y == T).mean())}


def copy_batch(vocab: Vocab, L: int, size: int, rng, task: str = "copy", n: int | None = None) -> np.ndarray:
    if task == "copy":
        return uniform_strings(vocab, L, size, rng)
    if task == "copy_unique":
        return sample_unique_ngram_strings(vocab, L, n, size, rng)
    raise ValueError(f"unknown copy task {task!r}")


def length_sweep(
    model: Generator,
    D: int,
    lengths: Sequence[int],
    rng,
    task: str = "copy",
    n: int | None = None,
    batches: int = BATCHES,
    batch_size: int = BATCH_SIZE,
    threads: int = 1,
    model_name: str | None = None,
) -> EvalReport:
    """Copy accuracy per string length; ``task`` is ``copy`` or ``copy_unique`` (needs ``n``)."""
    vocab = Vocab(D)
    base = _base_seed(rng)
    lengths = sorted(set(int(L) for L in lengths))
    cells = [(i, L, b) for i, L in enumerate(lengths) for b in range(batches)]

    def cell(c):
        i, L, b = c
        r = make_rng(base, i * batches + b)
        X = copy_batch(vocab, L, batch_size, r, task, n)
        return _score(model.generate(copy_prompts(vocab, X), L), X)

    results = _run_cells(cells, cell, threads)
    name = model_name or getattr(model, "name", type(model).__name__)
    rep = EvalReport(task if n is None else f"{task}_n{n}", name, "L", seed=base)
    for i, L in enumerate(lengths):
        _summarize(rep, L, results[i * batches : (i + 1) * batches], batch_size)
    return rep


def dup_ngram_sweep(
    model: Generator,
    D: int,
    L: int,
    dup_lengths: Sequence[int],
    rng,
    batches: int = BATCHES,
    batch_size: int = BATCH_SIZE,
    threads: int = 1,
    model_name: str | None = None,
) -> EvalReport:
    """Copy accuracy on uniform strings with one planted repeated window, per window length."""
    vocab = Vocab(D)
    base = _base_seed(rng)
    dup_lengths = sorted(set(int(w) for w in dup_lengths))
    cells = [(i, w, b) for i, w in enumerate(dup_lengths) for b in range(batches)]

    def cell(c):
        i, w, b = c
        r = make_rng(base, i * batches + b)
        X = uniform_strings(vocab, L, batch_size, r)
        X = np.stack([plant_duplicate(x, w, r, D)[0] for x in X])
        return _score(model.generate(copy_prompts(vocab, X), L), X)

    results = _run_cells(cells, cell, threads) if cells else []
    name = model_name or getattr(model, "name", type(model).__name__)
    rep = EvalReport("dup_ngram", name, "dup_window", seed=base)
    for i, w in enumerate(dup_lengths):
        _summarize(rep, w, results[i * batches : (i + 1) * batches], batch_size, L)
    return rep


def lookup_sweep(
    model: Generator,
    variant: str,
    lengths: Sequence[int],
    rng,
    D: int,
    n: int,
    k: int,
    batches: int = BATCHES,
    batch_size: int = BATCH_SIZE,
    threads: int = 1,
    model_name: str | None = None,
) -> EvalReport:
    """Lookup accuracy per context length; the score covers the ``k`` answer tokens."""
    vocab = Vocab(D)
    base = _base_seed(rng)
    lengths = sorted(set(int(L) for L in lengths))
    cells = [(i, L, b) for i, L in enumerate(lengths) for b in range(batches)]

    def cell(c):
        i, L, b = c
        r = make_rng(base, i * batches + b)
        insts = [sample_lookup(vocab, L, n, k, variant, r) for _ in range(batch_size)]
        prompts = np.stack([inst.prompt for inst in insts])
        answers = np.stack([inst.answer for inst in insts])
        return _score(model.generate(prompts, k), answers)

    results = _run_cells(cells, cell, threads)
    name = model_name or getattr(model, "name", type(model).__name__)
    rep = EvalReport(f"lookup_{variant}", name, "L", seed=base)
    for i, L in enumerate(lengths):
        _summarize(rep, L, results[i * batches : (i + 1) * batches], batch_size)
    return rep


def copy_eval_mixed(
    model: Generator,
    D: int,
    L_max: int,
    rng,
    L_min: int = 1,
    batches: int = BATCHES,
    batch_size: int = BATCH_SIZE,
) -> dict:
    """In-distribution copy accuracy with lengths drawn uniformly from ``L_min..L_max``.

    Each batch is grouped by length for generation; returns per-metric mean and sd.
    """
    vocab = Vocab(D)
    base = _base_seed(rng)
    per_batch = []
    for b in range(batches):
        r = make_rng(base, b)
        Ls = r.integers(L_min, L_max + 1, size=batch_size)
        ok_s = ok_c = tot_c = 0
        for L in np.unique(Ls):
            cnt = int((Ls == L).sum())
            X = uniform_strings(vocab, int(L), cnt, r)
            Y = model.generate(copy_prompts(vocab, X), int(L))
            ok_s += int(np.all(Y == X, axis=1).sum())
            ok_c += int((Y == X).sum())
            tot_c += X.size
        per_batch.append((ok_s / batch_size, ok_c / tot_c))
    arr = np.array(per_batch)
    sd = arr.std(axis=0, ddof=1) if batches > 1 else np.zeros(2)
    return {
        "string_acc": float(arr[:, 0].mean()),
        "string_acc_sd": float(sd[0]),
        "char_acc": float(arr[:, 1].mean()),
        "char_acc_sd": float(sd[1]),
    }


def sd_or_zero(vals) -> float:
    vals = np.asarray(vals, dtype=np.float64)
    return float(vals.std(ddof=1)) if vals.size > 1 else 0.0

