"""One test per acceptance criterion; the terminal summary prints a PASS/FAIL line for each.

Details are attached with ``record_property`` before the assertion, so a failing
criterion still reports what was measured.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from copylab import construction, evaluation, gssm, kernels, tasks
from copylab.models import ModelSpec, TrainedModel, init_params, logits
from copylab.numerics import make_rng
from copylab.tasks import Vocab
from copylab.training import CopyTaskConfig, TrainConfig, save_checkpoint, train, write_metrics_csv

from gradcheck import TOY_SPECS, worst_relative_error
from oracles import gssm_copy_correct_loop, has_equal_windows, repeat_counts_by_window

pytestmark = pytest.mark.slow

ARTIFACTS = Path(__file__).resolve().parents[1] / "runs" / "acceptance"


@pytest.fixture
def report(record_property):
    def rec(criterion: int, ok: bool, detail: str):
        record_property("criterion", criterion)
        record_property("detail", detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        assert ok, detail

    return rec


def test_criterion_1_construction_exact_on_unique_strings(report):
    D, n = 26, 5
    t0 = time.perf_counter()
    copier = construction.build_copier(D, n, 500)
    rng = make_rng(101)
    accs = {}
    for L in (50, 100, 200, 500):
        X = tasks.sample_unique_ngram_strings(Vocab(D), L, n, 1000, rng)
        assert not any(has_equal_windows(x, n + 1) for x in X[:50])
        Y = construction.generate_copy_batch(copier, X)
        accs[L] = float(np.all(Y == X, axis=1).mean())
    secs = time.perf_counter() - t0
    ok = all(a == 1.0 for a in accs.values())
    report(1, ok, f"string accuracy {accs} on 1000 unique-5-gram strings per length ({secs:.0f}s, target < 300s)")


def test_criterion_2_error_bound_chain(report):
    D, L, N = 26, 300, 10240
    X = tasks.uniform_strings(Vocab(D), L, N, make_rng(202))
    acc, lines, ok = {}, [], True
    for n in range(2, 9):
        copier = construction.build_copier(D, n, L, check_range=False)
        Y = construction.generate_copy_batch(copier, X)
        wrong = ~np.all(Y == X, axis=1)
        dup = kernels.repeated_windows(X, n + 1, D)
        err = evaluation.wilson(int(wrong.sum()), N)
        freq = evaluation.wilson(int(dup.sum()), N)
        bound = evaluation.ngram_union_bound(D, L, n)
        unexplained = int((wrong & ~dup).sum())
        acc[n] = 1.0 - err.p
        row_ok = err.p <= freq.hi and freq.lo <= bound and unexplained == 0
        ok &= row_ok
        lines.append(f"n={n}: err {err.p:.4f} <= dup {freq.p:.4f}+CI({freq.hi:.4f}); dup CI lo {freq.lo:.4f} <= {bound:.4g}; unexplained {unexplained}")
    shape = all(acc[n] >= 0.99 for n in range(5, 9)) and all(acc[a] <= acc[a + 1] for a in range(2, 8)) and acc[2] < acc[5]
    print("\n".join(lines))
    report(2, ok and shape, f"bound chain holds for n=2..8: {ok}; accuracy by n {', '.join(f'{n}:{a:.4f}' for n, a in acc.items())}")


def test_criterion_3_exact_collision_oracle(report):
    triples = mismatches = over = 0
    for D in range(1, 27):
        for L in range(0, 21):
            if D**L > 2**20:
                break
            counts = repeat_counts_by_window(D, L)
            for n in range(0, L + 1):
                p = evaluation.p_ngram_exact(D, L, n)
                triples += 1
                mismatches += p != counts[n + 1] / D**L
                over += p > evaluation.ngram_union_bound(D, L, n)
    report(3, mismatches == 0 and over == 0, f"{triples} triples with D<=26, L<=20, D^L<=2^20: {mismatches} mismatches, {over} above L^2 D^-n")


def test_criterion_4_gssm_counting_bound(report):
    D = 2
    rng = make_rng(404)
    V = Vocab(D).size
    tested = violations = disagreements = 0
    for L in (3, 4, 5):
        for S in (2, 4, 8, 16):
            specs = [gssm.random_spec(S, V, D, rng) for _ in range(100)]
            specs.append(gssm.hill_climb(S, D, L, rng, iters=300)[0])
            specs += [gssm.store_last_k(D, k) for k in range(1, 5) if D**k == S]
            for spec in specs:
                fast = gssm.exact_copy_correct(spec, D, L)
                slow = gssm_copy_correct_loop(spec.update, spec.readout, spec.s0, D, L)
                tested += 1
                disagreements += fast != slow
                violations += fast > S
        full_err = gssm.exact_copy_error(gssm.full_memory(D, L), D, L)
        violations += full_err != 0.0
    report(4, violations == 0 and disagreements == 0, f"{tested} specs over L in 3..5, |S| in 2..16: {violations} violations, {disagreements} kernel/loop disagreements; full memory error 0")


def test_criterion_5_identities(report):
    rng = make_rng(505)
    total_pos = violations = 0
    worst = 0.0
    for D in (4, 26):
        for n in (2, 5):
            copier = construction.build_copier(D, n, 100, check_range=False)
            v = Vocab(D)
            for _ in range(100):
                L = int(rng.integers(max(n - 1, 1), 101))
                x = rng.integers(0, D, size=L)
                chk = construction.check_identities(copier, np.concatenate([[v.bos], x, [v.copy], x]), L)
                total_pos += chk.positions
                violations += chk.embed_violations + chk.indicator_violations
                worst = max(worst, chk.embed_max_err)
    report(5, violations == 0, f"{total_pos} positions over D in (4, 26), n in (2, 5): {violations} violations, worst embedding error {worst:.2e}")


def test_criterion_6_gradients(report):
    worst = {}
    for spec in TOY_SPECS:
        errs = worst_relative_error(spec, projections=50)
        worst[f"{spec.arch}/{spec.scheme}" if spec.arch == "transformer" else spec.arch] = max(errs.values())
    ok = all(w < 1e-4 for w in worst.values())
    report(6, ok, "worst relative error " + ", ".join(f"{k} {w:.1e}" for k, w in worst.items()))


def _collision_breakdown(model, rng) -> str:
    """Copy accuracy split by whether the string repeats a window of 2 or 3 tokens."""
    v = Vocab(10)
    out = []
    for w in (2, 3):
        hit = {True: [0, 0], False: [0, 0]}
        for L in range(1, 21):
            X = tasks.uniform_strings(v, L, 64, rng)
            Y = model.generate(evaluation.copy_prompts(v, X), L)
            rep = kernels.repeated_windows(X, w, 10)
            for r in (True, False):
                hit[r][0] += int(np.all(Y[rep == r] == X[rep == r], axis=1).sum())
                hit[r][1] += int((rep == r).sum())
        acc = {r: h[0] / max(h[1], 1) for r, h in hit.items()}
        out.append(f"string acc with a repeated {w}-window {acc[True]:.3f} (n={hit[True][1]}), without {acc[False]:.3f}")
    return "; ".join(out)


def _length_generalization(steps: int):
    """Directional comparison only: equal short budgets, scored at 1x and 2x the training length."""
    reports = []
    for scheme in ("hard_alibi", "nope", "rope"):
        spec = ModelSpec("transformer", Vocab(10).size, d=64, layers=2, heads=4, scheme=scheme, masked_heads=3)
        cfg = TrainConfig(lr=1e-3, warmup=300, steps=steps, batch=64, context=64, seed=1)
        res = train(spec, CopyTaskConfig(10, 20), cfg, log_every=100)
        reports.append(evaluation.length_sweep(res.model(scheme), 10, [20, 40], make_rng(7)))
    evaluation.write_reports_csv(reports, ARTIFACTS / "length_generalization.csv")
    evaluation.write_chart_svg(reports, ARTIFACTS / "length_generalization.svg", "char_acc", "copy, trained on L<=20")
    return reports


def test_criterion_7_tiny_scale_learning(report):
    v = Vocab(10)
    # three windowed heads (last 1, 2, 3 positions) and one unbiased head
    spec = ModelSpec("transformer", v.size, d=64, layers=2, heads=4, scheme="hard_alibi", masked_heads=3)
    cfg = TrainConfig(lr=1e-3, warmup=300, steps=10_000, batch=64, context=64, seed=0, eval_every=500, target_char_acc=0.99)

    def evaluate(model):
        return evaluation.copy_eval_mixed(model, 10, 20, 777)

    res = train(spec, CopyTaskConfig(10, 20), cfg, evaluate=evaluate, log_every=100)
    evals = [r for r in res.rows if "char_acc" in r]
    best = max(r["char_acc"] for r in evals)
    last = evals[-1]
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(res.rows, ARTIFACTS / "criterion7_metrics.csv")
    save_checkpoint(ARTIFACTS / "criterion7_checkpoint.bin", res.params, spec)
    breakdown = _collision_breakdown(res.model(), make_rng(778))
    gen = _length_generalization(1000)
    lg = "; ".join(f"{r.model} 2x char {r.value(40, 'char_acc'):.3f}" for r in gen)
    report(
        7,
        last["char_acc"] >= 0.99,
        f"char_acc {last['char_acc']:.4f} +- {last['char_acc_sd']:.4f} at step {res.steps_run} (best {best:.4f}, {res.seconds / 60:.0f} min); "
        f"{breakdown}; length generalization (non-gating, 1k steps): {lg}",
    )


def test_criterion_8_prefix_latch_and_suffix_bound(report):
    D, n, k = 26, 3, 4
    auto = gssm.prefix_lookup_automaton(D, n, k)
    rep = evaluation.lookup_sweep(evaluation.AutomatonModel(auto), "prefix", [10, 20, 50, 100, 200], make_rng(808), D, n, k)
    accs = {r.x: r.mean for r in rep.rows if r.metric == "string_acc"}
    Ds, Ls, ns, ks = 2, 8, 2, 2
    rng = make_rng(809)
    over = checked = 0
    for S in (2, 4, 8, 16):
        specs = [gssm.random_spec(S, Vocab(Ds).size, Ds, rng) for _ in range(20)]
        specs += [gssm.store_last_k(Ds, j) for j in range(1, 5) if Ds**j == S]
        for spec in specs:
            for q in range(0, Ls - ns - ks + 1):
                checked += 1
                over += gssm.suffix_lookup_correct(spec, Ds, Ls, ns, ks, q) > S * Ds ** (Ls - ks)
    ok = all(a == 1.0 for a in accs.values()) and over == 0
    report(8, ok, f"prefix-latch string accuracy {accs}; suffix lookup bound |S| D^(L-k) held in {checked - over}/{checked} cases")


def test_criterion_9_protocol(report):
    problems = []
    if (evaluation.BATCHES, evaluation.BATCH_SIZE) != (10, 128):
        problems.append("defaults")
    rep = evaluation.length_sweep(evaluation.HashOracleModel(10, 4), 10, [10], make_rng(9))
    if any(r.n != 1280 for r in rep.rows) or {r.metric for r in rep.rows} != {"string_acc", "char_acc"}:
        problems.append("length_sweep rows")
    mixed = evaluation.copy_eval_mixed(evaluation.HashOracleModel(10, 4), 10, 20, 9)
    if set(mixed) != {"string_acc", "string_acc_sd", "char_acc", "char_acc_sd"}:
        problems.append("mixed keys")
    # greedy: each generated token is the argmax given the tokens before it
    spec = ModelSpec("transformer", 13, d=16, layers=1, heads=2)
    model = TrainedModel(spec, init_params(spec, make_rng(9)))
    prompts = evaluation.copy_prompts(Vocab(10), make_rng(10).integers(0, 10, (4, 6)))
    out = model.generate(prompts, 6)
    seq = np.concatenate([prompts, out], axis=1)
    z = logits(spec, model.params, seq[:, :-1])
    if not np.array_equal(np.argmax(z[:, prompts.shape[1] - 1 :], axis=-1), out):
        problems.append("greedy decoding")
    report(9, not problems, "10 x 128 batches, mean and sample sd per cell, greedy decoding" + (f"; problems: {problems}" if problems else ""))
