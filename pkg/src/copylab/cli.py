"""``copylab`` command line: data generation, construction checks, GSSM frontier,
training, evaluation and sweeps.

Every command writes into ``runs/<timestamp>-<command>/`` (or ``--out``) and
records its resolved flags in ``config.txt``, which can be fed back through
``--config`` to repeat the run. Exit status: 0 when every check passed, 1 when
a check failed, 2 on usage or precondition errors.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import construction, evaluation, gssm, kernels, tasks
from .models import SCHEMES, ModelSpec, TrainedModel, init_params, n_params
from .numerics import make_rng
from .training import (
    CopyTaskConfig,
    TrainConfig,
    TrainingDiverged,
    config_dict,
    load_checkpoint,
    load_model_spec,
    save_checkpoint,
    train,
    write_metrics_csv,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
_NOT_CONFIG = {"command", "config", "func", "out", "runs_dir"}


class UsageError(ValueError):
    pass


def int_list(text: str) -> list[int]:
    """``"2,4,8"`` or ranges like ``"2-8"`` (non-negative); an empty string gives an empty list."""
    out: list[int] = []
    for part in (p.strip() for p in str(text).split(",")):
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def str_list(text: str) -> list[str]:
    return [p.strip() for p in str(text).split(",") if p.strip()]


# ---------------------------------------------------------------------------
# config files and run directories
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment."""
    out = {}
    for i, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected 'key = value'")
        k, v = (t.strip() for t in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _config_argv(sub: argparse.ArgumentParser, values: dict[str, str]) -> list[str]:
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    argv = []
    for k, v in values.items():
        a = actions.get(k)
        if a is None or k in _NOT_CONFIG or k == "help":
            raise UsageError(f"unknown config key {k!r}")
        opt = a.option_strings[0]
        if isinstance(a, argparse.BooleanOptionalAction):
            if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {k!r} expects true or false")
            argv.append(opt if v.lower() in ("true", "1", "yes") else "--no-" + opt[2:])
        else:
            argv += [opt, v]
    return argv


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(map(str, v))
    return str(v)


def write_config(ns: argparse.Namespace, path) -> None:
    lines = [f"# command = {ns.command}", f"# started = {datetime.datetime.now().isoformat(timespec='seconds')}"]
    lines.append(f"# backend = {kernels.backend()}")
    for k, v in sorted(vars(ns).items()):
        if k in _NOT_CONFIG or v is None:
            continue
        lines.append(f"{k} = {_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def run_dir(ns: argparse.Namespace) -> Path:
    if ns.out:
        d = Path(ns.out)
    else:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        d = Path(ns.runs_dir) / f"{stamp}-{ns.command}"
        i = 1
        while d.exists():
            d = Path(ns.runs_dir) / f"{stamp}-{ns.command}-{i}"
            i += 1
    d.mkdir(parents=True, exist_ok=True)
    write_config(ns, d / "config.txt")
    return d


def log(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

GEN_TASKS = ("copy", "copy_unique", "copy_dup", "lookup_suffix", "lookup_prefix", "phonebook")


def _check_gen_flags(ns) -> None:
    needs_n = ns.task in ("copy_unique", "copy_dup", "lookup_suffix", "lookup_prefix")
    if needs_n and ns.n is None:
        raise UsageError(f"--n is required for task {ns.task}")
    if not needs_n and ns.n is not None:
        raise UsageError(f"--n conflicts with task {ns.task}")
    if ns.task.startswith("lookup"):
        if ns.k is None:
            raise UsageError("--k is required for lookup tasks")
    elif ns.k is not None:
        raise UsageError(f"--k conflicts with task {ns.task}")
    if ns.task == "phonebook":
        if ns.L is not None:
            raise UsageError("--L conflicts with task phonebook; use --entries")
        if ns.entries is None:
            raise UsageError("--entries is required for task phonebook")
    else:
        if ns.entries is not None:
            raise UsageError(f"--entries conflicts with task {ns.task}")
        if ns.L is None:
            raise UsageError(f"--L is required for task {ns.task}")
    if ns.count < 1:
        raise UsageError("--count must be >= 1")


def gen_records(ns) -> list[tasks.Record]:
    vocab = tasks.Vocab(ns.D)
    rng = make_rng(ns.seed)
    recs = []
    if ns.task == "copy_unique":
        X = tasks.sample_unique_ngram_strings(vocab, ns.L, ns.n, ns.count, rng)
        return [tasks.make_copy_instance(vocab, x, {"n": ns.n}).to_record() for x in X]
    for _ in range(ns.count):
        if ns.task == "copy":
            inst = tasks.sample_uniform_copy(vocab, ns.L, rng)
        elif ns.task == "copy_dup":
            inst = tasks.sample_dup_ngram_copy(vocab, ns.L, ns.n, rng)
        elif ns.task == "phonebook":
            inst = tasks.sample_phonebook(vocab, ns.entries, rng)
        else:
            inst = tasks.sample_lookup(vocab, ns.L, ns.n, ns.k, ns.task.split("_")[1], rng)
        recs.append(inst.to_record())
    return recs


def cmd_gen(ns) -> int:
    _check_gen_flags(ns)
    d = run_dir(ns)
    path = d / ns.output
    count = tasks.write_dataset(path, gen_records(ns))
    log(f"wrote {count} records to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# construct
# ---------------------------------------------------------------------------

SUITE_COLUMNS = ["suite", "L", "metric", "value", "threshold", "passed"]


def construct_suites(copier: construction.ConstructedCopier, lengths, samples: int, bound_samples: int, identity_samples: int, rng):
    """Oracle equivalence, identity and error-bound checks. Yields suite rows."""
    D, n = copier.D, copier.n
    vocab = tasks.Vocab(D)
    # first-block identities on teacher-forced sequences
    L_id = min(copier.L_max, 100)
    bad = 0
    worst = 0.0
    for _ in range(identity_samples):
        x = rng.integers(0, D, size=L_id)
        chk = construction.check_identities(copier, np.concatenate([[vocab.bos], x, [vocab.copy], x]), L_id)
        bad += chk.embed_violations + chk.indicator_violations
        worst = max(worst, chk.embed_max_err)
    yield ["identities", L_id, "violations", bad, 0, bad == 0]
    yield ["identities", L_id, "embed_max_err", f"{worst:.3g}", 1e-12, worst <= 1e-12]
    # exact copy on strings without repeated n-grams, matched against the hash table
    for L in lengths:
        X = tasks.sample_unique_ngram_strings(vocab, L, n, samples, rng)
        Y = construction.generate_copy_batch(copier, X)
        H, _ = construction.algorithm1_copy_batch(X, n, D)
        acc = float(np.all(Y == X, axis=1).mean())
        agree = float(np.all(Y == H, axis=1).mean())
        yield ["oracle", L, "string_acc", acc, 1.0, acc == 1.0]
        yield ["oracle", L, "hash_table_agreement", agree, 1.0, agree == 1.0]
    # error chain on unfiltered strings at L_max
    L = copier.L_max
    X = tasks.uniform_strings(vocab, L, bound_samples, rng)
    Y = construction.generate_copy_batch(copier, X)
    wrong = ~np.all(Y == X, axis=1)
    dup = kernels.repeated_windows(X, copier.w, D)
    err = evaluation.wilson(int(wrong.sum()), bound_samples)
    freq = evaluation.wilson(int(dup.sum()), bound_samples)
    bound = evaluation.ngram_union_bound(D, L, n)
    unexplained = int((wrong & ~dup).sum())
    yield ["bound", L, "errors_without_repeat", unexplained, 0, unexplained == 0]
    yield ["bound", L, "error_vs_dup_freq_upper", err.p, f"{freq.hi:.6g}", err.p <= freq.hi]
    yield ["bound", L, "dup_freq_lower_vs_union_bound", f"{freq.lo:.6g}", f"{bound:.6g}", freq.lo <= bound]


def cmd_construct(ns) -> int:
    try:
        copier = construction.build_copier(ns.D, ns.n, ns.L_max, ns.tau)
    except construction.PreconditionError as e:
        print(f"precondition error: {e}", file=sys.stderr)
        return EXIT_USAGE
    lengths = int_list(ns.lengths) if ns.lengths else sorted({L for L in (2 * ns.n, 50, 100, 200, 500) if L <= ns.L_max} | {ns.L_max})
    if any(not 1 <= L <= ns.L_max for L in lengths):
        raise UsageError("--lengths must lie in 1..L_max")
    d = run_dir(ns)
    construction.write_manifest(copier, d / "manifest.txt")
    log(f"copier D={copier.D} n={copier.n} d={copier.d} tau={copier.tau:.4g} epsilon={copier.epsilon:.3g}")
    rng = make_rng(ns.seed)
    rows = []
    for row in construct_suites(copier, lengths, ns.samples, ns.bound_samples, ns.identity_samples, rng):
        rows.append(row)
        log(f"{'PASS' if row[-1] else 'FAIL'} {row[0]} L={row[1]} {row[2]}={row[3]} (threshold {row[4]})")
    with open(d / "suites.csv", "w") as f:
        f.write(",".join(SUITE_COLUMNS) + "\n")
        for r in rows:
            f.write(",".join(_fmt(v).lower() if isinstance(v, bool) else str(v) for v in r) + "\n")
    return EXIT_OK if all(r[-1] for r in rows) else EXIT_FAIL


# ---------------------------------------------------------------------------
# gssm-frontier
# ---------------------------------------------------------------------------


def cmd_gssm_frontier(ns) -> int:
    budgets = int_list(ns.budgets)
    if not budgets:
        raise UsageError("--budgets must list at least one state budget")
    d = run_dir(ns)
    rows = gssm.capacity_frontier(ns.D, ns.L, budgets, make_rng(ns.seed), climbs=ns.climbs, iters=ns.iters)
    gssm.write_frontier_csv(rows, d / "frontier.csv")
    ok = True
    for r in rows:
        fine = r.best_found_error >= r.floor_error - 1e-12
        ok &= fine
        log(f"{'PASS' if fine else 'FAIL'} |S|={r.n_states} floor={r.floor_error:.4g} best={r.best_found_error:.4g} ({r.best_name})")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# train / eval / sweep
# ---------------------------------------------------------------------------


def model_spec_from(ns, scheme: str | None = None) -> ModelSpec:
    return ModelSpec(
        arch=ns.arch,
        vocab_size=tasks.Vocab(ns.D).size,
        d=ns.d,
        layers=ns.layers,
        heads=ns.heads,
        scheme=scheme or ns.scheme,
        masked_heads=ns.masked_heads,
        masked_qk=ns.masked_qk,
        state=ns.state,
    )


def train_config_from(ns) -> TrainConfig:
    return TrainConfig(
        lr=ns.lr,
        warmup=ns.warmup,
        steps=ns.steps,
        weight_decay=ns.weight_decay,
        batch=ns.batch,
        context=ns.context,
        seed=ns.seed,
        eval_every=ns.eval_every,
        target_char_acc=ns.target_char_acc,
    )


def in_training_eval(ns):
    def evaluate(model: TrainedModel) -> dict:
        return evaluation.copy_eval_mixed(
            model, ns.D, ns.L_max, ns.eval_seed, L_min=ns.L_min, batches=ns.eval_batches, batch_size=ns.eval_batch_size
        )

    return evaluate


def _train_one(ns, spec: ModelSpec, d: Path, tag: str = ""):
    cfg = train_config_from(ns)
    task = CopyTaskConfig(ns.D, ns.L_max, ns.L_min)
    log(f"training {spec.arch}/{spec.scheme} with {n_params(init_params(spec, make_rng(0)))} parameters")
    t0 = time.time()

    def on_row(row):
        extra = f" char_acc={row['char_acc']:.4f} string_acc={row['string_acc']:.4f}" if "char_acc" in row else ""
        log(f"{tag}step {row['step']} loss {row['loss']:.4f} lr {row['lr']:.3g} ({time.time() - t0:.0f}s){extra}")

    res = train(spec, task, cfg, in_training_eval(ns), log_every=ns.log_every, on_row=on_row)
    write_metrics_csv(res.rows, d / f"{tag}metrics.csv")
    save_checkpoint(d / f"{tag}checkpoint.bin", res.params, spec, {"steps_run": res.steps_run, "eval_seed": ns.eval_seed, **config_dict(cfg)})
    return res


def cmd_train(ns) -> int:
    spec = model_spec_from(ns)
    d = run_dir(ns)
    try:
        res = _train_one(ns, spec, d)
    except TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_FAIL
    last = [r for r in res.rows if "char_acc" in r]
    if ns.target_char_acc is not None:
        ok = bool(last) and last[-1]["char_acc"] >= ns.target_char_acc
        log(f"{'PASS' if ok else 'FAIL'} char_acc target {ns.target_char_acc} after {res.steps_run} steps")
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


def build_model(ns):
    """Generation-interface model named by ``--model``."""
    if ns.model == "checkpoint":
        if not ns.checkpoint:
            raise UsageError("--model checkpoint needs --checkpoint")
        spec = load_model_spec(ns.checkpoint)
        D = spec.vocab_size - 3
        if ns.D is not None and ns.D != D:
            raise UsageError(f"checkpoint alphabet is {D}, not {ns.D}")
        ns.D = D
        return TrainedModel(spec, load_checkpoint(ns.checkpoint), Path(ns.checkpoint).stem)
    if ns.checkpoint:
        raise UsageError("--checkpoint conflicts with --model " + ns.model)
    if ns.D is None:
        ns.D = 26
    if ns.model in ("constructed", "hash"):
        if ns.n is None:
            raise UsageError(f"--model {ns.model} needs --n")
        if ns.model == "hash":
            return evaluation.HashOracleModel(ns.D, ns.n)
        L_max = max(int_list(ns.lengths) or [ns.L or 1] + [2 * ns.n])
        copier = construction.build_copier(ns.D, ns.n, L_max, ns.tau, check_range=False)
        return evaluation.CopierModel(copier, f"constructed-n{ns.n}")
    if ns.model == "prefix-latch":
        return evaluation.AutomatonModel(gssm.prefix_lookup_automaton(ns.D, ns.n, ns.k), "prefix-latch")
    if ns.model == "string-search":
        return evaluation.LookupSearchModel(ns.D, ns.n, ns.task.split("_")[-1])
    raise UsageError(f"unknown model {ns.model!r}")


def cmd_eval(ns) -> int:
    model = build_model(ns)
    d = run_dir(ns)
    rng = make_rng(ns.seed)
    kw = dict(batches=ns.batches, batch_size=ns.batch_size, threads=ns.threads)
    if ns.task == "copy_mixed":
        if ns.L_max is None:
            raise UsageError("--task copy_mixed needs --L-max")
        m = evaluation.copy_eval_mixed(model, ns.D, ns.L_max, ns.eval_seed, L_min=ns.L_min, batches=ns.batches, batch_size=ns.batch_size)
        rep = evaluation.EvalReport("copy_mixed", model.name, seed=ns.eval_seed)
        for metric in ("string_acc", "char_acc"):
            rep.rows.append(evaluation.ReportRow(ns.L_max, metric, m[metric], m[metric + "_sd"], ns.batches * ns.batch_size))
    elif ns.task in ("copy", "copy_unique"):
        rep = evaluation.length_sweep(model, ns.D, int_list(ns.lengths), rng, ns.task, ns.n, **kw)
    elif ns.task == "dup":
        rep = evaluation.dup_ngram_sweep(model, ns.D, ns.L, int_list(ns.dup_lengths), rng, **kw)
    elif ns.task in ("lookup_suffix", "lookup_prefix"):
        rep = evaluation.lookup_sweep(model, ns.task.split("_")[1], int_list(ns.lengths), rng, ns.D, ns.n, ns.k, **kw)
    else:
        raise UsageError(f"unknown task {ns.task!r}")
    evaluation.write_reports_csv([rep], d / "report.csv")
    if ns.chart:
        evaluation.write_chart_svg([rep], d / "chart.svg", ns.metric, rep.task)
    for r in rep.sorted_rows():
        log(f"{rep.x_name}={r.x} {r.metric} {r.mean:.4f} +- {r.sd:.4f} (n={r.n})")
    return EXIT_OK


def _sweep_schemes(ns, d: Path) -> list:
    reports = []
    for scheme in str_list(ns.schemes):
        res = _train_one(ns, model_spec_from(ns, scheme), d, f"{scheme}-")
        model = res.model(scheme)
        reports.append(evaluation.length_sweep(model, ns.D, int_list(ns.lengths), ns.seed, batches=ns.batches, batch_size=ns.batch_size, threads=ns.threads))
    return reports


def _sweep_ngram(ns, d: Path) -> list:
    """Constructed copier accuracy against ``n`` at fixed ``L`` on unfiltered strings."""
    vocab = tasks.Vocab(ns.D)
    rep = evaluation.EvalReport("copy", "constructed", "n", seed=ns.seed)
    mc = evaluation.EvalReport("copy", "repeat-free fraction", "n", seed=ns.seed)
    for i, n in enumerate(int_list(ns.ns)):
        copier = construction.build_copier(ns.D, n, ns.L, check_range=False)
        accs, free = [], []
        for b in range(ns.batches):
            X = tasks.uniform_strings(vocab, ns.L, ns.batch_size, make_rng(ns.seed, i * ns.batches + b))
            Y = construction.generate_copy_batch(copier, X)
            accs.append(float(np.all(Y == X, axis=1).mean()))
            free.append(1.0 - float(kernels.repeated_windows(X, n + 1, ns.D).mean()))
        N = ns.batches * ns.batch_size
        rep.rows.append(evaluation.ReportRow(n, "string_acc", float(np.mean(accs)), evaluation.sd_or_zero(accs), N, ns.L))
        mc.rows.append(evaluation.ReportRow(n, "string_acc", float(np.mean(free)), evaluation.sd_or_zero(free), N, ns.L))
        log(f"n={n} string_acc {np.mean(accs):.4f} repeat-free {np.mean(free):.4f}")
    return [rep, mc]


def _sweep_dup(ns, d: Path) -> list:
    copier = construction.build_copier(ns.D, ns.n, ns.L, check_range=False)
    kw = dict(batches=ns.batches, batch_size=ns.batch_size, threads=ns.threads)
    return [
        evaluation.dup_ngram_sweep(evaluation.CopierModel(copier, f"constructed-n{ns.n}"), ns.D, ns.L, int_list(ns.dup_lengths), ns.seed, **kw),
        evaluation.dup_ngram_sweep(evaluation.HashOracleModel(ns.D, ns.n), ns.D, ns.L, int_list(ns.dup_lengths), ns.seed, **kw),
    ]


def _sweep_lookup(ns, d: Path) -> list:
    kw = dict(batches=ns.batches, batch_size=ns.batch_size, threads=ns.threads)
    lengths = int_list(ns.lengths)
    latch = evaluation.AutomatonModel(gssm.prefix_lookup_automaton(ns.D, ns.n, ns.k), "prefix-latch (prefix keys)")
    return [
        evaluation.lookup_sweep(latch, "prefix", lengths, ns.seed, ns.D, ns.n, ns.k, **kw),
        evaluation.lookup_sweep(evaluation.LookupSearchModel(ns.D, ns.n, "prefix", "string-search (prefix keys)"), "prefix", lengths, ns.seed, ns.D, ns.n, ns.k, **kw),
        evaluation.lookup_sweep(evaluation.LookupSearchModel(ns.D, ns.n, "suffix", "string-search (suffix keys)"), "suffix", lengths, ns.seed, ns.D, ns.n, ns.k, **kw),
    ]


SWEEPS = {"schemes": _sweep_schemes, "ngram": _sweep_ngram, "dup": _sweep_dup, "lookup": _sweep_lookup}


def cmd_sweep(ns) -> int:
    d = run_dir(ns)
    reports = SWEEPS[ns.kind](ns, d)
    evaluation.write_reports_csv(reports, d / "report.csv")
    evaluation.write_chart_svg(reports, d / "chart.svg", ns.metric, f"{ns.kind} sweep")
    for rep in reports:
        for r in rep.sorted_rows():
            if r.metric == ns.metric:
                log(f"{rep.model} {rep.x_name}={r.x} {r.metric} {r.mean:.4f} +- {r.sd:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--out", help="output directory (default runs/<timestamp>-<command>)")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--seed", type=int, default=0)


def _model_flags(p, D_default: int | None = 10) -> None:
    p.add_argument("--arch", choices=("transformer", "lstm", "ssm"), default="transformer")
    p.add_argument("--scheme", choices=SCHEMES, default="hard_alibi")
    p.add_argument("--masked-heads", type=int, help="Hard-ALiBi heads with a finite window (default heads // 2)")
    p.add_argument(
        "--masked-qk", action=argparse.BooleanOptionalAction, default=True,
        help="learned query/key projections on windowed Hard-ALiBi heads (--no-masked-qk: plain window averages)",
    )
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--state", type=int)


def _train_flags(p) -> None:
    p.add_argument("--D", type=int, default=10)
    p.add_argument("--L-max", type=int, default=20)
    p.add_argument("--L-min", type=int, default=1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=300)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--context", type=int, default=64)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--eval-batches", type=int, default=evaluation.BATCHES)
    p.add_argument("--eval-batch-size", type=int, default=evaluation.BATCH_SIZE)
    p.add_argument("--target-char-acc", type=float)
    p.add_argument("--log-every", type=int, default=50)


def _eval_flags(p) -> None:
    p.add_argument("--batches", type=int, default=evaluation.BATCHES)
    p.add_argument("--batch-size", type=int, default=evaluation.BATCH_SIZE)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--metric", choices=("string_acc", "char_acc"), default="string_acc")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="copylab", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a line-delimited dataset")
    _common(p)
    p.add_argument("--task", choices=GEN_TASKS, required=True)
    p.add_argument("--D", type=int, default=26)
    p.add_argument("--L", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--entries", type=int)
    p.add_argument("--count", type=int, default=1280)
    p.add_argument("--output", default="dataset.jsonl")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("construct", help="build the hand-set copier and run its check suites")
    _common(p)
    p.add_argument("--D", type=int, default=26)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--L-max", type=int, default=500)
    p.add_argument("--tau", type=float, help="temperature override")
    p.add_argument("--lengths", help="comma list for the exactness suite")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--bound-samples", type=int, default=1024)
    p.add_argument("--identity-samples", type=int, default=20)
    p.set_defaults(func=cmd_construct)

    p = sub.add_parser("gssm-frontier", help="counting floor vs best found copy error per state budget")
    _common(p)
    p.add_argument("--D", type=int, default=2)
    p.add_argument("--L", type=int, default=3)
    p.add_argument("--budgets", default="2,4,8")
    p.add_argument("--climbs", type=int, default=4)
    p.add_argument("--iters", type=int, default=1000)
    p.set_defaults(func=cmd_gssm_frontier)

    p = sub.add_parser("train", help="train a small model on packed copy batches")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or reference model")
    _common(p)
    _eval_flags(p)
    p.add_argument("--model", choices=("checkpoint", "constructed", "hash", "prefix-latch", "string-search"), default="checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--task", choices=("copy", "copy_unique", "copy_mixed", "dup", "lookup_suffix", "lookup_prefix"), default="copy")
    p.add_argument("--D", type=int)
    p.add_argument("--L", type=int, default=100)
    p.add_argument("--L-max", type=int)
    p.add_argument("--L-min", type=int, default=1)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--tau", type=float)
    p.add_argument("--lengths", default="10,20,40")
    p.add_argument("--dup-lengths", default="2,4,6,8")
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--chart", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="multi-model sweeps with one chart")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    _eval_flags(p)
    p.add_argument("--kind", choices=tuple(SWEEPS), required=True)
    p.add_argument("--schemes", default="hard_alibi,nope,rope")
    p.add_argument("--lengths", default="10,20,30,40")
    p.add_argument("--ns", default="2-8")
    p.add_argument("--L", type=int, default=300)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--dup-lengths", default="2,4,6,8")
    p.set_defaults(func=cmd_sweep)
    return ap


def parse_args(argv: list[str]) -> argparse.Namespace:
    ap = build_parser()
    ns = ap.parse_args(argv)
    if ns.config:
        sub = ap._subparsers._group_actions[0].choices[ns.command]
        i = argv.index(ns.command)
        try:
            extra = _config_argv(sub, read_config_file(ns.config))
        except UsageError as e:
            sub.error(str(e))
        ns = ap.parse_args(argv[: i + 1] + extra + argv[i + 1 :])
    return ns


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return ns.func(ns)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (tasks.RejectionError, construction.PreconditionError, gssm.BudgetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
