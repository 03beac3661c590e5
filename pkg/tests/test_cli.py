import csv

import numpy as np
import pytest

from copylab import cli, evaluation, tasks
from copylab.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, int_list, main


def run(tmp_path, *argv):
    out = tmp_path / "out"
    return main([*argv, "--out", str(out)]), out


def rows(path):
    return list(csv.DictReader(open(path)))


def test_int_list():
    assert int_list("2,4,8") == [2, 4, 8]
    assert int_list("2-5") == [2, 3, 4, 5]
    assert int_list(" 3 , 1") == [3, 1]
    with pytest.raises(ValueError):
        int_list("a")


def test_gen_writes_default_count_and_round_trips(tmp_path):
    code, out = run(tmp_path, "gen", "--task", "copy_unique", "--D", "26", "--L", "30", "--n", "5", "--seed", "3")
    assert code == EXIT_OK
    recs = tasks.read_dataset(out / "dataset.jsonl")
    assert len(recs) == 1280
    r = recs[0]
    assert r.tokens[0] == 26 and r.tokens[31] == 27
    assert np.array_equal(r.tokens[1:31], r.tokens[32:62])
    assert not tasks.has_repeated_ngram(r.tokens[1:31], 5)
    assert (out / "config.txt").read_text().count("seed = 3") == 1
    again = main(["gen", "--task", "copy_unique", "--D", "26", "--L", "30", "--n", "5", "--seed", "3", "--out", str(tmp_path / "b")])
    assert again == EXIT_OK
    assert (out / "dataset.jsonl").read_bytes() == (tmp_path / "b" / "dataset.jsonl").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["gen", "--task", "copy", "--L", "10", "--n", "3"],
        ["gen", "--task", "copy_unique", "--L", "10"],
        ["gen", "--task", "phonebook", "--L", "10", "--entries", "4"],
        ["gen", "--task", "lookup_prefix", "--L", "10", "--n", "3"],
        ["gen", "--task", "nope", "--L", "10"],
        ["gssm-frontier", "--budgets", ""],
        ["eval", "--model", "hash", "--task", "copy"],
        ["eval", "--model", "checkpoint"],
    ],
)
def test_usage_errors(tmp_path, argv):
    assert run(tmp_path, *argv)[0] == EXIT_USAGE


def test_gen_rejection_exhaustion_is_usage_error(tmp_path):
    # 2^3 windows cannot cover a unique string of length 20
    assert run(tmp_path, "gen", "--task", "copy_unique", "--D", "2", "--L", "20", "--n", "2", "--count", "1")[0] == EXIT_USAGE


def test_construct_small_pass_and_tau_ablation(tmp_path):
    args = ["construct", "--D", "26", "--n", "5", "--L-max", "60", "--samples", "20", "--bound-samples", "256", "--identity-samples", "3"]
    code, out = run(tmp_path, *args)
    assert code == EXIT_OK
    suites = rows(out / "suites.csv")
    assert {r["suite"] for r in suites} == {"identities", "oracle", "bound"}
    assert all(r["passed"] == "true" for r in suites)
    assert "tau" in (out / "manifest.txt").read_text()



def test_construct_without_temperature_fails(tmp_path):
    # at tau = 1 the softmax no longer isolates the matching key at long lengths
    code, out = run(
        tmp_path, "construct", "--tau", "1", "--L-max", "500", "--lengths", "500", "--samples", "5",
        "--bound-samples", "64", "--identity-samples", "1",
    )
    assert code == EXIT_FAIL
    failed = {r["metric"] for r in rows(out / "suites.csv") if r["passed"] == "false"}
    assert {"string_acc", "errors_without_repeat"} <= failed


def test_construct_precondition(tmp_path):
    assert run(tmp_path, "construct", "--n", "1")[0] == EXIT_USAGE


def test_gssm_frontier(tmp_path):
    code, out = run(tmp_path, "gssm-frontier", "--D", "2", "--L", "3", "--budgets", "2,4,8", "--climbs", "1", "--iters", "50")
    assert code == EXIT_OK
    fr = rows(out / "frontier.csv")
    assert [float(r["floor_error"]) for r in fr] == [0.75, 0.5, 0.0]


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# hash model sweep\nmodel = hash\nn = 3\nD = 6\nlengths = 8,12\nbatches = 2\nbatch-size = 8\nno-chart-ok = 1\n")
    assert run(tmp_path, "eval", "--config", str(cfg))[0] == EXIT_USAGE
    cfg.write_text("model = hash\nn = 3\nD = 6\nlengths = 8,12\nbatches = 2\nbatch-size = 8\nchart = false\n")
    code, out = run(tmp_path, "eval", "--config", str(cfg), "--lengths", "5")
    assert code == EXIT_OK
    assert {r["L"] for r in rows(out / "report.csv")} == {"5"}
    assert not (out / "chart.svg").exists()
    saved = (out / "config.txt").read_text()
    assert "lengths = 5" in saved and "n = 3" in saved


def test_train_then_eval_reproduces_logged_metric(tmp_path):
    tr = tmp_path / "train"
    code = main([
        "train", "--d", "16", "--heads", "2", "--layers", "1", "--steps", "6", "--warmup", "2", "--batch", "4",
        "--context", "32", "--L-max", "8", "--eval-every", "6", "--eval-batches", "2", "--eval-batch-size", "16",
        "--eval-seed", "9", "--log-every", "1", "--out", str(tr),
    ])
    assert code == EXIT_OK
    metrics = rows(tr / "metrics.csv")
    assert len(metrics) == 6 and metrics[-1]["char_acc"] != ""
    code, out = run(
        tmp_path, "eval", "--checkpoint", str(tr / "checkpoint.bin"), "--task", "copy_mixed", "--L-max", "8",
        "--batches", "2", "--batch-size", "16", "--eval-seed", "9",
    )
    assert code == EXIT_OK
    rep = {r["metric"]: float(r["mean"]) for r in rows(out / "report.csv")}
    assert abs(rep["char_acc"] - float(metrics[-1]["char_acc"])) < 1e-6
    assert abs(rep["string_acc"] - float(metrics[-1]["string_acc"])) < 1e-6


def test_scheme_sweep_one_chart_one_series_per_scheme(tmp_path, monkeypatch):
    seen = []
    orig = evaluation.write_chart_svg

    def spy(reports, path, *a, **k):
        seen.append([r.model for r in reports])
        return orig(reports, path, *a, **k)

    monkeypatch.setattr(evaluation, "write_chart_svg", spy)
    code, out = run(
        tmp_path, "sweep", "--kind", "schemes", "--schemes", "hard_alibi,nope,rope", "--d", "16", "--heads", "2",
        "--layers", "1", "--steps", "2", "--warmup", "1", "--batch", "2", "--context", "24", "--eval-every", "0",
        "--lengths", "4,8", "--batches", "2", "--batch-size", "4", "--L-max", "4",
    )
    assert code == EXIT_OK
    assert seen == [["hard_alibi", "nope", "rope"]]
    assert len(list(out.glob("*.svg"))) == 1
    assert {r["model"] for r in rows(out / "report.csv")} == {"hard_alibi", "nope", "rope"}
    assert len(list(out.glob("*-checkpoint.bin"))) == 3


def test_lookup_sweep_command(tmp_path):
    code, out = run(tmp_path, "sweep", "--kind", "lookup", "--D", "4", "--n", "3", "--k", "2", "--lengths", "10,20", "--batches", "2", "--batch-size", "8")
    assert code == EXIT_OK
    assert all(float(r["mean"]) == 1.0 for r in rows(out / "report.csv"))


def test_default_run_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen", "--task", "copy", "--L", "5", "--count", "2"]) == EXIT_OK
    assert main(["gen", "--task", "copy", "--L", "5", "--count", "2"]) == EXIT_OK
    dirs = sorted((tmp_path / "runs").iterdir())
    assert len(dirs) == 2 and all(d.name.split("-")[-1] in ("gen", "1") for d in dirs)
