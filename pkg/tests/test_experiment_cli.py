import csv
import json
import math

import numpy as np
import pytest

from ldpm.cli import main, parse_int, split_list
from ldpm.core import MarginalSpec, marginal_operator
from ldpm.data import Dataset
from ldpm.experiment import ExperimentConfig, block_size, collect, run_grid, summarize, thread_count
from ldpm.mechanisms import Mechanism, PrivacyParams


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_parse_helpers():
    assert parse_int("2^14") == 16384 and parse_int(" 300 ") == 300
    assert split_list("a, b,c") == ["a", "b", "c"]
    assert split_list(["1,2", 3]) == ["1", "2", 3]
    assert split_list(None) == []


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(trials=0)
    with pytest.raises(ValueError):
        ExperimentConfig(epsilons=[])
    with pytest.raises(ValueError):
        ExperimentConfig(epsilons=[-1.0])
    with pytest.raises(ValueError):
        ExperimentConfig(d=3, k=4)
    with pytest.raises(ValueError):
        ExperimentConfig(mechanisms=["Bogus"])
    assert ExperimentConfig(mechanisms="InpHT,MargPS", ns="100 200").ns == [100, 200]


def test_grid_shape_and_order():
    cfg = ExperimentConfig(mechanisms=["InpHT", "MargPS"], d=4, k=2, epsilons=[0.5, 1.1], ns=[256, 512], trials=3, seed=1)
    records = run_grid(cfg)
    assert len(records) == 2 * 2 * 2 * 3 * math.comb(4, 2)
    keys = [(r["mechanism"], r["n"], r["epsilon"], r["trial"]) for r in records]
    assert keys == sorted(keys, key=lambda k: (["InpHT", "MargPS"].index(k[0]), k[1], k[2], k[3]))
    summary = summarize(records)
    assert len(summary) == 8
    assert all(row["trials"] == 3 and row["marginals"] == 6 for row in summary)


def test_grid_independent_of_thread_count(monkeypatch):
    cfg = ExperimentConfig(mechanisms=["InpHT", "MargRS"], d=4, k=2, ns=[300], trials=4, seed=5)
    monkeypatch.setenv("LDPM_THREADS", "1")
    assert thread_count() == 1
    serial = run_grid(cfg)
    monkeypatch.setenv("LDPM_THREADS", "4")
    assert run_grid(cfg) == serial
    monkeypatch.setenv("LDPM_THREADS", "many")
    with pytest.raises(ValueError):
        thread_count()


def test_noiseless_limit_leaves_only_sampling_error():
    cfg = ExperimentConfig(mechanisms=["InpPS", "MargPS"], d=4, k=2, epsilons=[50.0], ns=[6000], trials=2, seed=2)
    records = run_grid(cfg)
    assert max(r["tv"] for r in records if r["mechanism"] == "InpPS") < 1e-12
    # each marginal sees only the ~1000 users assigned to it
    assert max(r["tv"] for r in records if r["mechanism"] == "MargPS") < 0.08


def test_inpht_error_decreases_with_n():
    cfg = ExperimentConfig(mechanisms=["InpHT"], d=8, k=2, ns=[1 << 12, 1 << 14, 1 << 16], trials=4, seed=3)
    means = [row["mean_tv"] for row in summarize(run_grid(cfg))]
    assert means[0] > means[1] > means[2]


def test_collect_blocks_are_deterministic():
    params = PrivacyParams("InpRS", 1.0, 10, 2)
    assert block_size(params) == (1 << 22) // 1024
    signals = np.random.default_rng(0).integers(0, 1 << 10, 10_000)
    a, b = collect(signals, params, 9, "x"), collect(signals, params, 9, "x")
    np.testing.assert_array_equal(a.tallies["cell_sums"], b.tallies["cell_sums"])
    assert not np.array_equal(a.tallies["cell_sums"], collect(signals, params, 9, "y").tallies["cell_sums"])


def test_simulate_outputs_are_reproducible(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, stdout, _ = run(capsys, "simulate", "--mech", "InpHT,MargHT", "--d", 4, "--k", 2, "--n", "2^9", "--trials", 2, "--seed", 7, "--out", out)
        assert code == 0 and "wrote 24 records" in stdout
        outs.append(((out / "records.jsonl").read_bytes(), (out / "summary.csv").read_bytes()))
    assert outs[0] == outs[1]
    lines = outs[0][0].decode().splitlines()
    assert len(lines) == 2 * 2 * 6
    assert set(json.loads(lines[0])) == {"mechanism", "d", "k", "epsilon", "n", "trial", "marginal", "tv"}
    rows = list(csv.DictReader((tmp_path / "a" / "summary.csv").open()))
    assert [r["mechanism"] for r in rows] == ["InpHT", "MargHT"]


def test_simulate_from_csv(tmp_path, capsys):
    rng = np.random.default_rng(1)
    rows = "\n".join(",".join(str(v) for v in rng.integers(0, 2, 3)) for _ in range(200))
    data = tmp_path / "d.csv"
    data.write_text("x,y,z\n" + rows + "\n")
    code, stdout, _ = run(capsys, "simulate", "--mech", "MargPS", "--data", data, "--n", 500, "--trials", 1, "--out", tmp_path / "o")
    assert code == 0
    assert len((tmp_path / "o" / "records.jsonl").read_text().splitlines()) == 3


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('mech = "InpPS"\nd = 4\nk = 1\nn = "2^8"\ntrials = 2\n')
    code, _, _ = run(capsys, "simulate", "--config", cfg, "--trials", 3, "--out", tmp_path / "t")
    assert code == 0
    records = [json.loads(x) for x in (tmp_path / "t" / "records.jsonl").read_text().splitlines()]
    assert len(records) == 3 * 4 and {r["mechanism"] for r in records} == {"InpPS"}
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"mech": "MargHT", "d": 3, "k": 2, "n": 100, "trials": 1}))
    assert run(capsys, "simulate", "--config", js, "--out", tmp_path / "j")[0] == 0
    assert len((tmp_path / "j" / "records.jsonl").read_text().splitlines()) == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--trials", "0"],
        ["simulate", "--mech", "Nope"],
        ["simulate", "--d", "3", "--k", "5"],
        ["simulate", "--eps", "abc"],
        ["simulate", "--data", "/nonexistent/file.csv"],
        ["simulate", "--bogus-flag"],
        ["reconstruct", "missing.jsonl"],
        ["randomize", "--eps", "0.5,1.0"],
        ["chi2", "--d", "4", "--pairs", "0-9"],
        ["verify", "--mech", "InpRS", "--d", "40"],
        [],
    ],
)
def test_config_errors_exit_1(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert "error" in err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epsilon": 1.0}))
    code, _, err = run(capsys, "simulate", "--config", cfg)
    assert code == 1 and "unknown config keys" in err


def test_runtime_error_exits_2(tmp_path, capsys, monkeypatch):
    import ldpm.cli as cli

    def boom(*_):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "run_grid", boom)
    code, _, err = run(capsys, "simulate", "--d", 3, "--n", 10, "--trials", 1, "--out", tmp_path / "x")
    assert code == 2 and "disk on fire" in err


def test_verify_command(capsys):
    code, out, _ = run(capsys, "verify", "--mech", "all", "--d", 4)
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 2 * len(Mechanism) and all(line.endswith("ok") for line in lines)


@pytest.mark.parametrize("ext", ["jsonl", "bin"])
def test_randomize_then_reconstruct(tmp_path, capsys, ext):
    reports = tmp_path / f"r.{ext}"
    code, out, _ = run(capsys, "randomize", "--mech", "MargPS", "--d", 4, "--k", 2, "--eps", 50, "--n", 3000, "--seed", 2, "--out", reports)
    assert code == 0 and "wrote 3000" in out
    dest = tmp_path / "tables.json"
    code, _, _ = run(capsys, "reconstruct", reports, "--d", 4, "--k", 2, "--eps", 50, "--out", dest)
    assert code == 0
    tables = json.loads(dest.read_text())
    assert len(tables) == 6
    code, stdout, _ = run(capsys, "reconstruct", reports, "--d", 4, "--k", 2, "--eps", 50, "--attrs", "1,3")
    assert code == 0
    assert len(json.loads(stdout)) == 1
    code, _, err = run(capsys, "reconstruct", reports, "--d", 4, "--k", 2, "--eps", 50, "--mech", "InpHT")
    assert code == 1 and "does not match" in err
    code, _, _ = run(capsys, "reconstruct", reports, "--d", 4, "--k", 2, "--eps", 50, "--normalize", "--out", tmp_path / "t.csv")
    assert code == 0 and (tmp_path / "t.csv").read_text().count("\n") > 6


def test_reconstruct_matches_population_in_noiseless_limit(tmp_path, capsys):
    from ldpm.cli import one_population, experiment_config, build_parser

    reports = tmp_path / "r.jsonl"
    argv = ["randomize", "--mech", "InpPS", "--d", "4", "--k", "2", "--eps", "100", "--n", "4000", "--seed", "3", "--out", str(reports)]
    assert main(argv) == 0
    capsys.readouterr()
    args = build_parser().parse_args(argv)
    config = experiment_config(args, {"mech": "InpPS", "trials": 1})
    truth = Dataset(4, one_population(config, None, 4000), "abcd").distribution()
    assert main(["reconstruct", str(reports), "--d", "4", "--k", "2", "--eps", "100", "--attrs", "0,2"]) == 0
    table = json.loads(capsys.readouterr().out)[0]
    exact = marginal_operator(truth, MarginalSpec.from_attributes(4, (0, 2)))
    np.testing.assert_allclose(table["cells"], exact.cells, atol=1e-12)


def test_chi2_command(tmp_path, capsys):
    out = tmp_path / "chi.csv"
    code, stdout, _ = run(capsys, "chi2", "--d", 5, "--n", "2^14", "--pairs", "0-1,2-4", "--seed", 1, "--out", out)
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert [(r["attr_a"], r["attr_b"]) for r in rows] == [("a0", "a1"), ("a2", "a4")]
    assert "verdict agrees with exact on" in stdout
    assert run(capsys, "chi2", "--k", 3)[0] == 1


def test_chowliu_command(tmp_path, capsys):
    out, dot = tmp_path / "tree.csv", tmp_path / "tree.dot"
    code, stdout, _ = run(capsys, "chowliu", "--d", 5, "--n", "2^14", "--seed", 4, "--out", out, "--dot", dot)
    assert code == 0
    assert len(out.read_text().splitlines()) == 1 + 4
    assert dot.read_text().startswith("graph chow_liu {")
    assert "private tree" in stdout and "exact tree" in stdout


def test_em_command(tmp_path, capsys):
    code, stdout, _ = run(capsys, "em", "--d", 4, "--n", 2000, "--trials", 2, "--out", tmp_path / "em")
    assert code == 0
    assert "degenerate=" in stdout
    rows = list(csv.DictReader((tmp_path / "em" / "summary.csv").open()))
    assert rows[0]["mechanism"] == "InpEM" and rows[0]["degenerate"] != ""
    first = json.loads((tmp_path / "em" / "records.jsonl").read_text().splitlines()[0])
    assert {"iterations", "degenerate"} <= set(first)
