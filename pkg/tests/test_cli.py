import csv
import json
import subprocess
import sys

import pytest

from dispatchmdp import cli
from dispatchmdp.instance import load_instance, load_policy, myopic_policy


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def inst3(tmp_path):
    path = tmp_path / "inst3.json"
    assert cli.main(["gen", "--seed", "2", "--nodes", "6", "--units", "3", "-o", str(path)]) == 0
    return path


def test_gen_full_size(tmp_path, capsys):
    path = tmp_path / "inst.json"
    assert cli.main(["gen", "--seed", "1", "--nodes", "30", "--units", "15", "-o", str(path)]) == 0
    inst = load_instance(path)
    assert (inst.J, inst.N) == (30, 15)
    assert "utilization=0.5000" in capsys.readouterr().out


def test_gen_zero_units(tmp_path):
    assert cli.main(["gen", "--units", "0", "-o", str(tmp_path / "x.json")]) == 2


def test_gen_repeatable(tmp_path):
    args = ["gen", "--seed", "5", "--nodes", "4", "--units", "2", "-o"]
    cli.main(args + [str(tmp_path / "a.json")])
    cli.main(args + [str(tmp_path / "b.json")])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen", "--no-such-flag"])
    assert exc.value.code == 2


def test_solve_pd_matches_exact(tmp_path, inst3, capsys):
    for method in ("pd", "exact"):
        assert cli.main(["solve", "--method", method, "-i", str(inst3), "-o", str(tmp_path / method)]) == 0
    mu_pd = float(read_csv(tmp_path / "pd" / "trace.csv")[-1]["mu"])
    mu_ex = float(read_csv(tmp_path / "exact" / "trace.csv")[-1]["mu"])
    assert abs(mu_pd - mu_ex) <= 1e-9
    assert "start=myopic" in capsys.readouterr().out
    inst = load_instance(inst3)
    load_policy(tmp_path / "pd" / "policy.json").check(inst)
    assert len(read_csv(tmp_path / "exact" / "values.csv")) == (inst.J + 1) * inst.n_masks


def test_solve_exact_guard(tmp_path, capsys):
    path = tmp_path / "big.json"
    cli.main(["gen", "--seed", "1", "--nodes", "30", "--units", "15", "-o", str(path)])
    assert cli.main(["solve", "--method", "exact", "-i", str(path), "-o", str(tmp_path)]) == 3
    assert "train" in capsys.readouterr().err


def test_missing_instance(tmp_path):
    assert cli.main(["solve", "-i", str(tmp_path / "nope.json"), "-o", str(tmp_path)]) == 2


def test_train_outputs(tmp_path, inst3):
    out = tmp_path / "td"
    rc = cli.main(["train", "-i", str(inst3), "-K", "3", "-T", "2000", "--seed", "7",
                   "--history-every", "500", "-o", str(out)])
    assert rc == 0
    trace = read_csv(out / "trace.csv")
    assert [r["iter"] for r in trace] == ["1", "2", "3"]
    assert set(trace[0]) == {"iter", "sample_mean_response", "mu_estimate", "policy_changes"}
    assert len(read_csv(out / "values.csv")) == 8
    assert len(read_csv(out / "value_history.csv")) == 5 * 8


def test_train_degenerate_budget(tmp_path, inst3):
    assert cli.main(["train", "-i", str(inst3), "-K", "1", "-T", "1", "-o", str(tmp_path)]) == 0
    inst = load_instance(inst3)
    assert load_policy(tmp_path / "policy.json").changes(myopic_policy(inst)) <= inst.J


def test_train_rejects_bad_a(tmp_path, inst3):
    assert cli.main(["train", "-i", str(inst3), "-a", "0.5", "-o", str(tmp_path)]) == 2


def test_compare_and_eval(tmp_path, inst3):
    cli.main(["solve", "-i", str(inst3), "-o", str(tmp_path)])
    rc = cli.main(["compare", "-i", str(inst3), "-p", "myopic", "-p", str(tmp_path / "policy.json"),
                   "-o", str(tmp_path)])
    assert rc == 0
    rows = read_csv(tmp_path / "compare.csv")
    assert [r["policy_name"] for r in rows] == ["myopic", "policy"]
    assert all(r["method"] == "exact" and r["ci_halfwidth"] == "" for r in rows)

    rc = cli.main(["eval", "-i", str(inst3), "--method", "sim", "--calls", "5000", "--reps", "3",
                   "-o", str(tmp_path)])
    assert rc == 0
    (row,) = read_csv(tmp_path / "eval.csv")
    assert row["method"] == "simulated" and float(row["ci_halfwidth"]) > 0


def test_compare_needs_two(tmp_path, inst3):
    assert cli.main(["compare", "-i", str(inst3), "-p", "myopic", "-o", str(tmp_path)]) == 2


def test_policy_for_wrong_instance(tmp_path, inst3):
    other = tmp_path / "n2.json"
    cli.main(["gen", "--seed", "2", "--nodes", "6", "--units", "2", "-o", str(other)])
    cli.main(["solve", "-i", str(other), "-o", str(tmp_path / "n2")])
    rc = cli.main(["eval", "-i", str(inst3), "-p", str(tmp_path / "n2" / "policy.json"), "-o", str(tmp_path)])
    assert rc == 2


def test_outdir_from_environment(tmp_path, inst3, monkeypatch):
    monkeypatch.setenv(cli.OUTDIR_ENV, str(tmp_path / "env"))
    assert cli.main(["solve", "-i", str(inst3)]) == 0
    assert (tmp_path / "env" / "policy.json").exists()


@pytest.mark.parametrize("command", ["solve", "train", "eval", "compare"])
def test_help_documents_columns(command, capsys):
    with pytest.raises(SystemExit):
        cli.main([command, "--help"])
    text = capsys.readouterr().out
    assert "," in text and ("mean_response" in text or "mu" in text)


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "dispatchmdp.cli", "gen", "--units", "2", "--nodes", "2",
                          "-o", str(tmp_path / "i.json")], capture_output=True, text=True)
    assert out.returncode == 0
    assert json.loads((tmp_path / "i.json").read_text())["N"] == 2
