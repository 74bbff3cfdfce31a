import json
import math
import os
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mifq.cli import main
from mifq.envs import TwoStepTeam, enumerate_model
from mifq.errors import FormatError, MetricsLockError
from mifq.expert import RandomPolicy, exact_return, make_expert
from mifq.harness import MetricsRow, MetricsWriter, evaluate, plot_metrics, read_metrics, write_metrics
from mifq.nets import load_checkpoint, save_checkpoint
from mifq.properties import SUITES, run_all


def row(step, seed=0, ret=-1.5):
    return MetricsRow(step, seed, ret, 0.25, 1.0, -0.5, 1.5, 0.125)


finite = st.floats(allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=5))
def test_metrics_round_trip_is_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("m") / "metrics.csv"
    rows = [MetricsRow(10 * k, 1, a, 0.5, b, c, a, 0.0) for k, (a, b, c) in enumerate(values)]
    write_metrics(rows, path)
    assert read_metrics(path) == rows


def test_metrics_writer_lock_and_step_order(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsWriter(path) as w:
        w.write(row(0))
        with pytest.raises(MetricsLockError):
            MetricsWriter(path).__enter__()
        with pytest.raises(ValueError):
            w.write(row(0))
        w.write(row(0, seed=1))
    # appending resumes the per-seed step check from the file
    with MetricsWriter(path) as w:
        with pytest.raises(ValueError):
            w.write(row(0, seed=1))
        w.write(row(5))
    assert [r.step for r in read_metrics(path)] == [0, 0, 5]
    with pytest.raises(ValueError):
        write_metrics([row(0, ret=math.nan)], tmp_path / "nan.csv")


def test_metrics_read_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("step,seed\n0,0\n")
    with pytest.raises(FormatError) as exc:
        read_metrics(bad)
    assert exc.value.line == 1
    write_metrics([row(0), row(1)], bad)
    lines = bad.read_text().splitlines()
    bad.write_text("\n".join(lines[:2] + ["1,0,x,0,0,0,0,0"]) + "\n")
    with pytest.raises(FormatError) as exc:
        read_metrics(bad)
    assert exc.value.line == 3


def test_evaluate_protocol():
    env = TwoStepTeam()
    expert, _ = make_expert(env)
    with pytest.raises(ValueError):
        evaluate(expert, env, 0, 0)
    single = evaluate(expert, env, 1, 3)
    assert single == evaluate(expert, env, 1, 3)
    mean, _ = evaluate(expert, env, 2000, 0)
    # exact expected return and its per-episode spread under the expert
    exact = exact_return(enumerate_model(env), expert.probs)
    assert mean == pytest.approx(exact, abs=3 * 3.2 / math.sqrt(2000))


def test_plot_writes_valid_svg(tmp_path):
    series = {"a": [row(0, s, -3.0 + s) for s in range(3)] + [row(10, s, -1.0) for s in range(3)],
              "b": [row(0, 0, -2.0)]}
    out = tmp_path / "c.svg"
    plot_metrics(series, out, title="demo")
    root = ET.parse(out).getroot()
    assert root.tag.endswith("svg")
    tags = [el.tag.split("}")[-1] for el in root]
    assert tags.count("polyline") == 2 and tags.count("polygon") == 2
    with pytest.raises(ValueError):
        plot_metrics({}, out)


def test_property_suites_pass():
    results = run_all(seed=1)
    assert [r.name for r in results] and len(results) == len(SUITES)
    for r in results:
        assert r.passed, r.line()


# ---- command line ----------------------------------------------------------------------
def cli(*args, env=None):
    full = {**os.environ, **(env or {})}
    return subprocess.run([sys.executable, "-m", "mifq.cli", *args], capture_output=True, text=True,
                          env=full)


def test_cli_exit_codes(tmp_path, capsys):
    assert cli("train", "--no-such-flag").returncode == 2
    res = cli("eval", str(tmp_path / "missing.json"))
    assert res.returncode == 1 and res.stderr.startswith("error:")
    assert main(["train", "--env", "two_step", "--demos", str(tmp_path / "none.jsonl"),
                 "--out", str(tmp_path / "r")]) == 1
    assert main(["selftest", "--only", "nope"]) == 1
    assert main(["selftest", "--only", "telescoping", "--only", "soft_vi"]) == 0
    assert "telescoping" in capsys.readouterr().out


def test_cli_uniform_checkpoint_eval_and_seed_env(tmp_path):
    demos = tmp_path / "d.jsonl"
    assert cli("expert", "--env", "two_step", "--episodes", "4", "--out", str(demos)).returncode == 0
    res = cli("train", "--env", "two_step", "--demos", str(demos), "--n-seeds", "1", "--max-steps", "0",
              "--eval-episodes", "1", "--out", str(tmp_path / "r"), env={"MIFQ_SEED": "5"})
    assert res.returncode == 0, res.stderr
    ckpt = tmp_path / "r" / "checkpoint_seed5.json"
    params, meta = load_checkpoint(ckpt)
    assert meta["seed"] == 5
    # an explicit --seed beats the environment variable
    res = cli("train", "--env", "two_step", "--demos", str(demos), "--n-seeds", "1", "--max-steps", "0",
              "--eval-episodes", "1", "--seed", "2", "--out", str(tmp_path / "s"), env={"MIFQ_SEED": "5"})
    assert (tmp_path / "s" / "checkpoint_seed2.json").exists()
    assert cli("train", "--demos", str(demos), env={"MIFQ_SEED": "x"}).returncode == 1
    # all-zero weights give a uniform policy: return 4.75, per-episode sd about 3.19
    save_checkpoint(ckpt, {k: np.zeros_like(v) for k, v in params.items()}, meta)
    res = cli("eval", str(ckpt), "--episodes", "400")
    assert res.returncode == 0, res.stderr
    out = json.loads(res.stdout)
    assert out["mean_return"] == pytest.approx(4.75, abs=3 * 3.19 / 20)
    uniform = exact_return(enumerate_model(TwoStepTeam()), np.full((3, 4), 0.25))
    assert uniform == pytest.approx(4.75)
    assert evaluate(RandomPolicy(2, 2), TwoStepTeam(), 400, 0)[0] == pytest.approx(4.75, abs=0.48)


def test_cli_plot(tmp_path):
    write_metrics([row(0), row(10)], tmp_path / "m.csv")
    res = cli("plot", f"mine={tmp_path / 'm.csv'}", "--out", str(tmp_path / "p.svg"))
    assert res.returncode == 0 and json.loads(res.stdout)["series"] == ["mine"]
    assert cli("plot", str(tmp_path / "m.csv"), "--out", str(tmp_path / "q.svg"),
               "--metric", "nope").returncode == 1
