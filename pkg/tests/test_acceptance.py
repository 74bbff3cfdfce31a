"""Acceptance criteria 1-10, each at its stated tolerance.

Every test reports one PASS/FAIL line through the ``report`` fixture; the
lines are repeated in pytest's terminal summary.
"""
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from mifq.envs import TwoStepTeam, enumerate_model, make_env
from mifq.expert import (RandomPolicy, collect_demonstrations, exact_return, joint_from_local,
                         load_demos, make_expert, save_demos, soft_value_iteration)
from mifq.harness import evaluate, read_metrics
from mifq.ilcore import Learner, TrainConfig, recover_policy, train
from mifq.nets import load_checkpoint, save_checkpoint
from mifq.properties import (composite_convexity_suite, contraction_ratio, gradient_suite,
                             linear_mixer_suite, mixer_convexity_suite, mixer_monotonicity_suite,
                             telescoping_suite)


def test_criterion_01_gradients(report):
    t0 = time.perf_counter()
    res = gradient_suite(seed=0, n_coords=100, tolerance=1e-4)
    secs = time.perf_counter() - t0
    ok = res.passed and res.samples >= 400 and secs < 60
    report(1, ok, f"max rel err {res.worst:.2e} <= 1e-4 over {res.samples} coords (4 x 100), {secs:.1f}s < 60s")
    assert ok


def test_criterion_02_convexity_and_monotonicity(report):
    t0 = time.perf_counter()
    conv = mixer_convexity_suite(seed=0, n_samples=10_000, tolerance=1e-9)
    mono = mixer_monotonicity_suite(seed=0, n_samples=10_000, tolerance=1e-9)
    comp = composite_convexity_suite(seed=0, tolerance=1e-8)
    secs = time.perf_counter() - t0
    ok = conv.passed and mono.passed and comp.passed and secs < 120
    report(2, ok, f"midpoint {conv.worst:.1e}, monotone {mono.worst:.1e} (1e-9); "
                  f"composite {comp.worst:.1e} (1e-8); {secs:.1f}s < 120s")
    assert ok


def test_criterion_03_linear_mixer_decomposition(report):
    res = linear_mixer_suite(seed=0, tolerance=1e-8)
    report(3, res.passed, f"max rel err dJ/dtheta_i vs alpha_i dJ_i/dtheta_i {res.worst:.2e} <= 1e-8")
    assert res.passed


def test_criterion_04_telescoping(report):
    res = telescoping_suite(seed=0, n_pairs=100, tolerance=1e-10)
    report(4, res.passed, f"max |lhs - rhs| {res.worst:.2e} <= 1e-10 over {res.samples} (V, policy) pairs")
    assert res.passed and res.samples == 100


def test_criterion_05_soft_value_iteration(report):
    model = enumerate_model(TwoStepTeam())
    sq = soft_value_iteration(model, tol=1e-8)
    from mifq.expert import bellman_residual
    resid = bellman_residual(model, sq)
    # TwoStepTeam converges in 3 sweeps, so the ratio is also checked on an ergodic model
    from mifq.properties import random_tabular_model
    ergodic = random_tabular_model(np.random.default_rng([0, 17]))
    sq_e = soft_value_iteration(ergodic, tol=1e-8)
    ratio = max(contraction_ratio(sq.residuals), contraction_ratio(sq_e.residuals))
    ok = resid <= 1e-8 and bellman_residual(ergodic, sq_e) <= 1e-8 and ratio <= model.gamma + 0.01
    report(5, ok, f"residual {resid:.1e} <= 1e-8; contraction ratio {ratio:.4f} <= {model.gamma + 0.01:.2f} "
                  f"({sq_e.iterations} sweeps on a random model)")
    assert ok


ORACLE_CONFIG = dict(hidden_dim=64, max_steps=5000, eval_every=5000)


def test_criterion_06_oracle_scale_learning(report):
    env = TwoStepTeam()
    expert, name = make_expert(env)
    demos = collect_demonstrations(expert, env, 64, 0, name)
    model = enumerate_model(env)
    target = 0.95 * exact_return(model, expert.probs)
    t0 = time.perf_counter()
    got = []
    for seed in range(4):
        learner, _ = train(env, demos, TrainConfig(seed=seed, **ORACLE_CONFIG))
        local = [np.array([recover_policy(learner.qnet, o, i) for o in np.eye(3)]) for i in range(2)]
        got.append(exact_return(model, joint_from_local(local, model)))
    secs = time.perf_counter() - t0
    ok = all(g >= target for g in got) and secs < 300
    report(6, ok, f"exact returns {[round(g, 3) for g in got]} >= {target:.3f} on 4/4 seeds; {secs:.0f}s < 300s")
    assert ok


SPREAD_CONFIG = dict(hidden_dim=64, collect_steps=8, max_steps=100_000, eval_every=100_000,
                     eval_episodes=128)


@pytest.mark.slow
def test_criterion_07_spread_ordering(report):
    env = make_env("spread")
    expert, name = make_expert(env)
    demos = collect_demonstrations(expert, env, 128, 0, name)
    expert_mean = float(demos.returns().mean())
    t0 = time.perf_counter()

    def final(algo, n_demos):
        out = []
        for seed in range(4):
            cfg = TrainConfig(seed=seed, **SPREAD_CONFIG)
            _, rows = train(env, demos.subset(n_demos), cfg, algo)
            out.append(rows[-1].mean_return)
        return float(np.mean(out)), out

    mifq = {n: final("mifq", n) for n in (16, 64, 128)}
    iiq, iiq_runs = final("iiq", 128)
    secs = time.perf_counter() - t0
    # "80% of expert" on a negative-reward task is measured on the random-to-expert scale
    random_mean = evaluate(RandomPolicy(env.n_agents, env.n_actions), env, 128, seed=12345)[0]
    score = (mifq[128][0] - random_mean) / (expert_mean - random_mean)
    sweep = [mifq[n][0] for n in (16, 64, 128)]
    ordered = mifq[128][0] >= iiq
    monotone = sweep[0] <= sweep[1] <= sweep[2]
    ok = ordered and score >= 0.8 and monotone and secs < 3600
    report(7, ok, f"MIFQ {mifq[128][0]:.2f} vs IIQ {iiq:.2f}; normalized {score:.3f} >= 0.8 "
                  f"(expert {expert_mean:.2f}, random {random_mean:.2f}); sweep 16/64/128 "
                  f"{[round(s, 2) for s in sweep]}; {secs:.0f}s < 3600s")
    print(json.dumps({"mifq": {n: v[1] for n, v in mifq.items()}, "iiq": iiq_runs}))
    assert ok


def test_criterion_08_single_agent_reduction(report):
    env = make_env("spread", n_agents=1)
    expert, name = make_expert(env)
    demos = collect_demonstrations(expert, env, 16, 0, name)
    cfg = TrainConfig(hidden_dim=32, max_steps=1000, eval_every=1000, eval_episodes=4, seed=3,
                      mixer="identity")
    a, b = Learner(env, demos, cfg, "iiq"), Learner(env, demos, cfg, "mifq")
    a.train()
    b.train()
    diff = float(np.max(np.abs(np.array(a.loss_trace) - np.array(b.loss_trace))))
    ok = len(a.loss_trace) == len(b.loss_trace) > 800 and diff <= 1e-9
    report(8, ok, f"max |loss_iiq - loss_mifq| {diff:.1e} <= 1e-9 over {len(a.loss_trace)} updates "
                  f"in 1000 env steps")
    assert ok


def _cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "mifq.cli", *args], capture_output=True,
                          text=True, env=env)


def test_criterion_09_determinism(tmp_path, report):
    demos = tmp_path / "demos.jsonl"
    assert _cli("expert", "--env", "spread", "--episodes", "8", "--out", str(demos)).returncode == 0
    cfg = {"env": "spread", "algo": "mifq", "demos": str(demos), "n_seeds": 2, "eval_episodes": 4,
           "train": {"hidden_dim": 16, "mix_hidden": 8, "max_steps": 400, "eval_every": 200,
                     "batch_size": 32, "warmup_steps": 32}}
    outs = []
    for run in ("a", "b"):
        cfg["out_dir"] = str(tmp_path / run)
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps(cfg))
        res = _cli("train", "--config", str(path))
        assert res.returncode == 0, res.stderr
        outs.append(tmp_path / run)
    names = ["metrics.csv", "metrics_seed0.csv", "metrics_seed1.csv"]
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    ok = same and len(read_metrics(outs[0] / "metrics.csv")) == 6
    report(9, ok, f"repeated train runs give byte-identical {', '.join(names)}")
    assert ok


def test_criterion_10_format_round_trips(tmp_path, report):
    env = make_env("spread")
    expert, name = make_expert(env)
    demos = collect_demonstrations(expert, env, 3, 5, name)
    save_demos(demos, tmp_path / "d.jsonl")
    demo_ok = load_demos(tmp_path / "d.jsonl", env) == demos
    tricky = np.array([0.1, 1 / 3, 2.0 ** -1074, 1.7976931348623157e308, -0.0, 123456789.12345679])
    params = {"theta.w": tricky.reshape(2, 3), "omega_R.b": np.random.default_rng(0).normal(size=4)}
    save_checkpoint(tmp_path / "c.json", params, {"algo": "mifq"})
    back, meta = load_checkpoint(tmp_path / "c.json")
    ck_ok = all(np.array_equal(back[k], v) and back[k].shape == v.shape for k, v in params.items())
    bits_ok = back["theta.w"].reshape(-1).view(np.uint64).tolist() == tricky.view(np.uint64).tolist()
    ok = demo_ok and ck_ok and bits_ok and meta == {"algo": "mifq"}
    report(10, ok, "demonstration file and checkpoint reload to structural and bitwise equality")
    assert ok
