import json
import math

import numpy as np
import pytest

from mifq.envs import SpreadLite, TabularModel, TwoStepTeam, enumerate_model, make_env
from mifq.errors import ConvergenceError, FormatError, IncompatibleDemosError
from mifq.expert import (RandomPolicy, SpreadExpert, TabularSoftQ, bellman_residual,
                         collect_demonstrations, episode_returns, exact_return, expert_policy,
                         joint_from_local, load_demos, make_expert, save_demos,
                         soft_value_iteration)

GAMMA = 0.99


def one_state_model(gamma):
    return TabularModel(P=np.ones((1, 1, 1)), R=np.ones((1, 1)), terminal=np.zeros((1, 1), bool),
                        init=np.ones(1), gamma=gamma, n_agents=1, n_actions=1)


def test_single_state_geometric_series():
    sq = soft_value_iteration(one_state_model(0.9))
    assert sq.Q[0, 0] == pytest.approx(10.0, abs=1e-6)
    assert bellman_residual(one_state_model(0.9), sq) <= 1e-8


def test_gamma_zero_returns_rewards():
    model = enumerate_model(TwoStepTeam())
    sq = soft_value_iteration(model, gamma=0.0)
    np.testing.assert_array_equal(sq.Q, model.R)


def test_two_step_soft_q_matches_closed_form():
    # V(s1) = log(4 e^7), V(s2) = log(1 + 2e + e^8); s0 pays gamma * V(branch)
    v1 = 7.0 + math.log(4.0)
    v2 = math.log(1.0 + 2.0 * math.e + math.exp(8.0))
    sq = soft_value_iteration(enumerate_model(TwoStepTeam()))
    np.testing.assert_allclose(sq.Q[0], [GAMMA * v1, GAMMA * v1, GAMMA * v2, GAMMA * v2], rtol=1e-12)
    np.testing.assert_allclose(sq.Q[0], [8.3025, 8.3025, 7.9222, 7.9222], atol=5e-4)
    residuals = np.array(sq.residuals)
    assert np.all(np.diff(residuals) <= 1e-12)


def test_non_convergence_reports_residual():
    with pytest.raises(ConvergenceError) as info:
        soft_value_iteration(one_state_model(0.999), max_iters=5)
    assert info.value.iterations == 5 and info.value.residual > 0


def test_uniform_row_gives_uniform_policy_and_expert_beats_uniform():
    model = enumerate_model(TwoStepTeam())
    flat = expert_policy(TabularSoftQ(np.zeros((3, 4)), GAMMA, 0), model)
    np.testing.assert_allclose(flat.probs, 0.25)
    uniform = exact_return(model, flat.probs)
    assert uniform == pytest.approx(0.5 * 7 + 0.5 * (0 + 1 + 1 + 8) / 4)
    expert = make_expert(TwoStepTeam())[0]
    # closed form: branch probabilities from Q(s0), then softmax payoffs
    v1, v2 = 7.0 + math.log(4.0), math.log(1 + 2 * math.e + math.exp(8))
    p_safe = 1.0 / (1.0 + math.exp(GAMMA * (v2 - v1)))
    e8 = math.exp(8)
    payoff = (2 * math.e + 8 * e8) / (1 + 2 * math.e + e8)
    assert exact_return(model, expert.probs) == pytest.approx(p_safe * 7 + (1 - p_safe) * payoff, rel=1e-12)
    assert exact_return(model, expert.probs) > uniform


def test_joint_from_local_is_product():
    model = enumerate_model(TwoStepTeam())
    p0 = np.array([[0.2, 0.8]] * 3)
    p1 = np.array([[0.6, 0.4]] * 3)
    joint = joint_from_local([p0, p1], model)
    np.testing.assert_allclose(joint[0], [0.12, 0.08, 0.48, 0.32])


def test_spread_expert_stays_when_solved():
    env = SpreadLite()
    env.set_layout([[0, 0], [2, 3], [4, 1]], [[0, 0], [2, 3], [4, 1]])
    act = SpreadExpert(env).act(env.state(), env.observations(), np.random.default_rng(0))
    np.testing.assert_array_equal(act, [0, 0, 0])


@pytest.mark.parametrize("env_id,n", [("spread", 512), ("miner", 256)])
def test_expert_beats_random_with_confidence(env_id, n):
    env = make_env(env_id)
    policy, _ = make_expert(env)
    exp = episode_returns(policy, env, n, 0)
    rnd = episode_returns(RandomPolicy(env.n_agents, env.n_actions), env, n, 0)
    se = math.sqrt(exp.var(ddof=1) / n + rnd.var(ddof=1) / n)
    assert exp.mean() - rnd.mean() > 2.576 * se


def test_collect_lengths_and_determinism(tmp_path):
    env = TwoStepTeam()
    policy, name = make_expert(env)
    one = collect_demonstrations(policy, env, 1, 0, name)
    assert one.n_transitions == 2 and one.trajectories[0][-1].done
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_demos(collect_demonstrations(policy, env, 20, 3, name), a)
    save_demos(collect_demonstrations(policy, env, 20, 3, name), b)
    assert a.read_bytes() == b.read_bytes()
    with pytest.raises(ValueError):
        collect_demonstrations(policy, env, 0, 0)


def test_demo_round_trip_is_exact(tmp_path):
    env = SpreadLite()
    policy, name = make_expert(env)
    demos = collect_demonstrations(policy, env, 4, 11, name)
    path = tmp_path / "d.jsonl"
    save_demos(demos, path)
    back = load_demos(path, env)
    assert back == demos
    np.testing.assert_array_equal(back.arrays()["obs"], demos.arrays()["obs"])
    # float values survive at full precision
    assert back.trajectories[0][0].obs[0, 2] == demos.trajectories[0][0].obs[0, 2]


def _write_two_step(tmp_path, n=3):
    env = TwoStepTeam()
    policy, name = make_expert(env)
    path = tmp_path / "d.jsonl"
    save_demos(collect_demonstrations(policy, env, n, 0, name), path)
    return env, path


def test_truncated_file_names_line(tmp_path):
    env, path = _write_two_step(tmp_path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError, match=f"line {len(lines) - 1}"):
        load_demos(path, env)
    path.write_text("\n".join(lines[:3] + [lines[3][:20]] + lines[4:]) + "\n")
    with pytest.raises(FormatError) as info:
        load_demos(path, env)
    assert info.value.line == 4


def test_header_count_mismatch(tmp_path):
    env, path = _write_two_step(tmp_path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["episodes"] = 5
    path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(FormatError, match="5 episodes"):
        load_demos(path, env)


def test_hash_mismatch_is_incompatible(tmp_path):
    _, path = _write_two_step(tmp_path)
    with pytest.raises(IncompatibleDemosError):
        load_demos(path, TwoStepTeam(slip=0.1))
    load_demos(path)  # no env given: no check
