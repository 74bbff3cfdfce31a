"""Numerical property suites: gradients, mixer convexity/monotonicity, linear-mixer
decomposition, the telescoping identity and soft value iteration.

Each suite returns a ``SuiteResult`` holding the worst observed violation and the
tolerance it is judged against, so the same code backs ``selftest`` and the tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import TabularModel, TwoStepTeam, enumerate_model
from .expert import soft_value_iteration
from .ilcore import (MifqModel, chi2, iiq_loss, inverse_bellman, local_state_values, mifq_loss,
                     v0_telescope_check)
from .nets import (FrozenMixer, HyperMixer, HyperNet, IndependentQNets, LinearMixer, LocalQNet,
                   MixingWeights, TabularQ, mixing_forward)


@dataclass
class SuiteResult:
    name: str
    worst: float
    tolerance: float
    samples: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.worst <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: worst {self.worst:.3e} <= {self.tolerance:.0e} "
                f"over {self.samples} samples ({self.seconds:.1f}s)")


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---- finite differences ------------------------------------------------------------------
def gradient_errors(loss_fn, params: list[Tensor], n_coords: int, rng: np.random.Generator,
                    eps: float = 1e-6, floor: float = 1e-6) -> np.ndarray:
    """Relative error between autodiff and central differences at random coordinates.

    ``rel = |g_auto - g_fd| / max(|g_auto|, |g_fd|, floor)``; the floor keeps
    vanishing gradients from turning round-off into large ratios.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    auto = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    sizes = np.array([p.data.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errs = []
    for flat in picks:
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[j], params[j].data.shape)
        p = params[j]
        orig = p.data[idx]
        p.data[idx] = orig + eps
        up = loss_fn().item()
        p.data[idx] = orig - eps
        down = loss_fn().item()
        p.data[idx] = orig
        fd = (up - down) / (2 * eps)
        a = auto[j][idx]
        errs.append(abs(a - fd) / max(abs(a), abs(fd), floor))
    return np.array(errs)


def _random_batch(rng, n, m, obs_dim, state_dim, k, done_prob=0.2):
    return {
        "S": rng.normal(size=(n, state_dim)),
        "obs": rng.normal(size=(n, m, obs_dim)),
        "A": rng.integers(k, size=(n, m)),
        "r": rng.normal(size=n),
        "Sn": rng.normal(size=(n, state_dim)),
        "obsn": rng.normal(size=(n, m, obs_dim)),
        "done": (rng.random(n) < done_prob).astype(np.float64),
    }


@_timed
def gradient_suite(seed: int = 0, n_coords: int = 100, tolerance: float = 1e-4) -> SuiteResult:
    """Local Q net, hyper-net, mixing net and the full loss against central differences."""
    rng = np.random.default_rng([seed, 11])
    m, k, d_o, d_s, h, mh = 3, 4, 5, 6, 16, 8
    qnet = LocalQNet(d_o, m, k, h, rng, zero_last=False)
    hr = HyperNet(d_s, m, mh, h, rng)
    hv = HyperNet(d_s, m, mh, h, rng)
    exp_b = _random_batch(rng, 12, m, d_o, d_s, k)
    rep_b = _random_batch(rng, 12, m, d_o, d_s, k)
    wq = rng.normal(size=(8, m, k))
    wh = rng.normal(size=(8, MixingWeights.flat_size(m, mh)))
    x_mix = Tensor(rng.normal(size=(8, m)), requires_grad=True)
    states = rng.normal(size=(8, d_s))
    w_out = rng.normal(size=8)

    cases = [
        ("local Q net", lambda: ad.tsum(qnet.q_all(exp_b["obs"][:8]) * wq), qnet.parameters()),
        ("hyper-net", lambda: ad.tsum(hr.mlp(states) * wh), hr.parameters()),
        ("mixing net", lambda: ad.tsum(mixing_forward(x_mix, hr.forward(states)) * w_out),
         [x_mix] + hr.parameters()),
        ("full loss", lambda: mifq_loss(exp_b, rep_b, MifqModel(qnet, HyperMixer(hr, input_scale=1 / m),
                                                                  HyperMixer(hv, input_scale=1 / m)),
                                        0.99).total,
         qnet.parameters() + hr.parameters() + hv.parameters()),
    ]
    worst, total = 0.0, 0
    for _, fn, params in cases:
        errs = gradient_errors(fn, params, n_coords, rng)
        worst, total = max(worst, float(errs.max())), total + len(errs)
    return SuiteResult("gradients", worst, tolerance, total)


# ---- mixer shape properties ------------------------------------------------------------------

def _mix(x: np.ndarray, w: MixingWeights) -> np.ndarray:
    return mixing_forward(Tensor(x), w).data


@_timed
def mixer_convexity_suite(seed: int = 0, n_samples: int = 10_000, tolerance: float = 1e-9,
                          m: int = 3, h: int = 8) -> SuiteResult:
    """Midpoint convexity in x for hyper-generated weights of both mixers."""
    rng = np.random.default_rng([seed, 12])
    worst = -np.inf
    for _ in range(2):  # reward and value mixers: independent hyper-nets
        hyper = HyperNet(4, m, h, 16, rng)
        w = hyper.forward(rng.normal(size=(n_samples, 4)))
        x, y = rng.normal(size=(2, n_samples, m)) * 3.0
        gap = _mix(0.5 * (x + y), w) - 0.5 * (_mix(x, w) + _mix(y, w))
        worst = max(worst, float(gap.max()))
    return SuiteResult("mixer midpoint convexity", max(worst, 0.0), tolerance, 2 * n_samples)


@_timed
def mixer_monotonicity_suite(seed: int = 0, n_samples: int = 10_000, tolerance: float = 1e-9,
                             m: int = 3, h: int = 8) -> SuiteResult:
    """Raising any single coordinate never lowers the mixed output."""
    rng = np.random.default_rng([seed, 13])
    worst = -np.inf
    for _ in range(2):
        hyper = HyperNet(4, m, h, 16, rng)
        w = hyper.forward(rng.normal(size=(n_samples, 4)))
        x = rng.normal(size=(n_samples, m)) * 3.0
        base = _mix(x, w)
        for i in range(m):
            bumped = x.copy()
            bumped[:, i] += rng.exponential(1.0, size=n_samples)
            worst = max(worst, float((base - _mix(bumped, w)).max()))
    return SuiteResult("mixer monotonicity", max(worst, 0.0), tolerance, 2 * m * n_samples)


def _tabular_instance(rng, n_obs=4, m=2, k=3, n=16):
    """One-hot observations so a Q-table fully determines every local Q-value."""
    def onehots(size):
        return np.eye(n_obs)[rng.integers(n_obs, size=(size, m))]
    expert = {"S": rng.normal(size=(n, 3)), "obs": onehots(n), "A": rng.integers(k, size=(n, m)),
              "r": np.zeros(n), "Sn": rng.normal(size=(n, 3)), "obsn": onehots(n),
              "done": (rng.random(n) < 0.25).astype(np.float64)}
    # Initial-state batch: done=1 turns the value term into (1-g) E[V_tot(S0)].
    init = {"S": rng.normal(size=(n, 3)), "obs": onehots(n), "A": np.zeros((n, m), dtype=np.int64),
            "r": np.zeros(n), "Sn": np.zeros((n, 3)), "obsn": onehots(n), "done": np.ones(n)}
    return expert, init


@_timed
def composite_convexity_suite(seed: int = 0, n_pairs: int = 200, tolerance: float = 1e-8,
                              gamma: float = 0.9) -> SuiteResult:
    """Midpoint convexity of the mixed objective in the Q-table (2 agents, 3 actions).

    Mixer weights are frozen; the objective is sum_expert R_tot + (1-g) E[V_tot(S0)].
    """
    rng = np.random.default_rng([seed, 14])
    n_obs, m, k, h = 4, 2, 3, 6
    expert, init = _tabular_instance(rng, n_obs, m, k)
    mix_r = FrozenMixer(rng.normal(size=(m, h)), rng.normal(size=h), rng.normal(size=h), rng.normal())
    mix_v = FrozenMixer(rng.normal(size=(m, h)), rng.normal(size=h), rng.normal(size=h), rng.normal())
    weights = np.full(len(init["S"]), (1.0 - gamma) / len(init["S"]))

    def J(tables):
        model = MifqModel(TabularQ(n_obs, m, k, tables), mix_r, mix_v)
        return mifq_loss(expert, init, model, gamma, regularizer="none",
                         expert_reduction="sum", replay_weights=weights).total.item()

    worst = -np.inf
    for _ in range(n_pairs):
        q1, q2 = rng.normal(size=(2, m, n_obs, k)) * 2.0
        gap = J(0.5 * (q1 + q2)) - 0.5 * (J(q1) + J(q2))
        worst = max(worst, gap)
    return SuiteResult("composite convexity in Q", max(worst, 0.0), tolerance, n_pairs)


# ---- linear mixers decompose the objective ------------------------------------------------
@_timed
def linear_mixer_suite(seed: int = 0, n_trials: int = 5, tolerance: float = 1e-8,
                       gamma: float = 0.95) -> SuiteResult:
    """With alpha-weighted sum mixers and disjoint parameters, dJ/dtheta_i = alpha_i dJ_i/dtheta_i."""
    rng = np.random.default_rng([seed, 15])
    m, k, d_o, d_s = 3, 4, 5, 3
    worst, count = 0.0, 0
    for _ in range(n_trials):
        qnet = IndependentQNets(d_o, m, k, 12, rng, zero_last=False)
        alphas = rng.uniform(0.1, 3.0, size=m)
        mixer = LinearMixer(alphas)
        expert = _random_batch(rng, 10, m, d_o, d_s, k)
        replay = _random_batch(rng, 10, m, d_o, d_s, k)
        for p in qnet.parameters():
            p.grad = None
        mifq_loss(expert, replay, MifqModel(qnet, mixer, mixer), gamma, regularizer="none").total.backward()
        joint = {n: p.grad.copy() for n, p in qnet.named_parameters()}
        for i in range(m):
            for p in qnet.parameters():
                p.grad = None
            iiq_loss(expert, replay, qnet, i, gamma, regularizer="none").total.backward()
            for name, p in qnet.named_parameters(prefix=""):
                if not name.startswith(f"agent{i}."):
                    continue
                expect = alphas[i] * p.grad
                denom = max(np.abs(expect).max(), 1e-12)
                worst = max(worst, float(np.abs(joint[name] - expect).max() / denom))
                count += 1
    return SuiteResult("linear mixer decomposition", worst, tolerance, count)


# ---- exact identities on the tabular game ------------------------------------------------
def random_joint_policy(rng, model: TabularModel) -> np.ndarray:
    logits = rng.normal(size=(model.n_states, model.n_joint)) * 2.0
    return ad.np_softmax(logits, axis=-1)


@_timed
def telescoping_suite(seed: int = 0, n_pairs: int = 100, tolerance: float = 1e-10) -> SuiteResult:
    rng = np.random.default_rng([seed, 16])
    model = enumerate_model(TwoStepTeam())
    worst = 0.0
    for _ in range(n_pairs):
        V = rng.normal(size=model.n_states) * 5.0
        lhs, rhs = v0_telescope_check(model, random_joint_policy(rng, model), V, model.gamma)
        worst = max(worst, abs(lhs - rhs))
    return SuiteResult("telescoping identity", worst, tolerance, n_pairs)


def random_tabular_model(rng, n_states=6, n_agents=2, n_actions=2, gamma=0.99) -> TabularModel:
    """Ergodic model without terminals, so value iteration needs many sweeps."""
    n_joint = n_actions ** n_agents
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_joint))
    return TabularModel(P=P, R=rng.normal(size=(n_states, n_joint)),
                        terminal=np.zeros((n_states, n_joint), dtype=bool),
                        init=np.full(n_states, 1.0 / n_states), gamma=gamma,
                        n_agents=n_agents, n_actions=n_actions)


def contraction_ratio(residuals, skip: int = 10) -> float:
    """Largest r_{t+1} / r_t after ``skip`` sweeps (0/0 counts as 0)."""
    r = np.asarray(residuals, dtype=np.float64)[skip:]
    if len(r) < 2:
        return 0.0
    prev, nxt = r[:-1], r[1:]
    ratios = np.where(prev > 0, nxt / np.where(prev > 0, prev, 1.0), 0.0)
    return float(ratios.max())


@_timed
def soft_vi_suite(seed: int = 0, tolerance: float = 1e-8) -> SuiteResult:
    """Residual at convergence and contraction ratio on TwoStepTeam and a random model.

    ``worst`` is the larger of residual/1e-8 and ratio/(gamma + 0.01), so it is
    at most 1 exactly when both conditions hold.
    """
    rng = np.random.default_rng([seed, 17])
    worst = 0.0
    for model in (enumerate_model(TwoStepTeam()), random_tabular_model(rng)):
        sq = soft_value_iteration(model, tol=tolerance)
        worst = max(worst, sq.residuals[-1] / tolerance,
                    contraction_ratio(sq.residuals) / (model.gamma + 0.01))
    return SuiteResult("soft value iteration", worst, 1.0, 2)


@_timed
def loss_bound_suite(seed: int = 0, n_samples: int = 200) -> SuiteResult:
    """chi2 expert term per sample is >= -1/2 whatever the parameters."""
    rng = np.random.default_rng([seed, 18])
    m, k, d_o, d_s = 2, 3, 4, 3
    worst = 0.0
    for _ in range(n_samples // 20):
        qnet = LocalQNet(d_o, m, k, 8, rng, zero_last=False)
        for p in qnet.parameters():
            p.data *= rng.uniform(0.1, 20.0)
        model = MifqModel(qnet, HyperMixer(HyperNet(d_s, m, 4, 8, rng)), HyperMixer(HyperNet(d_s, m, 4, 8, rng)))
        expert = _random_batch(rng, 20, m, d_o, d_s, k)
        q = qnet.q_all(expert["obs"])
        r = inverse_bellman(ad.gather(q, expert["A"], axis=-1),
                            local_state_values(qnet, expert["obsn"]), expert["done"], 0.99)
        vals = chi2(model.mixer_r(-r, expert["S"])).data
        worst = max(worst, float((-0.5 - vals).max()))
    return SuiteResult("chi2 expert term lower bound", max(worst, 0.0), 0.0, n_samples)


SUITES = {
    "gradients": gradient_suite,
    "convexity": mixer_convexity_suite,
    "monotonicity": mixer_monotonicity_suite,
    "composite": composite_convexity_suite,
    "linear": linear_mixer_suite,
    "telescoping": telescoping_suite,
    "soft_vi": soft_vi_suite,
    "loss_bound": loss_bound_suite,
}


def run_all(seed: int = 0, names=None) -> list[SuiteResult]:
    return [SUITES[n](seed=seed) for n in (names or SUITES)]
