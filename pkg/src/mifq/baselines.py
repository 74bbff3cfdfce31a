"""Comparison methods: behavioral cloning, IIQ, IQVDN and MASQIL.

The three Q-based baselines reuse the shared Learner loop; BC is offline
maximum likelihood on per-agent (o_i, a_i) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam
from .envs import Env
from .errors import ConfigError
from .expert import DemonstrationSet
from .harness import MetricsRow, evaluate
from .ilcore import Learner, QPolicy, TrainConfig, _eval_seed, demo_arrays
from .nets import IndependentQNets

BASELINES = ("bc", "iiq", "iqvdn", "masqil")


def iiq_train(env: Env, demos: DemonstrationSet, config: TrainConfig):
    """Independent IQ-Learn: one network and one unmixed loss per agent."""
    learner = Learner(env, demos, config, "iiq")
    return learner, learner.train()


def iqvdn_train(env: Env, demos: DemonstrationSet, config: TrainConfig):
    """MIFQ with both mixers replaced by unweighted sums."""
    learner = Learner(env, demos, config, "iqvdn")
    return learner, learner.train()


def masqil_train(env: Env, demos: DemonstrationSet, config: TrainConfig):
    """Soft Q-learning on 0/1 expert-membership rewards through a hyper mixer."""
    learner = Learner(env, demos, config, "masqil")
    return learner, learner.train()


# ---- behavioral cloning ----------------------------------------------------------------
def nll(logits: ad.Tensor, actions: np.ndarray) -> ad.Tensor:
    """Mean negative log-likelihood of ``actions[B]`` under ``softmax(logits[B, k])``."""
    return -ad.mean(ad.gather(ad.log_softmax(logits, axis=-1), actions, axis=-1))


@dataclass
class BCResult:
    policy_net: IndependentQNets
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def policy(self, mode: str = "sample") -> QPolicy:
        return QPolicy(self.policy_net, mode)


class BCTrainer:
    """Per-agent softmax policies fitted by cross-entropy.

    ``full_batch=True`` takes one gradient step per epoch on the whole training
    split; otherwise each epoch is a shuffled pass in ``batch_size`` chunks.
    Training stops once validation NLL has not improved for ``bc_patience``
    epochs, and the best validation parameters are restored.
    """

    def __init__(self, obs: np.ndarray, actions: np.ndarray, n_actions: int,
                 config: TrainConfig, full_batch: bool = False, lr: float | None = None):
        cfg = config.validate()
        obs = np.asarray(obs, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.int64)
        if obs.ndim != 3 or actions.shape != obs.shape[:2]:
            raise ConfigError(f"BC expects obs[N, m, d] and actions[N, m], got {obs.shape}, {actions.shape}")
        if len(obs) == 0:
            raise ConfigError("demonstrations are empty")
        self.cfg = cfg
        self.full_batch = full_batch
        self.m, self.k = obs.shape[1], n_actions
        rng = np.random.default_rng([cfg.seed, 0])
        self.net = IndependentQNets(obs.shape[2], self.m, n_actions, cfg.hidden_dim, rng)
        self.opt = Adam(self.net.parameters(), lr=lr if lr is not None else cfg.lr_theta)
        self.shuffle_rng = np.random.default_rng([cfg.seed, 4])

        order = self.shuffle_rng.permutation(len(obs))
        n_val = int(round(cfg.bc_val_fraction * len(obs)))
        if n_val >= len(obs):
            n_val = 0
        val, tr = order[:n_val], order[n_val:]
        self.train_obs, self.train_act = obs[tr], actions[tr]
        self.val_obs, self.val_act = obs[val], actions[val]

    def loss(self, obs: np.ndarray, actions: np.ndarray) -> ad.Tensor:
        total = None
        for i in range(self.m):
            term = nll(self.net.agent_q(obs, i), actions[:, i])
            total = term if total is None else total + term
        return total

    def _epoch(self) -> float:
        n = len(self.train_obs)
        if self.full_batch:
            batches = [np.arange(n)]
        else:
            perm = self.shuffle_rng.permutation(n)
            batches = [perm[i:i + self.cfg.batch_size] for i in range(0, n, self.cfg.batch_size)]
        for idx in batches:
            self.opt.zero_grad()
            self.loss(self.train_obs[idx], self.train_act[idx]).backward()
            self.opt.step()
        return self.loss(self.train_obs, self.train_act).item()

    def fit(self) -> BCResult:
        result = BCResult(self.net)
        best, best_state, stale = np.inf, self.net.state_dict(), 0
        for epoch in range(1, self.cfg.bc_epochs + 1):
            result.train_loss.append(self._epoch())
            if len(self.val_obs) == 0:
                result.best_epoch = epoch
                continue
            v = self.loss(self.val_obs, self.val_act).item()
            result.val_loss.append(v)
            if v < best:
                best, best_state, stale = v, self.net.state_dict(), 0
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= self.cfg.bc_patience:
                    break
        if len(self.val_obs):
            self.net.load_state_dict(best_state)
        return result


def bc_fit(demos: DemonstrationSet, n_actions: int, config: TrainConfig,
           full_batch: bool = False, lr: float | None = None) -> BCResult:
    data = demos.arrays()
    return BCTrainer(data["obs"], data["A"].astype(np.int64), n_actions, config,
                     full_batch=full_batch, lr=lr).fit()


def bc_train(env: Env, demos: DemonstrationSet, config: TrainConfig,
             full_batch: bool = False) -> tuple[BCResult, list[MetricsRow]]:
    """Offline BC plus the common metrics rows (step counts epochs; BC never acts)."""
    demo_arrays(demos, env)
    k = env.spec.n_actions[0]
    if len(set(env.spec.n_actions)) != 1:
        raise ConfigError("agents with different action counts are not supported")
    cfg = config.validate()
    untrained = BCTrainer(demos.arrays()["obs"], demos.arrays()["A"].astype(np.int64), k,
                          cfg, full_batch=full_batch)
    rows = [_bc_row(untrained.net, env, cfg, 0, 0, 0.0, 0.0)]
    result = untrained.fit()
    final_train = result.train_loss[result.best_epoch - 1] if result.train_loss else 0.0
    final_val = result.val_loss[result.best_epoch - 1] if result.val_loss else 0.0
    rows.append(_bc_row(result.policy_net, env, cfg, max(len(result.train_loss), 1), 1,
                        final_train, final_val))
    return result, rows


def _bc_row(net, env, cfg: TrainConfig, step: int, index: int, train_loss: float,
            val_loss: float) -> MetricsRow:
    mean_ret, solve = evaluate(QPolicy(net, cfg.eval_mode), env, cfg.eval_episodes,
                               seed=_eval_seed(cfg.seed, index))
    return MetricsRow(step, cfg.seed, mean_ret, solve, train_loss, train_loss, val_loss, 0.0)


def run_algo(algo: str, env: Env, demos: DemonstrationSet, config: TrainConfig):
    """Dispatch by name; returns ``(trained object, metrics rows)``."""
    if algo == "bc":
        return bc_train(env, demos, config)
    if algo in ("mifq", "iiq", "iqvdn", "masqil"):
        learner = Learner(env, demos, config, algo)
        return learner, learner.train()
    raise ConfigError(f"unknown algo {algo!r}")


__all__ = ["BASELINES", "BCResult", "BCTrainer", "bc_fit", "bc_train", "iiq_train",
           "iqvdn_train", "masqil_train", "nll", "run_algo"]
