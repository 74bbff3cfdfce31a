"""Inverse factorized soft Q-learning: losses, replay, training loop, recovery.

Local soft Q-values are turned into per-agent state values (log-sum-exp over
actions) and rewards (inverse soft Bellman operator). Two monotone mixers
combine them into the joint quantities used by the objective

    J = E_expert[ phi(M_R(-R^Q)) ] + E_replay[ M_V(V^Q(S)) - gamma * M_V(V^Q(S')) ]

with phi the chi-square regularizer x + x^2 / 2.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, np_softmax
from .envs import Env, TabularModel
from .errors import ConfigError, IncompatibleDemosError, NotTabularError
from .expert import DemonstrationSet, Policy, episode_seed
from .harness import MetricsRow, evaluate
from .nets import (HyperMixer, HyperNet, IndependentQNets, LinearMixer, LocalQNet, Module,
                   SumMixer)

ALGOS = ("mifq", "iiq", "iqvdn", "masqil", "bc")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lr_theta: float = 5e-4
    lr_omega: float = 0.0
    batch_size: int = 128
    hidden_dim: int = 128
    mix_hidden: int = 32
    buffer_capacity: int = 5000
    target_sync: int = 4
    collect_steps: int = 1
    train_steps: int = 1
    max_steps: int = 5000
    warmup_steps: int = 128
    eval_every: int = 1000
    eval_episodes: int = 32
    eval_mode: str = "sample"
    seed: int = 0
    regularizer: str = "chi2"
    expert_reduction: str = "mean"
    use_target: bool = True
    value_on_expert: bool = False
    mixer: str = "hyper"
    mixer_input: str = "mean"
    mixer_init: str = "mean"
    mixer_offset: float = 50.0
    value_mixer_bias: bool = True
    bc_epochs: int = 200
    bc_val_fraction: float = 0.1
    bc_patience: int = 20
    record_wallclock: bool = False

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.lr_omega >= 0.0:
            raise ConfigError(f"lr_omega must be non-negative, got {self.lr_omega}")
        for name in ("lr_theta", "batch_size", "hidden_dim", "mix_hidden",
                     "buffer_capacity", "target_sync", "collect_steps", "train_steps",
                     "eval_every", "eval_episodes", "bc_epochs", "bc_patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("max_steps and warmup_steps must be non-negative")
        if not 0.0 <= self.bc_val_fraction < 1.0:
            raise ConfigError("bc_val_fraction must lie in [0, 1)")
        choices = {"eval_mode": ("sample", "greedy"), "regularizer": ("chi2", "none"),
                   "expert_reduction": ("mean", "sum"), "mixer": ("hyper", "sum", "identity"),
                   "mixer_input": ("mean", "sum"), "mixer_init": ("mean", "random")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---- replay ------------------------------------------------------------------------------
class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions, sampled uniformly with replacement."""

    def __init__(self, capacity: int, state_dim: int, n_agents: int, obs_dim: int,
                 rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.S = np.zeros((capacity, state_dim))
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.A = np.zeros((capacity, n_agents), dtype=np.int64)
        self.r = np.zeros(capacity)
        self.Sn = np.zeros((capacity, state_dim))
        self.obsn = np.zeros((capacity, n_agents, obs_dim))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, S, obs, A, r, Sn, obsn, done) -> None:
        i = self.cursor
        self.S[i], self.obs[i], self.A[i], self.r[i] = S, obs, A, r
        self.Sn[i], self.obsn[i], self.done[i] = Sn, obsn, float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def arrays(self) -> dict[str, np.ndarray]:
        n = self.size
        return {k: getattr(self, k)[:n] for k in ("S", "obs", "A", "r", "Sn", "obsn", "done")}

    def sample(self, batch_size: int) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = self.rng.integers(self.size, size=batch_size)
        return {k: getattr(self, k)[idx] for k in ("S", "obs", "A", "r", "Sn", "obsn", "done")}


def sample_arrays(data: dict[str, np.ndarray], batch_size: int, rng: np.random.Generator):
    idx = rng.integers(len(data["S"]), size=batch_size)
    return {k: v[idx] for k, v in data.items()}


# ---- loss building blocks ------------------------------------------------------------------
def local_state_values(qnet, obs) -> Tensor:
    """V_i(o_i) = logsumexp_a Q_i(o_i, a) for every agent: ``[B, m]``."""
    return ad.logsumexp(qnet.q_all(obs), axis=-1)


def inverse_bellman(q_taken, v_next, done, gamma: float) -> Tensor:
    """r_i = Q_i(o_i, a_i) - gamma * V_i(o_i'), the next-value term dropped at terminals."""
    q_taken = q_taken if isinstance(q_taken, Tensor) else Tensor(q_taken)
    cont = 1.0 - np.asarray(done, dtype=np.float64)
    if q_taken.ndim == 2:
        cont = cont.reshape(-1, 1)
    return q_taken - (gamma * cont) * v_next


def chi2(x):
    """phi(x) = x + x^2 / 2, bounded below by -1/2 at x = -1."""
    return x + 0.5 * (x * x)


def _phi(x, regularizer: str):
    return chi2(x) if regularizer == "chi2" else x


def _reduce(x: Tensor, how: str, weights=None) -> Tensor:
    if weights is not None:
        return ad.tsum(x * np.asarray(weights, dtype=np.float64))
    return ad.tsum(x) if how == "sum" else ad.mean(x)


@dataclass
class LossParts:
    total: Tensor
    expert_term: float
    value_term: float


@dataclass
class MifqModel:
    """Live networks plus the (possibly identical) networks used for next-state values."""

    qnet: object
    mixer_r: object
    mixer_v: object
    next_qnet: object = None
    next_mixer_v: object = None

    def __post_init__(self):
        if self.next_qnet is None:
            self.next_qnet = self.qnet
        if self.next_mixer_v is None:
            self.next_mixer_v = self.mixer_v


def _check_batch(batch: dict, name: str) -> None:
    if batch is None or len(batch["S"]) == 0:
        raise ValueError(f"{name} batch is empty")


def mifq_loss(expert: dict, replay: dict, model: MifqModel, gamma: float,
              regularizer: str = "chi2", expert_reduction: str = "mean",
              expert_weights=None, replay_weights=None) -> LossParts:
    """Mixed inverse soft-Q objective on one expert batch and one replay batch.

    Optional weights replace the empirical mean by a weighted sum (used for
    exact-expectation checks on tabular models).
    """
    _check_batch(expert, "expert")
    _check_batch(replay, "replay")
    q = model.qnet.q_all(expert["obs"])
    q_taken = ad.gather(q, expert["A"], axis=-1)
    v_next = local_state_values(model.next_qnet, expert["obsn"])
    r_local = inverse_bellman(q_taken, v_next, expert["done"], gamma)
    r_tot = model.mixer_r(-r_local, expert["S"])
    expert_term = _reduce(_phi(r_tot, regularizer), expert_reduction, expert_weights)

    v_tot = model.mixer_v(local_state_values(model.qnet, replay["obs"]), replay["S"])
    v_tot_next = model.next_mixer_v(local_state_values(model.next_qnet, replay["obsn"]),
                                    replay["Sn"])
    cont = 1.0 - np.asarray(replay["done"], dtype=np.float64)
    value_term = _reduce(v_tot - (gamma * cont) * v_tot_next, "mean", replay_weights)
    total = expert_term + value_term
    return LossParts(total, expert_term.item(), value_term.item())


def iiq_loss(expert: dict, replay: dict, qnet, agent: int, gamma: float,
             regularizer: str = "chi2", expert_reduction: str = "mean", next_qnet=None,
             expert_weights=None, replay_weights=None) -> LossParts:
    """Independent inverse soft-Q loss J_i for one agent on its (o_i, a_i) pairs."""
    _check_batch(expert, "expert")
    _check_batch(replay, "replay")
    next_qnet = qnet if next_qnet is None else next_qnet
    q = qnet.agent_q(expert["obs"], agent)
    q_taken = ad.gather(q, expert["A"][:, agent], axis=-1)
    v_next = ad.logsumexp(next_qnet.agent_q(expert["obsn"], agent), axis=-1)
    r = inverse_bellman(q_taken, v_next, expert["done"], gamma)
    expert_term = _reduce(_phi(-r, regularizer), expert_reduction, expert_weights)

    v = ad.logsumexp(qnet.agent_q(replay["obs"], agent), axis=-1)
    vn = ad.logsumexp(next_qnet.agent_q(replay["obsn"], agent), axis=-1)
    cont = 1.0 - np.asarray(replay["done"], dtype=np.float64)
    value_term = _reduce(v - (gamma * cont) * vn, "mean", replay_weights)
    return LossParts(expert_term + value_term, expert_term.item(), value_term.item())


# ---- exact occupancy identity ------------------------------------------------------------
def occupancy_measure(model: TabularModel, joint_probs: np.ndarray, gamma: float) -> np.ndarray:
    """rho(s, A) = (1 - gamma) * sum_t gamma^t Pr(S_t = s, A_t = A), episodes cut at terminals."""
    cont = np.where(model.terminal, 0.0, 1.0)
    M = np.einsum("sa,sa,sat->st", joint_probs, cont, model.P)
    visits = np.linalg.solve(np.eye(model.n_states) - gamma * M.T, model.init)
    return (1.0 - gamma) * visits[:, None] * joint_probs


def v0_telescope_check(model, joint_probs: np.ndarray, V: np.ndarray,
                       gamma: float) -> tuple[float, float]:
    """Both sides of (1-g) E[V(S0)] = E_rho[V(S) - g E V(S')], computed exactly."""
    if not isinstance(model, TabularModel):
        raise NotTabularError("the telescoping identity is evaluated on tabular models only")
    V = np.asarray(V, dtype=np.float64)
    rho = occupancy_measure(model, joint_probs, gamma)
    cont = np.where(model.terminal, 0.0, 1.0)
    lhs = (1.0 - gamma) * float(model.init @ V)
    rhs = float((rho * (V[:, None] - gamma * cont * (model.P @ V))).sum())
    return lhs, rhs


# ---- recovery ------------------------------------------------------------------------------
def recover_policy(qnet, obs, agent_id: int) -> np.ndarray:
    """pi_i(. | o_i) = softmax Q_i(o_i, .)."""
    obs = np.asarray(obs, dtype=np.float64)
    if hasattr(qnet, "forward"):
        q = qnet.forward(obs, agent_id).data
    else:
        q = qnet.agent_q(obs[None, None].repeat(qnet.n_agents, axis=1), agent_id).data[0]
    return np_softmax(q, axis=-1)


def recover_reward(qnet, transition, gamma: float) -> np.ndarray:
    """r_i = Q_i(o_i, a_i) - gamma * V_i(o_i') for every agent of one transition."""
    obs = np.asarray(transition.obs, dtype=np.float64)[None]
    obsn = np.asarray(transition.obsn, dtype=np.float64)[None]
    q = qnet.q_all(obs).data[0]
    q_taken = q[np.arange(q.shape[0]), np.asarray(transition.A)]
    v_next = ad.np_logsumexp(qnet.q_all(obsn).data[0], axis=-1)
    return inverse_bellman(Tensor(q_taken), Tensor(v_next), transition.done, gamma).data


# ---- acting ------------------------------------------------------------------------------
class QPolicy(Policy):
    """Decentralized execution: each agent samples from softmax Q_i(o_i, .) (or argmax)."""

    def __init__(self, qnet, mode: str = "sample"):
        self.qnet = qnet
        self.mode = mode

    def act(self, S, obs, rng):
        obs = np.asarray(obs, dtype=np.float64)
        if hasattr(self.qnet, "q_values"):
            q = self.qnet.q_values(obs)
        else:
            q = self.qnet.q_all(obs[None]).data[0]
        if self.mode == "greedy":
            return q.argmax(axis=-1)
        p = np_softmax(q, axis=-1)
        u = rng.random(len(p))
        cdf = np.cumsum(p, axis=-1)
        return np.minimum((cdf < u[:, None]).sum(axis=-1), p.shape[-1] - 1)


def demo_arrays(demos: DemonstrationSet, env: Env) -> dict[str, np.ndarray]:
    if demos.env_hash != env.spec.hash():
        raise IncompatibleDemosError(
            f"demonstrations were recorded on env {demos.env_hash}, not {env.spec.hash()}")
    return demos.arrays()


# ---- training ----------------------------------------------------------------------------
class Learner:
    """Algorithm-agnostic collect/train/evaluate loop for the Q-based imitators.

    ``algo`` selects the network layout and loss:
      mifq   shared Q net, hyper-network mixers (or sum/identity via config.mixer)
      iqvdn  shared Q net, sum mixers
      iiq    one Q net per agent, losses summed without mixing
      masqil shared Q net, one hyper mixer, TD loss on 0/1 expert-membership rewards
    """

    def __init__(self, env: Env, demos: DemonstrationSet, config: TrainConfig, algo: str = "mifq"):
        if algo not in ("mifq", "iiq", "iqvdn", "masqil"):
            raise ConfigError(f"Learner does not handle algo {algo!r}")
        self.config = config.validate()
        self.env = env
        self.algo = algo
        spec = env.spec
        if len(set(spec.n_actions)) != 1:
            raise ConfigError("agents with different action counts are not supported")
        self.m, self.k = spec.n_agents, spec.n_actions[0]
        self.expert = demo_arrays(demos, env)
        if algo != "masqil" and len(self.expert["S"]) == 0:
            raise ConfigError("demonstrations are empty")

        seed = config.seed
        init_rng = np.random.default_rng([seed, 0])
        h = config.hidden_dim
        if algo == "iiq":
            self.qnet = IndependentQNets(spec.obs_dim, self.m, self.k, h, init_rng)
        else:
            self.qnet = LocalQNet(spec.obs_dim, self.m, self.k, h, init_rng)

        self.mixers: dict[str, Module] = {}
        mixer_kind = "sum" if algo == "iqvdn" else config.mixer
        names = {"mifq": ("R", "V"), "iqvdn": ("R", "V"), "masqil": ("Q",), "iiq": ()}[algo]
        for name in names:
            if mixer_kind == "hyper":
                hyper = HyperNet(spec.state_dim, self.m, config.mix_hidden, h, init_rng)
                if config.mixer_init == "mean":
                    hyper.init_mean(config.mixer_offset)
                scale = 1.0 / self.m if config.mixer_input == "mean" else 1.0
                self.mixers[name] = HyperMixer(hyper, final_bias=(name != "V" or config.value_mixer_bias),
                                               input_scale=scale)
            elif mixer_kind == "sum":
                self.mixers[name] = SumMixer()
            else:
                self.mixers[name] = LinearMixer(np.ones(self.m))

        self.target_qnet = self.qnet.copy()
        self.target_mixers = {n: mx.copy() for n, mx in self.mixers.items()}
        self.opt_theta = Adam(self.qnet.parameters(), lr=config.lr_theta)
        omega = [p for mx in self.mixers.values() for p in mx.parameters()]
        # lr_omega = 0 holds the mixers at their initialization
        self.opt_omega = Adam(omega, lr=config.lr_omega) if omega and config.lr_omega > 0 else None

        self.buffer = ReplayBuffer(config.buffer_capacity, spec.state_dim, self.m, spec.obs_dim,
                                   np.random.default_rng([seed, 1]))
        self.expert_rng = np.random.default_rng([seed, 2])
        self.act_rng = np.random.default_rng([seed, 3])
        self.episode = 0
        self.env_steps = 0
        self.train_steps_done = 0
        self.loss_trace: list[float] = []
        self._pending: list[tuple[float, float, float]] = []
        self._S = self._obs = None
        self._membership = None
        if algo == "masqil":
            self._membership = {_sa_key(s, a) for s, a in zip(self.expert["S"], self.expert["A"])}

    # -- parameters
    def named_parameters(self):
        yield from self.qnet.named_parameters("theta.")
        for name, mx in self.mixers.items():
            yield from mx.named_parameters(f"omega_{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def sync_targets(self) -> None:
        self.target_qnet.sync_from(self.qnet)
        for n, mx in self.mixers.items():
            self.target_mixers[n].sync_from(mx)

    def policy(self, mode: str | None = None) -> QPolicy:
        return QPolicy(self.qnet, mode or self.config.eval_mode)

    # -- losses
    def _next_nets(self):
        if self.config.use_target:
            return self.target_qnet, self.target_mixers
        return self.qnet, self.mixers

    def compute_loss(self, expert: dict, replay: dict) -> LossParts:
        cfg = self.config
        next_q, next_mixers = self._next_nets()
        if self.algo in ("mifq", "iqvdn"):
            if cfg.value_on_expert:
                replay = {k: np.concatenate([replay[k], expert[k]]) for k in replay}
            model = MifqModel(self.qnet, self.mixers["R"], self.mixers["V"], next_q, next_mixers["V"])
            return mifq_loss(expert, replay, model, cfg.gamma, cfg.regularizer, cfg.expert_reduction)
        if self.algo == "iiq":
            if cfg.value_on_expert:
                replay = {k: np.concatenate([replay[k], expert[k]]) for k in replay}
            parts = [iiq_loss(expert, replay, self.qnet, i, cfg.gamma, cfg.regularizer,
                              cfg.expert_reduction, next_q) for i in range(self.m)]
            total = parts[0].total
            for p in parts[1:]:
                total = total + p.total
            return LossParts(total, sum(p.expert_term for p in parts),
                             sum(p.value_term for p in parts))
        return self._masqil_loss(expert, replay, next_q, next_mixers["Q"])

    def synthetic_rewards(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        return np.array([1.0 if _sa_key(s, a) in self._membership else 0.0 for s, a in zip(S, A)])

    def _masqil_loss(self, expert, replay, next_q, next_mixer) -> LossParts:
        gamma = self.config.gamma
        halves = [b for b in (expert, replay) if b is not None and len(b["S"])]
        errs = []
        for b in halves:
            q_tot = self.mixers["Q"](ad.gather(self.qnet.q_all(b["obs"]), b["A"], axis=-1), b["S"])
            v_next = next_mixer(local_state_values(next_q, b["obsn"]), b["Sn"]).data
            y = self.synthetic_rewards(b["S"], b["A"]) + gamma * (1.0 - b["done"]) * v_next
            errs.append(ad.mean((q_tot - y) ** 2) * (1.0 / len(halves)))
        total = errs[0] if len(errs) == 1 else errs[0] + errs[1]
        if len(halves) == 2:
            return LossParts(total, errs[0].item(), errs[1].item())
        return LossParts(total, 0.0, errs[0].item())

    # -- loop pieces
    def collect_step(self, policy: QPolicy) -> None:
        if self._S is None:
            self._S, self._obs = self.env.reset(episode_seed(self.config.seed * 1_000_003 + 17,
                                                             self.episode))
        A = policy.act(self._S, self._obs, self.act_rng)
        Sn, obsn, r, done = self.env.step(A)
        self.buffer.add(self._S, self._obs, A, r, Sn, obsn, done)
        self.env_steps += 1
        if done:
            self.episode += 1
            self._S = self._obs = None
        else:
            self._S, self._obs = Sn, obsn

    def update(self) -> LossParts:
        cfg = self.config
        replay = self.buffer.sample(cfg.batch_size)
        expert = (sample_arrays(self.expert, cfg.batch_size, self.expert_rng)
                  if len(self.expert["S"]) else None)
        self.opt_theta.zero_grad()
        if self.opt_omega is not None:
            self.opt_omega.zero_grad()
        parts = self.compute_loss(expert, replay)
        parts.total.backward()
        self.opt_theta.step()
        if self.opt_omega is not None:
            self.opt_omega.step()
        self.train_steps_done += 1
        if self.train_steps_done % cfg.target_sync == 0:
            self.sync_targets()
        self.loss_trace.append(parts.total.item())
        self._pending.append((parts.total.item(), parts.expert_term, parts.value_term))
        return parts

    def _eval_row(self, t0: float, eval_index: int) -> MetricsRow:
        cfg = self.config
        mean_ret, solve = evaluate(self.policy(), self.env, cfg.eval_episodes,
                                   seed=_eval_seed(cfg.seed, eval_index))
        losses = np.mean(self._pending, axis=0) if self._pending else np.zeros(3)
        self._pending = []
        wall = time.perf_counter() - t0 if cfg.record_wallclock else 0.0
        return MetricsRow(self.env_steps, cfg.seed, mean_ret, solve, float(losses[0]),
                          float(losses[1]), float(losses[2]), wall)

    def train(self, callback=None) -> list[MetricsRow]:
        """Run Algorithm-1 style loops until ``max_steps`` environment steps."""
        cfg = self.config
        t0 = time.perf_counter()
        rows = [self._eval_row(t0, 0)]
        if callback:
            callback(rows[-1])
        policy = self.policy("sample")
        next_eval = cfg.eval_every
        while self.env_steps < cfg.max_steps:
            for _ in range(cfg.collect_steps):
                if self.env_steps >= cfg.max_steps:
                    break
                self.collect_step(policy)
            if len(self.buffer) >= max(cfg.warmup_steps, 1):
                for _ in range(cfg.train_steps):
                    self.update()
            if self.env_steps >= next_eval or self.env_steps >= cfg.max_steps:
                rows.append(self._eval_row(t0, len(rows)))
                if callback:
                    callback(rows[-1])
                while next_eval <= self.env_steps:
                    next_eval += cfg.eval_every
        return rows


def _sa_key(S, A) -> bytes:
    return np.round(np.asarray(S, dtype=np.float64), 8).tobytes() + np.asarray(A, np.int64).tobytes()


def _eval_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 5, index]).generate_state(1)[0])


def train(env: Env, demos: DemonstrationSet, config: TrainConfig, algo: str = "mifq"):
    """Build a learner, run it, and return ``(learner, metrics rows)``."""
    learner = Learner(env, demos, config, algo)
    rows = learner.train()
    return learner, rows
