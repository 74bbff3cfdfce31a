"""Expert policies and demonstration datasets.

Tabular environments get an exact soft-optimal expert from soft value
iteration; grid environments use scripted heuristics. Demonstrations are
stored as line-delimited JSON (one header line, then one line per
transition) with floats written to 17 significant digits.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import np_logsumexp, np_softmax
from .envs import Env, MinerLite, SpreadLite, TabularModel, Transition, TwoStepTeam, enumerate_model
from .errors import ConvergenceError, FormatError, IncompatibleDemosError
from .serialization import dumps17

DEMO_VERSION = 1
TRANSITION_KEYS = ("ep", "t", "S", "obs", "A", "r", "Sn", "obsn", "done")


# ---- soft value iteration --------------------------------------------------------------
@dataclass
class TabularSoftQ:
    Q: np.ndarray
    gamma: float
    iterations: int
    residuals: list = field(default_factory=list)

    @property
    def V(self) -> np.ndarray:
        return np_logsumexp(self.Q, axis=1)


def soft_bellman(model: TabularModel, Q: np.ndarray, gamma: float) -> np.ndarray:
    """(T Q)(s, A) = R(s, A) + gamma * E_{s'}[logsumexp Q(s', .)], zero past terminals."""
    V = np_logsumexp(Q, axis=1)
    cont = np.where(model.terminal, 0.0, 1.0)
    return model.R + gamma * cont * (model.P @ V)


def soft_value_iteration(model: TabularModel, gamma: float | None = None, tol: float = 1e-8,
                         max_iters: int = 10_000) -> TabularSoftQ:
    """Iterate the soft Bellman operator from Q = 0 until the sup-norm update is <= tol."""
    gamma = model.gamma if gamma is None else gamma
    Q = np.zeros_like(model.R, dtype=np.float64)
    residuals = []
    for it in range(1, max_iters + 1):
        new = soft_bellman(model, Q, gamma)
        res = float(np.max(np.abs(new - Q)))
        residuals.append(res)
        Q = new
        if res <= tol:
            return TabularSoftQ(Q, gamma, it, residuals)
    raise ConvergenceError(
        f"soft value iteration did not converge in {max_iters} sweeps (residual {residuals[-1]:.3e})",
        residuals[-1], max_iters)


def bellman_residual(model: TabularModel, soft_q: TabularSoftQ) -> float:
    return float(np.max(np.abs(soft_bellman(model, soft_q.Q, soft_q.gamma) - soft_q.Q)))


# ---- policies ----------------------------------------------------------------------------
class Policy:
    """``act(S, obs, rng) -> joint action array``."""

    def act(self, S, obs, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class RandomPolicy(Policy):
    def __init__(self, n_agents: int, n_actions: int):
        self.n_agents, self.n_actions = n_agents, n_actions

    def act(self, S, obs, rng):
        return rng.integers(self.n_actions, size=self.n_agents)


class TabularJointPolicy(Policy):
    """Samples a joint action from ``probs[s, A]``; the state index is argmax of one-hot S."""

    def __init__(self, probs: np.ndarray, model: TabularModel):
        self.probs = probs
        self.model = model

    def act(self, S, obs, rng):
        p = self.probs[int(np.argmax(S))]
        A = int(rng.choice(len(p), p=p))
        return self.model.joint_actions(A)


def expert_policy(soft_q: TabularSoftQ, model: TabularModel) -> TabularJointPolicy:
    """Joint softmax policy exp(Q(S, A)) / Z_S."""
    return TabularJointPolicy(np_softmax(soft_q.Q, axis=1), model)


def _step_toward(pos, target) -> int:
    dr, dc = int(target[0] - pos[0]), int(target[1] - pos[1])
    if dr == 0 and dc == 0:
        return 0
    if abs(dr) >= abs(dc):
        return 2 if dr > 0 else 1
    return 4 if dc > 0 else 3


class SpreadExpert(Policy):
    """Each agent walks greedily to its designated landmark and stays there."""

    def __init__(self, env: SpreadLite):
        self.m, self.grid = env.n_agents, env.grid

    def act(self, S, obs, rng):
        pos = np.rint(np.asarray(S) * (self.grid - 1)).astype(np.int64)
        agents = pos[:2 * self.m].reshape(self.m, 2)
        landmarks = pos[2 * self.m:].reshape(self.m, 2)
        return np.array([_step_toward(agents[i], landmarks[i]) for i in range(self.m)])


class MinerExpert(Policy):
    """Each miner heads for the nearest gold pile; the second avoids the first's target."""

    def __init__(self, env: MinerLite):
        self.grid = env.grid

    def act(self, S, obs, rng):
        g = self.grid
        S = np.asarray(S)
        agents = np.rint(S[:4] * (g - 1)).astype(np.int64).reshape(2, 2)
        caps = S[4:6]
        gold = S[6:].reshape(g, g)
        piles = np.argwhere(gold > 1e-9)
        actions, taken = [], None
        for i in range(2):
            if caps[i] <= 1e-9 or len(piles) == 0:
                actions.append(0)
                continue
            cand = piles
            if taken is not None and len(piles) > 1:
                cand = piles[np.any(piles != taken, axis=1)]
            d = np.abs(cand - agents[i]).sum(axis=1)
            target = cand[int(np.argmin(d))]  # argwhere order breaks ties row-major
            taken = target
            actions.append(_step_toward(agents[i], target))
        return np.array(actions)


def scripted_expert(env: Env) -> Policy:
    if isinstance(env, SpreadLite):
        return SpreadExpert(env)
    if isinstance(env, MinerLite):
        return MinerExpert(env)
    if isinstance(env, TwoStepTeam):
        return expert_policy(soft_value_iteration(enumerate_model(env)), enumerate_model(env))
    raise TypeError(f"no scripted expert for {type(env).__name__}")


def make_expert(env: Env) -> tuple[Policy, str]:
    if isinstance(env, TwoStepTeam):
        model = enumerate_model(env)
        return expert_policy(soft_value_iteration(model), model), "soft_value_iteration"
    return scripted_expert(env), f"scripted_{env.spec.kind}"


# ---- exact evaluation on tabular models -----------------------------------------------------
def joint_from_local(local_probs: list[np.ndarray], model: TabularModel) -> np.ndarray:
    """Product policy ``prod_i pi_i(a_i | s)`` as a joint table ``[s, A]``."""
    joint = np.ones((model.n_states, model.n_joint))
    for A in range(model.n_joint):
        for i, a in enumerate(model.joint_actions(A)):
            joint[:, A] *= local_probs[i][:, a]
    return joint


def exact_return(model: TabularModel, joint_probs: np.ndarray, discount: float = 1.0) -> float:
    """Expected episode return by forward enumeration over the model's horizon."""
    if model.horizon is None:
        raise ValueError("exact_return needs a finite-horizon model")
    dist = model.init.astype(np.float64).copy()
    total = 0.0
    for t in range(model.horizon):
        sa = dist[:, None] * joint_probs
        total += discount ** t * float((sa * model.R).sum())
        cont = sa * np.where(model.terminal, 0.0, 1.0)
        dist = np.einsum("sa,sat->t", cont, model.P)
    return total


# ---- demonstrations ------------------------------------------------------------------------
@dataclass
class DemonstrationSet:
    trajectories: list
    env_hash: str
    seed: int
    expert: str
    env_spec: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def returns(self) -> np.ndarray:
        return np.array([sum(tr.r for tr in traj) for traj in self.trajectories])

    def subset(self, n: int) -> "DemonstrationSet":
        return DemonstrationSet(self.trajectories[:n], self.env_hash, self.seed, self.expert,
                                self.env_spec)

    def arrays(self) -> dict[str, np.ndarray]:
        flat = [tr for traj in self.trajectories for tr in traj]
        return {
            "S": np.array([tr.S for tr in flat], dtype=np.float64),
            "obs": np.array([tr.obs for tr in flat], dtype=np.float64),
            "A": np.array([tr.A for tr in flat], dtype=np.int64),
            "r": np.array([tr.r for tr in flat], dtype=np.float64),
            "Sn": np.array([tr.Sn for tr in flat], dtype=np.float64),
            "obsn": np.array([tr.obsn for tr in flat], dtype=np.float64),
            "done": np.array([tr.done for tr in flat], dtype=np.float64),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, DemonstrationSet):
            return NotImplemented
        if (self.env_hash, self.seed, self.expert, self.count) != (
                other.env_hash, other.seed, other.expert, other.count):
            return False
        for ta, tb in zip(self.trajectories, other.trajectories):
            if len(ta) != len(tb):
                return False
            for a, b in zip(ta, tb):
                if not (np.array_equal(a.S, b.S) and np.array_equal(a.obs, b.obs)
                        and np.array_equal(a.A, b.A) and a.r == b.r
                        and np.array_equal(a.Sn, b.Sn) and np.array_equal(a.obsn, b.obsn)
                        and a.done == b.done):
                    return False
        return True


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def run_episode(policy: Policy, env: Env, seed: int, rng: np.random.Generator) -> list[Transition]:
    S, obs = env.reset(seed)
    traj = []
    done = False
    while not done:
        A = np.asarray(policy.act(S, obs, rng), dtype=np.int64)
        Sn, obsn, r, done = env.step(A)
        traj.append(Transition(S, obs, A, float(r), Sn, obsn, bool(done)))
        S, obs = Sn, obsn
    return traj


def collect_demonstrations(policy: Policy, env: Env, n_episodes: int, seed: int,
                           expert: str = "expert") -> DemonstrationSet:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    trajs = []
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, ep, 1])
        trajs.append(run_episode(policy, env, episode_seed(seed, ep), rng))
    return DemonstrationSet(trajs, env.spec.hash(), seed, expert, env.spec.to_dict())


def _vec(x):
    return np.asarray(x, dtype=np.float64).tolist()


def save_demos(demos: DemonstrationSet, path) -> None:
    header = {"version": DEMO_VERSION, "env": demos.env_hash, "episodes": demos.count,
              "seed": demos.seed, "expert": demos.expert, "transitions": demos.n_transitions,
              "spec": demos.env_spec}
    lines = [dumps17(header)]
    for ep, traj in enumerate(demos.trajectories):
        for t, tr in enumerate(traj):
            lines.append(dumps17({
                "ep": ep, "t": t, "S": _vec(tr.S), "obs": _vec(tr.obs),
                "A": [int(a) for a in tr.A], "r": float(tr.r), "Sn": _vec(tr.Sn),
                "obsn": _vec(tr.obsn), "done": bool(tr.done)}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_demos(path, env: Env | None = None) -> DemonstrationSet:
    """Read a demonstration file; with ``env`` given, its spec hash must match."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty demonstration file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed header ({exc.msg})", line=1) from None
    if not isinstance(header, dict) or header.get("version") != DEMO_VERSION:
        raise FormatError(f"unsupported demonstration header {lines[0][:80]!r}", line=1)
    for key in ("env", "episodes"):
        if key not in header:
            raise FormatError(f"header lacks {key!r}", line=1)
    if env is not None and header["env"] != env.spec.hash():
        raise IncompatibleDemosError(
            f"{path}: recorded on env {header['env']}, target env is {env.spec.hash()}")

    trajs: list[list[Transition]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed transition ({exc.msg})", line=lineno) from None
        if not isinstance(rec, dict) or any(k not in rec for k in TRANSITION_KEYS):
            raise FormatError("transition record is missing keys", line=lineno)
        ep, t = rec["ep"], rec["t"]
        if ep == len(trajs) and t == 0 and (not trajs or trajs[-1][-1].done):
            trajs.append([])
        elif not (trajs and ep == len(trajs) - 1 and t == len(trajs[-1])):
            raise FormatError(f"out-of-order transition ep={ep} t={t}", line=lineno)
        elif trajs[-1][-1].done:
            raise FormatError(f"transition after episode {ep} ended", line=lineno)
        r = float(rec["r"])
        if not math.isfinite(r):
            raise FormatError("non-finite reward", line=lineno)
        trajs[-1].append(Transition(
            np.asarray(rec["S"], dtype=np.float64), np.asarray(rec["obs"], dtype=np.float64),
            np.asarray(rec["A"], dtype=np.int64), r, np.asarray(rec["Sn"], dtype=np.float64),
            np.asarray(rec["obsn"], dtype=np.float64), bool(rec["done"])))

    if trajs and not trajs[-1][-1].done:
        raise FormatError(f"episode {len(trajs) - 1} does not terminate (truncated file?)",
                          line=len(lines))
    if len(trajs) != header["episodes"]:
        raise FormatError(
            f"header announces {header['episodes']} episodes but the file holds {len(trajs)}")
    return DemonstrationSet(trajs, header["env"], header.get("seed", 0),
                            header.get("expert", ""), header.get("spec", {}))


def episode_returns(policy: Policy, env: Env, n_episodes: int, seed: int) -> np.ndarray:
    """Per-episode returns of ``policy`` (helper for expert-quality checks)."""
    out = []
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, ep, 1])
        out.append(sum(tr.r for tr in run_episode(policy, env, episode_seed(seed, ep), rng)))
    return np.array(out)
