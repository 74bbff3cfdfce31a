"""Desk-scale cooperative Dec-POMDPs with a shared team reward.

Every environment exposes ``reset(seed) -> (S, obs)`` and
``step(actions) -> (S', obs', r, done)`` where ``S`` is the global state
vector, ``obs`` is an ``[m, d_o]`` array of local observations and ``r`` is
the single reward shared by all agents.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EnvError, NotTabularError

# stay, up, down, left, right as (d_row, d_col)
MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1]])


@dataclass(frozen=True)
class DecPomdpSpec:
    kind: str
    n_agents: int
    state_dim: int
    obs_dim: int
    n_actions: tuple
    horizon: int
    gamma: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigError("an environment needs at least one agent")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_actions"] = list(self.n_actions)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Transition:
    S: np.ndarray
    obs: np.ndarray
    A: np.ndarray
    r: float
    Sn: np.ndarray
    obsn: np.ndarray
    done: bool


class Env:
    spec: DecPomdpSpec

    def __init__(self):
        self.t = 0
        self.done = True

    @property
    def n_agents(self) -> int:
        return self.spec.n_agents

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions[0]

    def _check_actions(self, actions) -> np.ndarray:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset() first")
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        if actions.shape != (self.n_agents,):
            raise EnvError(f"expected {self.n_agents} actions, got {actions.shape}")
        for i, a in enumerate(actions):
            if not 0 <= a < self.spec.n_actions[i]:
                raise EnvError(f"agent {i}: invalid action index {a}")
        return actions

    def _advance(self) -> bool:
        self.t += 1
        return self.t >= self.spec.horizon

    def solved(self) -> bool:
        return False


class SpreadLite(Env):
    """m agents cover m landmarks on a g x g grid.

    Agents only observe their own position and landmark offsets. Agent ``i``'s
    designated landmark is landmark ``i``, and its offsets are listed starting
    from that landmark (landmarks ``i, i+1, ...`` cyclically) so observations
    are agent-centric.
    """

    def __init__(self, n_agents: int = 3, grid: int = 5, horizon: int = 25, gamma: float = 0.99):
        super().__init__()
        if grid < 2:
            raise ConfigError("grid must be at least 2x2")
        if n_agents > grid * grid:
            raise ConfigError("more agents than grid cells")
        self.grid = grid
        self.spec = DecPomdpSpec("spread", n_agents, 4 * n_agents, 2 + 2 * n_agents,
                                 (5,) * n_agents, horizon, gamma,
                                 {"n_agents": n_agents, "grid": grid})
        self.agents = np.zeros((n_agents, 2), dtype=np.int64)
        self.landmarks = np.zeros((n_agents, 2), dtype=np.int64)

    def _cells(self, rng, n):
        flat = rng.choice(self.grid * self.grid, size=n, replace=False)
        return np.stack([flat // self.grid, flat % self.grid], axis=1)

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        self.agents = self._cells(rng, self.n_agents)
        self.landmarks = self._cells(rng, self.n_agents)
        self.t, self.done = 0, False
        return self.state(), self.observations()

    def set_layout(self, agents, landmarks):
        self.agents = np.asarray(agents, dtype=np.int64).copy()
        self.landmarks = np.asarray(landmarks, dtype=np.int64).copy()
        self.t, self.done = 0, False

    def state(self) -> np.ndarray:
        scale = self.grid - 1
        return np.concatenate([self.agents.reshape(-1), self.landmarks.reshape(-1)]) / scale

    def observations(self) -> np.ndarray:
        scale = self.grid - 1
        rows = []
        for i, pos in enumerate(self.agents):
            offsets = np.roll(self.landmarks, -i, axis=0) - pos
            rows.append(np.concatenate([pos, offsets.reshape(-1)]) / scale)
        return np.array(rows)

    def reward(self) -> float:
        dist = np.abs(self.landmarks[:, None, :] - self.agents[None, :, :]).sum(axis=2)
        cover = dist.min(axis=1).sum()
        collisions = sum(1 for i, j in itertools.combinations(range(self.n_agents), 2)
                         if np.array_equal(self.agents[i], self.agents[j]))
        return float(-cover - collisions)

    def step(self, actions):
        actions = self._check_actions(actions)
        self.agents = np.clip(self.agents + MOVES[actions], 0, self.grid - 1)
        r = self.reward()
        self.done = self._advance()
        return self.state(), self.observations(), r, self.done

    def solved(self) -> bool:
        occupied = {tuple(p) for p in self.agents}
        return all(tuple(l) in occupied for l in self.landmarks)


class MinerLite(Env):
    """Two cooperative miners collecting gold piles of integer value."""

    def __init__(self, grid: int = 7, n_piles: int = 6, max_value: int = 5,
                 capacity: int = 20, horizon: int = 50, gamma: float = 0.99):
        super().__init__()
        if n_piles > grid * grid:
            raise ConfigError("more gold piles than grid cells")
        self.grid, self.n_piles, self.max_value, self.capacity = grid, n_piles, max_value, capacity
        n = 2
        self.spec = DecPomdpSpec("miner", n, 2 * n + n + grid * grid, 2 + 9 + 1, (5,) * n,
                                 horizon, gamma,
                                 {"grid": grid, "n_piles": n_piles, "max_value": max_value,
                                  "capacity": capacity})
        self.gold = np.zeros((grid, grid), dtype=np.int64)
        self.agents = np.zeros((n, 2), dtype=np.int64)
        self.cap = np.full(n, capacity, dtype=np.int64)

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        g = self.grid
        cells = rng.choice(g * g, size=self.n_piles + 2, replace=False)
        self.gold = np.zeros((g, g), dtype=np.int64)
        values = rng.integers(1, self.max_value + 1, size=self.n_piles)
        for c, v in zip(cells[:self.n_piles], values):
            self.gold[c // g, c % g] = v
        starts = cells[self.n_piles:]
        self.agents = np.stack([starts // g, starts % g], axis=1)
        self.cap = np.full(2, self.capacity, dtype=np.int64)
        self.t, self.done = 0, False
        return self.state(), self.observations()

    def set_layout(self, agents, gold):
        self.agents = np.asarray(agents, dtype=np.int64).copy()
        self.gold = np.asarray(gold, dtype=np.int64).copy()
        self.cap = np.full(2, self.capacity, dtype=np.int64)
        self.t, self.done = 0, False

    def state(self) -> np.ndarray:
        return np.concatenate([self.agents.reshape(-1) / (self.grid - 1),
                               self.cap / self.capacity,
                               self.gold.reshape(-1) / self.max_value])

    def observations(self) -> np.ndarray:
        padded = np.pad(self.gold, 1)
        rows = []
        for i, (r, c) in enumerate(self.agents):
            window = padded[r:r + 3, c:c + 3].reshape(-1) / self.max_value
            rows.append(np.concatenate([[r / (self.grid - 1), c / (self.grid - 1)], window,
                                        [self.cap[i] / self.capacity]]))
        return np.array(rows)

    def step(self, actions):
        actions = self._check_actions(actions)
        self.agents = np.clip(self.agents + MOVES[actions], 0, self.grid - 1)
        r = 0
        for i, (row, col) in enumerate(self.agents):
            take = min(self.gold[row, col], self.cap[i])
            self.gold[row, col] -= take
            self.cap[i] -= take
            r += take
        self.done = self._advance() or self.solved() or not self.cap.any()
        return self.state(), self.observations(), float(r), self.done

    def solved(self) -> bool:
        return not self.gold.any()


@dataclass
class TabularModel:
    """Exact model: ``P[s, A, s']``, ``R[s, A]``, ``terminal[s, A]``, ``init[s]``.

    Joint actions are indexed agent-0-major: ``A = a_0 * k + a_1`` for two agents.
    A terminal transition ends the episode; its row of P is a formality.
    """

    P: np.ndarray
    R: np.ndarray
    terminal: np.ndarray
    init: np.ndarray
    gamma: float
    n_agents: int
    n_actions: int
    horizon: int | None = None

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_joint(self) -> int:
        return self.P.shape[1]

    def joint_index(self, actions) -> int:
        idx = 0
        for a in actions:
            idx = idx * self.n_actions + int(a)
        return idx

    def joint_actions(self, index: int) -> np.ndarray:
        out = []
        for _ in range(self.n_agents):
            out.append(index % self.n_actions)
            index //= self.n_actions
        return np.array(out[::-1])


class TwoStepTeam(Env):
    """Two-step cooperative matrix game with three states.

    From s0 agent 0's action picks the branch (s1 if 0, s2 if 1), optionally
    flipped with probability ``slip``. s1 pays 7 for any joint action; s2 pays
    the coordination matrix [[0, 1], [1, 8]]. The second step ends the episode.
    """

    PAYOFF = np.array([[0.0, 1.0], [1.0, 8.0]])
    SAFE = 7.0

    def __init__(self, gamma: float = 0.99, slip: float = 0.0):
        super().__init__()
        if not 0.0 <= slip < 1.0:
            raise ConfigError("slip must lie in [0, 1)")
        self.slip = slip
        self.spec = DecPomdpSpec("two_step", 2, 3, 3, (2, 2), 2, gamma, {"slip": slip})
        self.s = 0
        self.ret = 0.0
        self.rng = np.random.default_rng(0)

    def reset(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.s, self.t, self.done, self.ret = 0, 0, False, 0.0
        return self.state(), self.observations()

    def set_state(self, s: int):
        self.s = int(s)
        self.t = 0 if s == 0 else 1
        self.done = False
        self.ret = 0.0

    def state(self) -> np.ndarray:
        return np.eye(3)[self.s]

    def observations(self) -> np.ndarray:
        return np.stack([np.eye(3)[self.s]] * 2)

    def step(self, actions):
        a = self._check_actions(actions)
        if self.s == 0:
            nxt = 1 if a[0] == 0 else 2
            if self.slip > 0.0 and self.rng.random() < self.slip:
                nxt = 3 - nxt
            r = 0.0
            self.s = nxt
        else:
            r = self.SAFE if self.s == 1 else float(self.PAYOFF[a[0], a[1]])
        self.ret += r
        self.done = self._advance()
        return self.state(), self.observations(), r, self.done

    def solved(self) -> bool:
        return self.ret >= float(self.PAYOFF.max())


def enumerate_model(env: Env) -> TabularModel:
    if not isinstance(env, TwoStepTeam):
        raise NotTabularError(f"{type(env).__name__} has no enumerable tabular model")
    P = np.zeros((3, 4, 3))
    R = np.zeros((3, 4))
    terminal = np.zeros((3, 4), dtype=bool)
    for A in range(4):
        a0, a1 = divmod(A, 2)
        branch = 1 if a0 == 0 else 2
        P[0, A, branch] += 1.0 - env.slip
        P[0, A, 3 - branch] += env.slip
        for s in (1, 2):
            P[s, A, s] = 1.0
            terminal[s, A] = True
        R[1, A] = env.SAFE
        R[2, A] = env.PAYOFF[a0, a1]
    return TabularModel(P, R, terminal, np.array([1.0, 0.0, 0.0]), env.spec.gamma, 2, 2,
                        horizon=env.spec.horizon)


ENV_IDS = {"spread": SpreadLite, "miner": MinerLite, "two_step": TwoStepTeam}


def make_env(env_id: str, **params) -> Env:
    try:
        cls = ENV_IDS[env_id]
    except KeyError:
        raise ConfigError(f"unknown env {env_id!r}; choose from {sorted(ENV_IDS)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {env_id}: {exc}") from None
