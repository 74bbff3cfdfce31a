"""Local Q networks, hyper-networks and the monotone two-layer mixer."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, FormatError
from .serialization import dumps17

CHECKPOINT_FORMAT = "mifq-checkpoint/1"


class Module:
    """Anything holding named parameter tensors."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise FormatError(f"parameter names differ: {missing[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data[...] = value

    def copy(self):
        """Deep copy with detached parameters (used for target networks)."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.requires_grad = False
            p.grad = None
        return clone

    def sync_from(self, other: "Module") -> None:
        for (_, dst), (_, src) in zip(self.named_parameters(), other.named_parameters()):
            dst.data[...] = src.data


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MLP(Module):
    """Fully connected ReLU network ``x[B, in] -> [B, out]``."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, zero_last: bool = False):
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w, b = np.zeros((n_in, n_out)), np.zeros(n_out)
            else:
                w = uniform_init(rng, n_in, (n_in, n_out))
                b = uniform_init(rng, n_in, (n_out,))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    def named_parameters(self, prefix: str = ""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}l{i}.W", w
            yield f"{prefix}l{i}.b", b

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.shape[-1] != self.sizes[0]:
            raise DimensionError(f"MLP expects input dim {self.sizes[0]}, got {h.shape}")
        n = len(self.weights)
        lead = h.shape[:-1]
        if h.ndim != 2:
            h = h.reshape(-1, self.sizes[0])
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.linear(h, w, b, relu=i < n - 1)
        if len(lead) != 1:
            h = h.reshape(*lead, self.sizes[-1])
        return h

    def numpy_forward(self, x: np.ndarray) -> np.ndarray:
        """Same map without building a graph (acting and evaluation)."""
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.data + b.data
            if i < n - 1:
                np.maximum(x, 0.0, out=x)
        return x


class LocalQNet(Module):
    """Q_i(o_i, .) from ``obs (+) one-hot(agent id)``; parameters shared across agents."""

    def __init__(self, obs_dim: int, n_agents: int, n_actions: int, hidden: int,
                 rng: np.random.Generator, zero_last: bool = True):
        self.obs_dim = obs_dim
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.mlp = MLP([obs_dim + n_agents, hidden, hidden, n_actions], rng, zero_last=zero_last)

    def named_parameters(self, prefix: str = ""):
        yield from self.mlp.named_parameters(prefix)

    def _inputs(self, obs: np.ndarray, agent_ids: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise DimensionError(f"observation dim {obs.shape[-1]} != {self.obs_dim}")
        agent_ids = np.asarray(agent_ids)
        if np.any(agent_ids >= self.n_agents) or np.any(agent_ids < 0):
            raise DimensionError(f"agent id out of range for {self.n_agents} agents")
        return np.concatenate([obs, np.eye(self.n_agents)[agent_ids]], axis=-1)

    def forward(self, obs, agent_id) -> Tensor:
        """Q-values for one agent: ``obs[d_o]`` -> ``[k]`` or ``obs[B, d_o]`` -> ``[B, k]``."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            return self.mlp(self._inputs(obs[None], np.array([agent_id])))[0]
        ids = np.broadcast_to(np.asarray(agent_id), obs.shape[:1])
        return self.mlp(self._inputs(obs, ids))

    def agent_q(self, obs: np.ndarray, i: int) -> Tensor:
        """``obs[B, m, d_o]`` -> ``[B, k]`` for agent ``i``."""
        return self.forward(np.asarray(obs)[:, i], i)

    def q_all(self, obs: np.ndarray) -> Tensor:
        """``obs[B, m, d_o]`` -> Q ``[B, m, k]`` for every agent."""
        obs = np.asarray(obs, dtype=np.float64)
        b, m, _ = obs.shape
        ids = np.broadcast_to(np.arange(m), (b, m))
        x = self._inputs(obs, ids).reshape(b * m, -1)
        return self.mlp(x).reshape(b, m, self.n_actions)

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        """Graph-free ``obs[m, d_o]`` -> ``[m, k]``."""
        obs = np.asarray(obs, dtype=np.float64)
        m = obs.shape[0]
        return self.mlp.numpy_forward(self._inputs(obs, np.arange(m)))


class IndependentQNets(Module):
    """One LocalQNet per agent with disjoint parameters."""

    def __init__(self, obs_dim: int, n_agents: int, n_actions: int, hidden: int,
                 rng: np.random.Generator, zero_last: bool = True):
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.nets = [LocalQNet(obs_dim, n_agents, n_actions, hidden, rng, zero_last)
                     for _ in range(n_agents)]

    def named_parameters(self, prefix: str = ""):
        for i, net in enumerate(self.nets):
            yield from net.named_parameters(f"{prefix}agent{i}.")

    def agent_q(self, obs: np.ndarray, i: int) -> Tensor:
        """``obs[B, m, d_o]`` -> ``[B, k]`` for agent ``i`` through its own network."""
        return self.nets[i].forward(np.asarray(obs)[:, i], i)

    def q_all(self, obs: np.ndarray) -> Tensor:
        cols = [self.agent_q(obs, i).reshape(len(obs), 1, self.n_actions)
                for i in range(self.n_agents)]
        return ad.concat(cols, axis=1)

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        return np.stack([net.mlp.numpy_forward(net._inputs(obs[i:i + 1], np.array([i])))[0]
                         for i, net in enumerate(self.nets)])


class TabularQ(Module):
    """Per-agent Q tables indexed by one-hot observations: ``Q_i = onehot(o_i) @ table_i``.

    Exact tabular counterpart of LocalQNet for property checks; parameters of
    different agents are disjoint.
    """

    def __init__(self, n_obs: int, n_agents: int, n_actions: int, tables=None):
        self.n_obs = n_obs
        self.n_agents = n_agents
        self.n_actions = n_actions
        if tables is None:
            tables = np.zeros((n_agents, n_obs, n_actions))
        tables = np.asarray(tables, dtype=np.float64)
        self.tables = [Tensor(tables[i].copy(), requires_grad=True) for i in range(n_agents)]

    def named_parameters(self, prefix: str = ""):
        for i, t in enumerate(self.tables):
            yield f"{prefix}table{i}", t

    def agent_q(self, obs: np.ndarray, i: int) -> Tensor:
        return ad.matmul(Tensor(np.asarray(obs, dtype=np.float64)[:, i]), self.tables[i])

    def q_all(self, obs: np.ndarray) -> Tensor:
        b = len(obs)
        cols = [self.agent_q(obs, i).reshape(b, 1, self.n_actions) for i in range(self.n_agents)]
        return ad.concat(cols, axis=1)


# ---- mixing ------------------------------------------------------------------------------
@dataclass
class MixingWeights:
    """Raw (pre-absolute-value) weights of one two-layer mixer, batched over states.

    W1: [B, m, h]   b1: [B, h]   W2: [B, h]   b2: [B]
    """

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @property
    def n_agents(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[2]

    @staticmethod
    def flat_size(n_agents: int, hidden: int) -> int:
        return n_agents * hidden + hidden + hidden + 1

    @classmethod
    def from_flat(cls, flat: Tensor, n_agents: int, hidden: int) -> "MixingWeights":
        flat = flat if isinstance(flat, Tensor) else Tensor(flat)
        if flat.ndim == 1:
            flat = flat.reshape(1, -1)
        b, size = flat.shape
        if size != cls.flat_size(n_agents, hidden):
            raise DimensionError(
                f"flat mixing vector has {size} entries, expected {cls.flat_size(n_agents, hidden)}")
        mh = n_agents * hidden
        return cls(
            W1=flat[:, :mh].reshape(b, n_agents, hidden),
            b1=flat[:, mh:mh + hidden],
            W2=flat[:, mh + hidden:mh + 2 * hidden],
            b2=flat[:, mh + 2 * hidden],
        )

    def flatten(self) -> Tensor:
        b = self.W1.shape[0]
        return ad.concat([self.W1.reshape(b, -1), self.b1, self.W2, self.b2.reshape(b, 1)], axis=1)


def mixing_forward(x, w: MixingWeights) -> Tensor:
    """ELU(x @ |W1| + b1) @ |W2| + b2 for ``x[B, m]`` (or a single ``x[m]``)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    b, m = x.shape
    if m != w.n_agents or w.W1.shape[0] != b:
        raise DimensionError(f"mixer input {x.shape} does not match weights {w.W1.shape}")
    pre = ad.matmul(x.reshape(b, 1, m), abs(w.W1)).reshape(b, w.hidden) + w.b1
    out = (ad.elu(pre) * abs(w.W2)).sum(axis=1) + w.b2
    return out[0] if single else out


class HyperNet(Module):
    """Global state -> flattened MixingWeights via two fully connected layers."""

    def __init__(self, state_dim: int, n_agents: int, mix_hidden: int, hidden: int,
                 rng: np.random.Generator, zero_last: bool = False):
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.mix_hidden = mix_hidden
        self.mlp = MLP([state_dim, hidden, MixingWeights.flat_size(n_agents, mix_hidden)],
                       rng, zero_last=zero_last)

    def named_parameters(self, prefix: str = ""):
        yield from self.mlp.named_parameters(prefix)

    def init_mean(self, offset: float = 50.0, noise: float = 0.01) -> "HyperNet":
        """Start near the mixer ELU(sum_i x_i + offset) - offset.

        The output layer is shrunk by ``noise`` (keeping a little state
        dependence to break symmetry between mixing units) and its bias is set
        to W1 = 1, b1 = offset, W2 = 1/h, b2 = -offset. The mixer is then
        linear in its inputs as long as their weighted sum stays above -offset.
        """
        m, h = self.n_agents, self.mix_hidden
        w, b = self.mlp.weights[-1], self.mlp.biases[-1]
        target = np.concatenate([np.ones(m * h), np.full(h, offset), np.full(h, 1.0 / h), [-offset]])
        w.data[...] = w.data * noise
        b.data[...] = target + noise * b.data
        return self

    def forward(self, states) -> MixingWeights:
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != self.state_dim:
            raise DimensionError(f"state dim {states.shape[-1]} != {self.state_dim}")
        if states.ndim == 1:
            states = states[None]
        return MixingWeights.from_flat(self.mlp(states), self.n_agents, self.mix_hidden)


class HyperMixer(Module):
    """Monotone mixer whose weights are generated from the global state.

    ``input_scale`` multiplies the local values before mixing; 1/m makes the
    mixer act on agent averages rather than sums.
    """

    def __init__(self, hyper: HyperNet, final_bias: bool = True, input_scale: float = 1.0):
        if input_scale <= 0:
            raise ValueError("input_scale must be positive")
        self.hyper = hyper
        self.final_bias = final_bias
        self.input_scale = float(input_scale)

    def named_parameters(self, prefix: str = ""):
        yield from self.hyper.named_parameters(prefix)

    def __call__(self, x: Tensor, states: np.ndarray) -> Tensor:
        w = self.hyper.forward(states)
        if not self.final_bias:
            w = MixingWeights(w.W1, w.b1, w.W2, ad.Tensor(np.zeros(w.b2.shape)))
        if self.input_scale != 1.0:
            x = x * self.input_scale
        return mixing_forward(x, w)


class FrozenMixer(Module):
    """Mixer with one fixed weight bundle shared by every state (no parameters)."""

    def __init__(self, W1, b1, W2, b2):
        self.W1, self.b1 = np.asarray(W1, dtype=np.float64), np.asarray(b1, dtype=np.float64)
        self.W2, self.b2 = np.asarray(W2, dtype=np.float64), float(b2)

    def named_parameters(self, prefix: str = ""):
        return iter(())

    def weights(self, batch: int) -> MixingWeights:
        tile = lambda a: Tensor(np.broadcast_to(a, (batch,) + a.shape).copy())
        return MixingWeights(tile(self.W1), tile(self.b1), tile(self.W2),
                             Tensor(np.full(batch, self.b2)))

    def __call__(self, x, states=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 1:
            return mixing_forward(x, self.weights(1))
        return mixing_forward(x, self.weights(x.shape[0]))


class SumMixer(Module):
    """VDN: unweighted sum over agents."""

    def named_parameters(self, prefix: str = ""):
        return iter(())

    def __call__(self, x: Tensor, states=None) -> Tensor:
        return ad.tsum(x, axis=1)


class LinearMixer(Module):
    """Fixed non-negative weighted sum ``sum_i alpha_i x_i``."""

    def __init__(self, alphas):
        self.alphas = np.asarray(alphas, dtype=np.float64)
        if np.any(self.alphas < 0):
            raise ValueError("linear mixer weights must be non-negative")

    def named_parameters(self, prefix: str = ""):
        return iter(())

    def __call__(self, x: Tensor, states=None) -> Tensor:
        return ad.tsum(x * self.alphas, axis=1)


def joint_v(local_v, states, mixer) -> Tensor:
    """V_tot(S) = M_V(V^Q(S))."""
    return mixer(_batched(local_v), np.atleast_2d(states))


def joint_r(local_r, states, mixer) -> Tensor:
    """R_tot(S, A) = M_R(-R^Q(S, A)); the reward mixer sees negated local rewards."""
    return mixer(-_batched(local_r), np.atleast_2d(states))


def _batched(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


# ---- checkpoints ---------------------------------------------------------------------
def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": {name: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
                   for name, a in sorted(params.items())},
    }
    Path(path).write_text(dumps17(doc) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON checkpoint ({exc.msg})", line=exc.lineno) from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        fmt = doc.get("format") if isinstance(doc, dict) else None
        raise FormatError(f"{path}: unsupported checkpoint format {fmt!r}")
    if not isinstance(doc.get("params"), dict) or not isinstance(doc.get("meta", {}), dict):
        raise FormatError(f"{path}: checkpoint needs 'params' and 'meta' objects")
    params = {}
    for name, entry in doc["params"].items():
        try:
            data = np.asarray(entry["data"], dtype=np.float64)
            shape = tuple(int(n) for n in entry["shape"])
        except (TypeError, KeyError, ValueError):
            raise FormatError(f"{path}: parameter {name!r} is malformed") from None
        if int(np.prod(shape)) != data.size:
            raise FormatError(f"{path}: {name} has {data.size} values for shape {shape}")
        params[name] = data.reshape(shape)
    return params, doc.get("meta", {})
