"""Run configuration, multi-seed orchestration and checkpoint evaluation."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import run_algo
from .envs import Env, make_env
from .errors import ConfigError, FormatError
from .expert import DemonstrationSet, load_demos
from .harness import MetricsRow, evaluate, write_metrics
from .ilcore import ALGOS, QPolicy, TrainConfig
from .nets import IndependentQNets, LocalQNet, load_checkpoint, save_checkpoint

SEED_ENV_VAR = "MIFQ_SEED"


@dataclass
class RunConfig:
    env: str = "two_step"
    env_params: dict = field(default_factory=dict)
    algo: str = "mifq"
    train: TrainConfig = field(default_factory=TrainConfig)
    demos: str = ""
    n_demo_episodes: int | None = None
    eval_every: int | None = None
    eval_episodes: int = 32
    n_seeds: int = 4
    seed: int = 0
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        make_env(self.env, **self.env_params)
        if not self.demos:
            raise ConfigError("a demonstration file is required (--demos)")
        if not Path(self.demos).is_file():
            raise ConfigError(f"demonstration file not found: {self.demos}")
        if self.eval_episodes < 1:
            raise ConfigError(f"eval_episodes must be >= 1, got {self.eval_episodes}")
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if self.n_demo_episodes is not None and self.n_demo_episodes < 1:
            raise ConfigError(f"n_demo_episodes must be >= 1, got {self.n_demo_episodes}")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        self.train_config(self.seed).validate()
        return self

    def train_config(self, seed: int) -> TrainConfig:
        over = {"seed": seed, "eval_episodes": self.eval_episodes}
        if self.eval_every is not None:
            over["eval_every"] = self.eval_every
        return replace(self.train, **over)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        if "train" in d:
            if not isinstance(d["train"], dict):
                raise ConfigError("'train' must be an object")
            d["train"] = TrainConfig.from_dict(d["train"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["train"] = self.train.to_dict()
        return out


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(doc)


def seed_from_env(default: int) -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


# ---- checkpoints ---------------------------------------------------------------------------
def checkpoint_params(algo: str, trained) -> dict[str, np.ndarray]:
    if algo == "bc":
        return {f"theta.{n}": p.data.copy() for n, p in trained.policy_net.named_parameters()}
    return trained.state_dict()


def checkpoint_meta(cfg: RunConfig, env: Env, train_cfg: TrainConfig) -> dict:
    spec = env.spec
    return {"algo": cfg.algo, "env": cfg.env, "env_params": cfg.env_params,
            "env_hash": spec.hash(), "seed": train_cfg.seed, "hidden_dim": train_cfg.hidden_dim,
            "n_agents": spec.n_agents, "obs_dim": spec.obs_dim, "n_actions": spec.n_actions[0]}


def policy_net_from_checkpoint(path):
    """Rebuild the acting network (shared or per-agent) from a checkpoint."""
    params, meta = load_checkpoint(path)
    try:
        algo, m, d, k, h = (meta["algo"], meta["n_agents"], meta["obs_dim"], meta["n_actions"],
                            meta["hidden_dim"])
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint meta lacks {exc.args[0]!r}") from None
    rng = np.random.default_rng(0)
    net = (IndependentQNets(d, m, k, h, rng) if algo in ("iiq", "bc")
           else LocalQNet(d, m, k, h, rng))
    theta = {n[len("theta."):]: v for n, v in params.items() if n.startswith("theta.")}
    try:
        net.load_state_dict(theta)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    return net, meta


def evaluate_checkpoint(path, n_episodes: int = 32, seed: int = 0, mode: str = "sample"):
    net, meta = policy_net_from_checkpoint(path)
    env = make_env(meta["env"], **meta.get("env_params", {}))
    if env.spec.hash() != meta.get("env_hash"):
        raise FormatError(f"{path}: checkpoint was trained on a different environment spec")
    mean_ret, solve = evaluate(QPolicy(net, mode), env, n_episodes, seed)
    return {"checkpoint": str(path), "algo": meta["algo"], "env": meta["env"],
            "episodes": n_episodes, "seed": seed, "mode": mode,
            "mean_return": mean_ret, "solve_rate": solve}


# ---- orchestration -------------------------------------------------------------------------
@dataclass
class SeedResult:
    seed: int
    rows: list[MetricsRow]
    metrics_path: Path
    checkpoint_path: Path
    trained: object = None


def load_run_demos(cfg: RunConfig, env: Env) -> DemonstrationSet:
    demos = load_demos(cfg.demos, env)
    if cfg.n_demo_episodes is not None:
        if cfg.n_demo_episodes > demos.count:
            raise ConfigError(f"requested {cfg.n_demo_episodes} demo episodes, file has {demos.count}")
        demos = demos.subset(cfg.n_demo_episodes)
    return demos


def run_seed(cfg: RunConfig, seed: int, out_dir: Path) -> SeedResult:
    env = make_env(cfg.env, **cfg.env_params)
    demos = load_run_demos(cfg, env)
    train_cfg = cfg.train_config(seed)
    trained, rows = run_algo(cfg.algo, env, demos, train_cfg)
    metrics_path = out_dir / f"metrics_seed{seed}.csv"
    ckpt_path = out_dir / f"checkpoint_seed{seed}.json"
    write_metrics(rows, metrics_path)
    save_checkpoint(ckpt_path, checkpoint_params(cfg.algo, trained),
                    checkpoint_meta(cfg, env, train_cfg))
    return SeedResult(seed, rows, metrics_path, ckpt_path, trained)


def run_experiment(cfg: RunConfig, progress=None) -> list[SeedResult]:
    """Train ``n_seeds`` consecutive seeds, write per-seed files and a merged CSV."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    results = []
    for seed in range(cfg.seed, cfg.seed + cfg.n_seeds):
        results.append(run_seed(cfg, seed, out_dir))
        if progress:
            progress(results[-1])
    write_metrics([r for res in results for r in res.rows], out_dir / "metrics.csv")
    return results
