"""Command line: expert, train, eval, plot, selftest."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from .envs import make_env
from .errors import ConfigError, FormatError, IncompatibleDemosError, MetricsLockError
from .expert import collect_demonstrations, episode_returns, make_expert, save_demos
from .harness import plot_metrics, read_metrics
from .ilcore import ALGOS, TrainConfig
from .runconfig import (RunConfig, evaluate_checkpoint, load_run_config, run_experiment,
                        seed_from_env)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _pairs(items, what: str) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"{what} expects KEY=VALUE, got {item!r}")
        out[key] = _parse_value(raw)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mifq", description="Multi-agent inverse factorized Q-learning")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("expert", help="build the expert for an env and record demonstrations")
    e.add_argument("--env", required=True)
    e.add_argument("--env-param", action="append", metavar="KEY=VALUE")
    e.add_argument("--episodes", type=int, default=128)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="demonstration file (JSON lines)")

    t = sub.add_parser("train", help="train one algorithm over one or more seeds")
    t.add_argument("--config", help="RunConfig JSON file; flags override it")
    t.add_argument("--env")
    t.add_argument("--env-param", action="append", metavar="KEY=VALUE")
    t.add_argument("--algo", choices=ALGOS)
    t.add_argument("--demos")
    t.add_argument("--n-demo-episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--n-seeds", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--out", dest="out_dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a training hyper-parameter, e.g. --set lr_omega=1e-5")

    v = sub.add_parser("eval", help="evaluate a checkpoint")
    v.add_argument("checkpoint")
    v.add_argument("--episodes", type=int, default=32)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--mode", choices=("sample", "greedy"), default="sample")

    pl = sub.add_parser("plot", help="metrics CSV files -> SVG learning curves")
    pl.add_argument("csv", nargs="+", help="metrics file, optionally LABEL=PATH")
    pl.add_argument("--out", required=True)
    pl.add_argument("--metric", default="mean_return")
    pl.add_argument("--title", default="")

    s = sub.add_parser("selftest", help="run the numerical property suites")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--only", action="append", help="suite name (repeatable)")
    return p


def cmd_expert(args) -> int:
    env = make_env(args.env, **_pairs(args.env_param, "--env-param"))
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    policy, name = make_expert(env)
    demos = collect_demonstrations(policy, env, args.episodes, args.seed, name)
    save_demos(demos, args.out)
    rets = demos.returns()
    print(json.dumps({"out": args.out, "expert": name, "episodes": demos.count,
                      "transitions": demos.n_transitions, "mean_return": float(rets.mean())}))
    return 0


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cfg = replace(cfg, seed=seed_from_env(cfg.seed))
    flags = {k: getattr(args, k) for k in ("env", "algo", "demos", "n_demo_episodes", "seed",
                                          "n_seeds", "eval_every", "eval_episodes", "out_dir")}
    cfg = replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    if args.env_param:
        cfg = replace(cfg, env_params={**cfg.env_params, **_pairs(args.env_param, "--env-param")})
    train_over = _pairs(args.set, "--set")
    if args.max_steps is not None:
        train_over["max_steps"] = args.max_steps
    if train_over:
        known = {f.name for f in fields(TrainConfig)}
        bad = sorted(set(train_over) - known)
        if bad:
            raise ConfigError(f"unknown training parameter(s): {', '.join(bad)}")
        cfg = replace(cfg, train=replace(cfg.train, **train_over))
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _run_config(args)

    def progress(res):
        last = res.rows[-1]
        print(json.dumps({"seed": res.seed, "step": last.step, "mean_return": last.mean_return,
                          "solve_rate": last.solve_rate, "metrics": str(res.metrics_path),
                          "checkpoint": str(res.checkpoint_path)}), flush=True)

    run_experiment(cfg, progress)
    print(json.dumps({"merged_metrics": str(Path(cfg.out_dir) / "metrics.csv")}))
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    print(json.dumps(evaluate_checkpoint(args.checkpoint, args.episodes, args.seed, args.mode)))
    return 0


def cmd_plot(args) -> int:
    series = {}
    for item in args.csv:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        if not Path(path).is_file():
            raise ConfigError(f"metrics file not found: {path}")
        series[label] = read_metrics(path)
    try:
        plot_metrics(series, args.out, metric=args.metric, title=args.title)
    except AttributeError:
        raise ConfigError(f"unknown metric {args.metric!r}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(json.dumps({"out": args.out, "series": list(series)}))
    return 0


def cmd_selftest(args) -> int:
    from .properties import SUITES, run_all

    names = args.only or list(SUITES)
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise ConfigError(f"unknown suite(s) {bad}; choose from {sorted(SUITES)}")
    results = run_all(args.seed, names)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"expert": cmd_expert, "train": cmd_train, "eval": cmd_eval, "plot": cmd_plot,
            "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # argparse exits 2 on unknown flags
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, IncompatibleDemosError, MetricsLockError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
