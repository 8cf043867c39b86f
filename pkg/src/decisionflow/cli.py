"""Command-line surface: gen-data, pretrain, train, eval, ablate, check.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 runtime
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import checks
from .dataset import gen_dataset, load_dataset, save_dataset
from .errors import (ConfigError, DatasetParseError, GenerationDivergenceError,
                     SchemaError, TrainingDivergenceError)
from .evaluation import evaluate
from .flowcore import FlowTimeGrid
from .trainer import (TrainConfig, ablate, format_ablation_table, load_policy,
                      pretrain_behavior, train, write_metrics)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (TrainConfig fields)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="primary output path for this command")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decisionflow",
                                description="Decision Flow offline RL toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic offline dataset")
    _common(g)
    g.add_argument("--env", choices=("bandit", "pointmass"), default="bandit")
    g.add_argument("--episodes", type=int, default=2000)

    pre = sub.add_parser("pretrain", help="train the behavior flow policy by CFM")
    _common(pre)
    pre.add_argument("--dataset", help="dataset path (overrides config)")
    pre.add_argument("--iterations", type=int, help="override pretrain iterations")

    tr = sub.add_parser("train", help="run decision-flow training")
    _common(tr)
    tr.add_argument("--variant", choices=("dir", "div", "behavior-only"))
    tr.add_argument("--dataset", help="dataset path (overrides config)")
    tr.add_argument("--behavior", help="behavior checkpoint path")
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--checkpoint", help="checkpoint output path")
    tr.add_argument("--resume", help="resume from a training checkpoint")

    ev = sub.add_parser("eval", help="evaluate a policy checkpoint")
    _common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--env", choices=("bandit", "pointmass"), required=True)
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--flow-steps", type=int, default=10)

    ab = sub.add_parser("ablate", help="run and compare ablation configs")
    _common(ab)
    ab.add_argument("--runs", nargs="+", required=True,
                    help="run specs like 'div', 'div+no_prev_action', 'behavior-only'")
    ab.add_argument("--dataset", help="dataset path (overrides config)")
    ab.add_argument("--behavior", help="behavior checkpoint path")

    ck = sub.add_parser("check", help="run a property suite")
    _common(ck)
    ck.add_argument("--suite", required=True, choices=sorted(checks.SUITES))
    return p


def _load_config(args, **extra) -> TrainConfig:
    overrides = {k: v for k, v in extra.items() if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig(**overrides)


def _parse_run_spec(spec: str, base: TrainConfig) -> TrainConfig:
    from dataclasses import replace

    tokens = spec.split("+")
    variant = tokens[0]
    flags = {}
    for tok in tokens[1:]:
        if tok not in ("no_prev_action", "no_flow_mdp", "alt_q", "twin_q"):
            raise ConfigError(f"unknown ablation flag '{tok}' in run spec '{spec}'")
        flags[tok] = True
    return replace(base, variant=variant,
                   no_prev_action=flags.get("no_prev_action", False),
                   no_flow_mdp=flags.get("no_flow_mdp", False),
                   alt_q=flags.get("alt_q", False),
                   twin_q=flags.get("twin_q", False))


def _cmd_gen_data(args) -> int:
    if not args.out:
        raise ConfigError("gen-data requires --out")
    seed = args.seed if args.seed is not None else 0
    ds = gen_dataset(args.env, n_episodes=args.episodes, seed=seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} transitions ({args.episodes} episodes) to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args, dataset_path=args.dataset,
                       pretrain_iterations=args.iterations,
                       behavior_path=args.out)
    if not cfg.dataset_path:
        raise ConfigError("pretrain requires a dataset path")
    if not cfg.behavior_path:
        raise ConfigError("pretrain requires --out for the behavior checkpoint")
    ds = load_dataset(cfg.dataset_path)
    _, rows = pretrain_behavior(cfg, ds)
    last = rows[-1].cfm if rows else float("nan")
    print(f"behavior policy saved to {cfg.behavior_path} "
          f"({len(rows)} iterations, final cfm loss {last:.6f})")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args, variant=args.variant, dataset_path=args.dataset,
                       behavior_path=args.behavior, iterations=args.iterations,
                       metrics_path=args.out, checkpoint_path=args.checkpoint,
                       resume_from=args.resume)
    state, rows = train(cfg)
    evals = [r.eval_return for r in rows if r.eval_return is not None]
    tail = f", last eval return {evals[-1]:.4f}" if evals else ""
    print(f"trained {cfg.effective_variant()} for {state.iteration} iterations{tail}")
    if cfg.metrics_path:
        print(f"metrics: {cfg.metrics_path}")
    if cfg.checkpoint_path:
        print(f"checkpoint: {cfg.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    policy = load_policy(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    report = evaluate(policy, args.env, args.episodes, seed=seed,
                      grid=FlowTimeGrid(args.flow_steps))
    print(report.to_text())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
        print(f"json report: {args.out}")
    else:
        print(report.to_json())
    return 0


def _cmd_ablate(args) -> int:
    base = _load_config(args, dataset_path=args.dataset, behavior_path=args.behavior)
    configs = [_parse_run_spec(spec, base) for spec in args.runs]
    results = ablate(configs)
    table = format_ablation_table(results)
    print(table, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(results, f, indent=2, sort_keys=True)
        print(f"json table: {args.out}")
    return 0


def _cmd_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = checks.run_suite(args.suite, seed=seed)
    failed = 0
    for name, ok, detail in results:
        tag = "PASS" if ok else "FAIL"
        print(f"[{tag}] {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return 0 if failed == 0 else 1


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "check": _cmd_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, SchemaError, DatasetParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingDivergenceError, GenerationDivergenceError) as e:
        print(f"runtime divergence: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
