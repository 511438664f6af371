"""Command line entry point.

Exit status: 0 on success, 1 for configuration errors, 2 when a run aborts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .demo import save_demo_csv, save_reference_expert
from .harness import (
    BASELINES,
    MetricReport,
    build_env,
    make_demonstrations,
    reference_expert,
    run_method,
    sweep,
    write_metrics,
)
from .mdp import aggregated_reward, collect
from .policy import EnsemblePolicy

logger = logging.getLogger("learnsam")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry, e.g. sam.c=400 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnsam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("train-expert", "train (or construct) the reference expert"),
        ("gen-demo", "sample demonstrations from the reference expert"),
        ("learn", "run the localised ensemble learner"),
        ("baseline", "run a baseline learner"),
        ("sweep", "demonstration quality or sparsity sweep"),
        ("eval", "evaluate a saved policy"),
    ]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "baseline":
            p.add_argument("--kind", choices=BASELINES, default="trpo")
        if name == "eval":
            p.add_argument("--policy", type=Path, required=True, help="policy.json written by learn/baseline")
            p.add_argument("--episodes", type=int, default=100)
    return parser


def _write_log_outputs(res, out: Path, cfg) -> None:
    res.log.to_csv(out / "log.csv")
    res.log.timing_csv(out / "timing.csv")
    write_metrics([MetricReport.from_results(res.method, [res], cfg.n_epochs)], out / "metrics.csv")
    (out / "policy.json").write_text(json.dumps(res.estimator.ensemble_.to_dict()))
    for j, d in enumerate(res.demos):
        save_demo_csv(d, out / ("demo.csv" if j == 0 else f"demo_{j + 1}.csv"))
    states = getattr(res.estimator, "sam_states_", [])
    if states:
        (out / "sam.jsonl").write_text("\n".join(s.to_json() for s in states) + "\n")


def _run(args, cfg) -> None:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.resolved")
    if args.command == "train-expert":
        env = build_env(cfg)
        expert = reference_expert(cfg, env)
        save_reference_expert(expert, out / "expert.json")
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "eval_return", "success_rate", "budget_exhausted"])
            w.writerow([expert.kind, expert.eval_return, expert.success_rate, int(expert.budget_exhausted)])
    elif args.command == "gen-demo":
        env = build_env(cfg)
        demos = make_demonstrations(cfg, env)
        for j, d in enumerate(demos):
            save_demo_csv(d, out / ("demo.csv" if j == 0 else f"demo_{j + 1}.csv"))
    elif args.command == "learn":
        _write_log_outputs(run_method(cfg, "learn_sam"), out, cfg)
    elif args.command == "baseline":
        _write_log_outputs(run_method(cfg, args.kind), out, cfg)
    elif args.command == "sweep":
        sw = cfg.sweep
        _, reports = sweep(cfg, sw.axis, sw.values, sw.methods, sw.seeds, out / "sweep.csv")
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("value",) + MetricReport.FIELDS)
            for (value, _), rep in reports.items():
                w.writerow([value] + rep.row())
    elif args.command == "eval":
        env = build_env(cfg)
        try:
            ens = EnsemblePolicy.from_dict(json.loads(args.policy.read_text()), env.spec)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load policy {args.policy}: {exc}") from exc
        rng = np.random.default_rng(cfg.seed)
        trajs = collect(env, ens, 0, rng, n_episodes=args.episodes, deterministic=True)
        rewards = np.array([aggregated_reward(t) for t in trajs])
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episodes", "mean_reward", "sd_reward", "success_rate"])
            w.writerow([rewards.size, rewards.mean(), rewards.std(), np.mean(rewards > 0)])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        _run(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit status 2
        logger.exception("run aborted")
        print(f"run aborted: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
