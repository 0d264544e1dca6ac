"""Command-line entry point.

Verbs: train, selfplay, tournament, eval-hidden, ablate-cascade,
schedule-sweep, export, validate-config. Exit codes: 0 success,
1 runtime failure, 2 configuration error, 3 missing file or artifact.
"""

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import harness
from .cascade import ablation_grid
from .config import (
    SCHEDULE_FACTORS,
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    config_hash,
    load_config,
    resolved_dict,
)
from .snapshot import SnapshotError, read_snapshot, restore_agent_arrays

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


class CliError(RuntimeError):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _out_root(args):
    return args.out or os.environ.get("POLCON_OUT_DIR") or "runs"


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "protocol", None):
        cfg.protocol = args.protocol
        if args.protocol == "selfplay":
            cfg.env = "sumoline"
    apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _prepare_run_dir(cfg, args):
    run_dir = os.path.join(_out_root(args), config_hash(cfg))
    if os.path.exists(os.path.join(run_dir, "summary.json")) and not args.force:
        raise CliError(
            f"run {run_dir} already completed (use --force to redo)", EXIT_RUNTIME
        )
    return run_dir


def _run_one(cfg, run_dir):
    return harness.run_experiment(cfg, run_dir)


def _run_many(jobs, parallel):
    """jobs: list of (cfg, run_dir); returns summaries in job order."""
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as ex:
            return list(ex.map(_run_one, *zip(*jobs)))
    return [_run_one(cfg, run_dir) for cfg, run_dir in jobs]


def cmd_train(args):
    cfg = _load_cfg(args)
    if args.print_config:
        json.dump(resolved_dict(cfg), sys.stdout, indent=2, sort_keys=True)
        print()
        return EXIT_OK
    run_dir = _prepare_run_dir(cfg, args)
    summary = harness.run_experiment(cfg, run_dir)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def _load_run(run_dir):
    cfg_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(cfg_path):
        raise CliError(f"no config.json in {run_dir}", EXIT_MISSING)
    cfg = load_config(cfg_path)
    cfg.validate()
    snaps_dir = os.path.join(run_dir, "snapshots")
    snaps = sorted(os.listdir(snaps_dir)) if os.path.isdir(snaps_dir) else []
    if not snaps:
        raise CliError(f"no snapshots in {run_dir}", EXIT_MISSING)
    return cfg, [os.path.join(snaps_dir, s) for s in snaps]


def cmd_tournament(args):
    cfg, snaps = _load_run(args.run_dir)
    params, norm, meta = harness.load_policy_from_snapshot(snaps[-1])
    archive = []
    for path in snaps[:-1]:
        m, _, _ = read_snapshot(path)
        archive.append((m["snapshot_version"], m["env_steps"], path))
    csv_path = os.path.join(args.run_dir, "tournament.csv")
    rows = harness.tournament_vs_history(params, norm, archive, cfg, csv_path,
                                         n_episodes=args.episodes)
    json.dump({"tournament_csv": csv_path, "rows": rows}, sys.stdout,
              indent=2, sort_keys=True)
    print()
    return EXIT_OK


def cmd_eval_hidden(args):
    cfg, snaps = _load_run(args.run_dir)
    if cfg.agent != "pc":
        raise CliError("eval-hidden requires a policy-consolidation run", EXIT_CONFIG)
    meta, spec, arrays = read_snapshot(snaps[-1])
    agent = harness.make_agent(cfg, spec, cfg.seed)
    restore_agent_arrays(agent, arrays, meta["counts"])
    norm = harness.RunningNormalizer.from_state(meta["normalizer"])
    eval_rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    table = harness.eval_hidden_depths(agent, norm, cfg, eval_rng)
    json.dump(table, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def cmd_ablate_cascade(args):
    cfg = _load_cfg(args)
    if cfg.agent != "pc":
        raise CliError("ablate-cascade requires agent = 'pc'", EXIT_CONFIG)
    jobs = []
    for variant in ablation_grid(cfg.cascade):
        sub = dataclasses.replace(cfg, cascade=variant)
        jobs.append((sub, os.path.join(_out_root(args), config_hash(sub))))
    summaries = _run_many(jobs, args.parallel)
    table = [
        {"n_policies": job[0].cascade.n_policies,
         "omega": job[0].cascade.omega,
         "run_dir": job[1],
         "forgetting": s.get("forgetting"),
         "final_eval": s.get("final_eval")}
        for job, s in zip(jobs, summaries)
    ]
    json.dump(table, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def cmd_schedule_sweep(args):
    cfg = _load_cfg(args)
    if cfg.protocol != "alternating":
        raise CliError("schedule-sweep requires the alternating protocol", EXIT_CONFIG)
    jobs = []
    for factor in SCHEDULE_FACTORS:
        sub = dataclasses.replace(cfg, schedule_factor=factor)
        sub.validate()
        jobs.append((sub, os.path.join(_out_root(args), config_hash(sub))))
    summaries = _run_many(jobs, args.parallel)
    table = [
        {"schedule_factor": job[0].schedule_factor,
         "switch_period": job[0].effective_switch_period,
         "run_dir": job[1],
         "forgetting": s.get("forgetting"),
         "final_eval": s.get("final_eval")}
        for job, s in zip(jobs, summaries)
    ]
    json.dump(table, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def cmd_export(args):
    if not os.path.exists(args.snapshot):
        raise CliError(f"snapshot not found: {args.snapshot}", EXIT_MISSING)
    meta, spec, arrays = read_snapshot(args.snapshot)
    out = {
        "meta": meta,
        "arrays": {name: arr.tolist() for name, arr in arrays.items()},
    }
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(out, fh, sort_keys=True)
            fh.write("\n")
    else:
        json.dump(out, sys.stdout, sort_keys=True)
        print()
    return EXIT_OK


def cmd_validate_config(args):
    cfg = _load_cfg(args)
    json.dump(resolved_dict(cfg), sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def _add_train_opts(p, protocol=None):
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (section.key=value)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output root (default $POLCON_OUT_DIR or ./runs)")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved config and exit")
    p.add_argument("--force", action="store_true",
                   help="rerun even if the run directory is complete")
    p.set_defaults(protocol=protocol)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="polcon",
        description="Continual RL via cascades of KL-coupled policies.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run a training experiment")
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("selfplay", help="run self-play training on sumoline")
    _add_train_opts(p, protocol="selfplay")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tournament", help="score a run's final policy vs its history")
    p.add_argument("run_dir")
    p.add_argument("--episodes", type=int, default=30)
    p.set_defaults(func=cmd_tournament)

    p = sub.add_parser("eval-hidden", help="evaluate every cascade depth of a run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_eval_hidden)

    p = sub.add_parser("ablate-cascade", help="run the cascade-shape ablation grid")
    _add_train_opts(p)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_ablate_cascade)

    p = sub.add_parser("schedule-sweep",
                       help="sweep the task switch period by factors of 2")
    _add_train_opts(p)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_schedule_sweep)

    p = sub.add_parser("export", help="dump a snapshot as JSON")
    p.add_argument("snapshot")
    p.add_argument("--output", help="write here instead of stdout")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("validate-config", help="parse, validate and print a config")
    _add_train_opts(p)
    p.set_defaults(func=cmd_validate_config)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SnapshotError, harness.UpdateFailure, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
