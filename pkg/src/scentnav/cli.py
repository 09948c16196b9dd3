"""Command-line entry point.

Every behavior reachable here is a thin shell over the library: commands
load a config, derive seeds, call the corresponding experiments function,
and write a report bundle under --out. Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .agent import curve_to_csv, evaluate, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, save_config
from .env import save_logs
from .experiments import (
    STUDY_CONDITIONS,
    calibrate,
    evaluate_cell,
    generate_benchmark_layout,
    regenerate_report,
    run_benchmark,
    run_component_ablation,
    run_gamma_ablation,
    run_parameter_sweeps,
    run_sensitivity,
    save_study_report,
    save_table_bundle,
    train_study_policy,
)
from .ia import ALL_KINDS, ConditionSpec, load_layout, save_layout
from .metrics import episode_metrics, records_to_csv

SEED_ENV_VAR = "SCENTNAV_SEED"

CONDITION_ALIASES = {
    "depth:8x8": "two_level_8x8",
    "depth:4x4x4": "three_level_4x4x4",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_condition(name: str) -> str:
    raw = name.strip()
    if raw in CONDITION_ALIASES:
        return CONDITION_ALIASES[raw]
    if ":" in raw:
        family, kind = raw.split(":", 1)
        if kind in ALL_KINDS:
            return kind
        raise UsageError(f"unknown condition {name!r}")
    if raw in ALL_KINDS:
        return raw
    raise UsageError(f"unknown condition {name!r}; choose from {', '.join(ALL_KINDS)}")


def build_parser() -> _Parser:
    p = _Parser(prog="scentnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="TOML experiment config")
        sp.add_argument("--seed", type=int, default=None,
                        help=f"master seed (falls back to ${SEED_ENV_VAR}, then config)")
        sp.add_argument("--out", default="out", help="output directory")

    sp = sub.add_parser("generate", help="write a benchmark layout file")
    common(sp)
    sp.add_argument("--condition", required=True)
    sp.add_argument("--goal", type=int, default=0)

    sp = sub.add_parser("train", help="train one study policy")
    common(sp)
    sp.add_argument("--study", required=True, choices=sorted(STUDY_CONDITIONS))
    sp.add_argument("--episodes", type=int, default=None, help="total training episodes")
    sp.add_argument("--gamma", type=float, default=None)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one condition")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--condition", default=None)
    sp.add_argument("--layout", default=None, help="evaluate a stored layout file instead")
    sp.add_argument("--goal", type=int, default=0)
    sp.add_argument("--episodes", type=int, default=200)

    sp = sub.add_parser("bench", help="run one full benchmark study")
    common(sp)
    sp.add_argument("--study", required=True, choices=sorted(STUDY_CONDITIONS))
    sp.add_argument("--episodes", type=int, default=None, help="episodes per goal")
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("ablate", help="component or discount-factor ablation")
    common(sp)
    sp.add_argument("--kind", choices=("component", "gamma"), default="component")

    sp = sub.add_parser("sweep", help="theta and sigma parameter sweeps")
    common(sp)
    sp.add_argument("--param", choices=("theta", "sigma", "both"), default="both")

    sp = sub.add_parser("sense", help="parameter sensitivity analysis")
    common(sp)

    sp = sub.add_parser("calibrate", help="Bayesian calibration of memory parameters")
    common(sp)
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--method", choices=("bo", "random"), default=None)

    sp = sub.add_parser("report", help="regenerate a study report bundle from its logs")
    common(sp)
    sp.add_argument("--bundle", required=True)

    return p


def _effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV_VAR):
        seed = int(os.environ[SEED_ENV_VAR])
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _cmd_generate(args) -> int:
    cfg = _effective_config(args)
    kind = resolve_condition(args.condition)
    cond = ConditionSpec(kind=kind, goal_index=args.goal, seed=cfg.seed)
    layout = generate_benchmark_layout(cond, cfg.generation)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"layout_{kind}_g{args.goal}_s{cfg.seed}.json")
    save_layout(layout, path)
    print(f"generate {kind} goal={args.goal} seed={cfg.seed} "
          f"leaves={len(layout.leaf_ids)} depth={layout.depth_max} -> {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _effective_config(args)
    policy, curve = train_study_policy(
        args.study, cfg, total_episodes=args.episodes, gamma=args.gamma
    )
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"{args.study}.ckpt")
    save_checkpoint(ckpt, policy, extra={"study": args.study, "seed": cfg.seed,
                                         "gamma": args.gamma or cfg.train.gamma})
    with open(os.path.join(args.out, f"{args.study}_learning_curve.csv"), "w") as f:
        f.write(curve_to_csv(curve))
    last = curve[-1]
    print(f"train {args.study} seed={cfg.seed} updates={len(curve)} "
          f"final_return={last.mean_return:.3f} success={last.success_rate:.3f} "
          f"steps={last.mean_steps:.2f} -> {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _effective_config(args)
    policy, _ = load_checkpoint(args.checkpoint)
    if (args.condition is None) == (args.layout is None):
        raise UsageError("eval needs exactly one of --condition or --layout")
    os.makedirs(args.out, exist_ok=True)
    if args.layout:
        layout = load_layout(args.layout, cfg.env.n_max)
        logs = evaluate(policy, layout, None, args.episodes, cfg.seed, cfg.memory, cfg.env)
        records = []
        for i, log in enumerate(logs):
            rec = episode_metrics(log, layout)
            rec.episode = i
            records.append(rec)
        tag = os.path.splitext(os.path.basename(args.layout))[0]
    else:
        kind = resolve_condition(args.condition)
        cond = ConditionSpec(kind=kind, goal_index=args.goal, seed=cfg.seed)
        cell = evaluate_cell(policy, cond, cfg, args.episodes)
        logs, records = cell.logs, cell.records
        tag = f"{kind}_g{args.goal}"
    save_logs(os.path.join(args.out, f"eval_{tag}.jsonl"), logs)
    with open(os.path.join(args.out, f"eval_{tag}.csv"), "w") as f:
        f.write(records_to_csv(records))
    steps = float(np.mean([r.steps for r in records]))
    succ = float(np.mean([r.success for r in records]))
    print(f"eval {tag} episodes={len(records)} mean_steps={steps:.2f} success={succ:.3f}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _effective_config(args)
    if args.episodes is not None:
        cfg = dataclasses.replace(
            cfg, study=dataclasses.replace(cfg.study, episodes_per_goal=args.episodes)
        )
    report, policy = run_benchmark(args.study, cfg)
    save_study_report(report, args.out, cfg, policy)
    for cell in report.cells:
        steps = float(np.mean([r.steps for r in cell.records]))
        succ = float(np.mean([r.success for r in cell.records]))
        print(f"bench {args.study} {cell.condition} goal={cell.goal_index} "
              f"episodes={len(cell.records)} mean_steps={steps:.2f} success={succ:.3f}")
    print(f"bench {args.study} -> {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _effective_config(args)
    if args.kind == "component":
        rep = run_component_ablation(cfg)
        dists = rep.distances()
        rows = ["variant,trend_distance,difficulty_delta_change,"
                "hierarchy_relative_change,position_consistency"]
        for name, t in rep.trends.items():
            a = t.agreement
            rows.append(f"{name},{a.trend_distance!r},{a.difficulty_delta_change!r},"
                        f"{a.hierarchy_relative_change!r},{int(a.position_consistency)}")
        save_table_bundle(
            args.out, "component_ablation", cfg,
            {"ablation_components.csv": "\n".join(rows) + "\n"},
            {"distances": dists, "flags": rep.flags},
        )
        for name, d in dists.items():
            print(f"ablate component {name} trend_distance={d:.4f}")
        print(f"ablate component worse_component={rep.flags['worse_component']} -> {args.out}")
    else:
        rep = run_gamma_ablation(cfg)
        rows = ["gamma," + ",".join(f"{m}" for m in rep.raw[rep.gammas[0]])]
        radar_rows = ["gamma," + ",".join(rep.radar[rep.gammas[0]])]
        for g in rep.gammas:
            rows.append(f"{g!r}," + ",".join(repr(v) for v in rep.raw[g].values()))
            radar_rows.append(f"{g!r}," + ",".join(repr(v) for v in rep.radar[g].values()))
        save_table_bundle(
            args.out, "gamma_ablation", cfg,
            {"gamma_metrics.csv": "\n".join(rows) + "\n",
             "gamma_radar.csv": "\n".join(radar_rows) + "\n"},
            {"gammas": list(rep.gammas), "n_seeds": rep.n_seeds,
             "raw": {repr(g): rep.raw[g] for g in rep.gammas}},
        )
        for g in rep.gammas:
            print(f"ablate gamma={g} success={rep.raw[g]['success']:.3f} "
                  f"steps={rep.raw[g]['steps']:.2f}")
        print(f"ablate gamma -> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _effective_config(args)
    rep = run_parameter_sweeps(cfg)
    tables = {}
    if args.param in ("theta", "both"):
        rows = ["theta,steps,clicks,returns,lostness"]
        rows += [f"{r['theta']!r},{r['steps']!r},{r['clicks']!r},{r['returns']!r},{r['lostness']!r}"
                 for r in rep.theta_rows]
        tables["sweep_theta.csv"] = "\n".join(rows) + "\n"
    if args.param in ("sigma", "both"):
        rows = ["sigma,steps,clicks,returns,lostness"]
        rows += [f"{r['sigma']!r},{r['steps']!r},{r['clicks']!r},{r['returns']!r},{r['lostness']!r}"
                 for r in rep.sigma_rows]
        tables["sweep_sigma.csv"] = "\n".join(rows) + "\n"
    save_table_bundle(args.out, "sweep", cfg, tables,
                      {"theta": rep.theta_rows, "sigma": rep.sigma_rows})
    for r in rep.theta_rows:
        print(f"sweep theta={r['theta']} steps={r['steps']:.2f} returns={r['returns']:.2f}")
    for r in rep.sigma_rows:
        print(f"sweep sigma={r['sigma']} steps={r['steps']:.2f} lostness={r['lostness']:.3f}")
    return 0


def _cmd_sense(args) -> int:
    cfg = _effective_config(args)
    rep = run_sensitivity(cfg)
    rows = ["param,level,sign,aggregated,d_difficulty,d_hierarchy,d_position,directions_ok"]
    for r in rep.rows:
        rows.append(f"{r['param']},{r['level']!r},{r['sign']!r},{r['aggregated']!r},"
                    f"{r['d_difficulty']!r},{r['d_hierarchy']!r},{r['d_position']!r},"
                    f"{int(r['directions_ok'])}")
    table_rows = ["param," + ",".join(repr(l) for l in cfg.sensitivity.levels)]
    for p, by_level in rep.table.items():
        table_rows.append(p + "," + ",".join(repr(by_level[l]) for l in cfg.sensitivity.levels))
    save_table_bundle(
        args.out, "sensitivity", cfg,
        {"sensitivity_runs.csv": "\n".join(rows) + "\n",
         "sensitivity_table.csv": "\n".join(table_rows) + "\n"},
        {"baseline": rep.baseline, "mean_over_params": rep.mean_over_params()},
    )
    for lvl, v in rep.mean_over_params().items():
        print(f"sense level={lvl} aggregated={v:.4f}")
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _effective_config(args)
    if args.trials is not None or args.method is not None:
        cal = dataclasses.replace(
            cfg.calibration,
            n_trials=args.trials or cfg.calibration.n_trials,
            method=args.method or cfg.calibration.method,
        )
        cfg = dataclasses.replace(cfg, calibration=cal)
    res = calibrate(cfg)
    cols = list(res.trace[0])
    rows = [",".join(cols)]
    rows += [",".join(repr(t[c]) for c in cols) for t in res.trace]
    pareto_rows = ["trial,difficulty_delta_change,hierarchy_relative_change"]
    pareto_rows += [f"{r['trial']},{r['difficulty_delta_change']!r},"
                    f"{r['hierarchy_relative_change']!r}" for r in res.pareto]
    save_table_bundle(
        args.out, "calibration", cfg,
        {"calibration_trace.csv": "\n".join(rows) + "\n",
         "calibration_pareto.csv": "\n".join(pareto_rows) + "\n"},
        {"best_params": res.best_params.to_dict(), "best_objective": res.best_objective,
         "flags": res.flags},
    )
    print(f"calibrate trials={len(res.trace)} best_objective={res.best_objective:.4f} "
          f"best={res.best_params.to_dict()}")
    return 0


def _cmd_report(args) -> int:
    report = regenerate_report(args.bundle)
    cfg = load_config(os.path.join(args.bundle, "config.toml"))
    out = args.out if args.out != "out" else args.bundle
    save_study_report(report, out, cfg)
    for cell in report.cells:
        steps = float(np.mean([r.steps for r in cell.records]))
        print(f"report {report.study} {cell.condition} goal={cell.goal_index} "
              f"mean_steps={steps:.2f}")
    return 0


COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "sense": _cmd_sense,
    "calibrate": _cmd_calibrate,
    "report": _cmd_report,
}


def parse_and_dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # argparse exits itself for --help
        return 0 if e.code in (0, None) else 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
