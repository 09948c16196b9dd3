"""Benchmark studies, ablations, sweeps, sensitivity, and calibration.

Every run is a pure function of (config, master seed): layouts, training
episodes, and evaluation rollouts all derive their RNG streams from the seed,
so re-running a command writes identical report bundles. Evaluation episodes
share per-(goal, episode) seeds across the conditions of a study, which pairs
the comparisons and stabilizes small effects.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from . import __version__ as PACKAGE_VERSION
from .agent import (
    CurvePoint,
    Policy,
    PolicySpec,
    TrainConfig,
    curve_to_csv,
    evaluate,
    save_checkpoint,
    train,
)
from .config import ExperimentConfig, config_to_toml, load_config
from .env import EnvConfig, EpisodeLog, NavigationEnv, load_logs, save_logs
from .ia import (
    DEPTH_KINDS,
    DIFFICULTY_KINDS,
    POSITION_KINDS,
    ConditionSpec,
    GenerationConfig,
    Layout,
    generate_benchmark_layout,
    make_menu_layout,
)
from .memory import MemoryParams
from .metrics import (
    AggregateStat,
    MetricRecord,
    aggregate,
    compare,
    episode_metrics,
    metric_values,
    records_to_csv,
)

STUDY_CONDITIONS: dict[str, tuple[str, ...]] = {
    "difficulty": DIFFICULTY_KINDS,
    "depth": DEPTH_KINDS,
    "position": POSITION_KINDS,
}
STUDY_CODES = {"difficulty": 0, "depth": 1, "position": 2}

_U64 = 2**64 - 1


class MissingCondition(KeyError):
    pass


def _seed_int(*parts) -> int:
    """Stable derived seed; string parts hash through crc32."""
    ints = [p & _U64 if isinstance(p, int) else zlib.crc32(p.encode()) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Reference trends and agreement scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceTrends:
    """Read-only reference anchors for trend scoring.

    Numbers are the published model benchmarks this harness reproduces;
    the difficulty effect ships as an ordering only, represented by evenly
    spaced normalized steps.
    """

    difficulty_order: tuple[str, ...] = DIFFICULTY_KINDS
    difficulty_normalized: tuple[float, ...] = (0.0, 0.5, 1.0)
    depth_steps: Mapping[str, float] = field(
        default_factory=lambda: {"two_level_8x8": 13.5, "three_level_4x4x4": 25.6}
    )
    depth_lostness: Mapping[str, float] = field(
        default_factory=lambda: {"two_level_8x8": 0.19, "three_level_4x4x4": 0.28}
    )
    position_steps: Mapping[str, float] = field(
        default_factory=lambda: {"left": 13.12, "right": 13.52, "top": 12.56, "bottom": 13.51}
    )
    position_clicks: Mapping[str, float] = field(
        default_factory=lambda: {"left": 1.12, "right": 1.38}
    )
    position_first_click: Mapping[str, float] = field(
        default_factory=lambda: {"left": 0.904, "right": 0.664}
    )
    provenance: str = "reference-trends/v1 (reported model benchmarks)"

    @property
    def hierarchy_ratio(self) -> float:
        return self.depth_steps["three_level_4x4x4"] / self.depth_steps["two_level_8x8"]


@dataclass
class AgreementScores:
    difficulty_delta_change: float
    hierarchy_relative_change: float
    position_consistency: bool
    trend_distance: float


def agreement_scores(
    difficulty_steps: Mapping[str, float],
    depth_steps: Mapping[str, float],
    position_steps: Mapping[str, float],
    refs: ReferenceTrends = ReferenceTrends(),
) -> AgreementScores:
    """Score model trends against the reference anchors.

    The difficulty score compares adjacent deltas of min-max-normalized mean
    steps against the evenly spaced reference; the hierarchy score compares
    the three-level/two-level step ratio; position consistency requires
    left <= right and top <= bottom. The combined trend distance adds one
    when consistency fails.
    """
    for k in refs.difficulty_order:
        if k not in difficulty_steps:
            raise MissingCondition(f"difficulty condition {k!r} missing")
    for k in DEPTH_KINDS:
        if k not in depth_steps:
            raise MissingCondition(f"depth condition {k!r} missing")
    for k in POSITION_KINDS:
        if k not in position_steps:
            raise MissingCondition(f"position condition {k!r} missing")

    v = np.array([difficulty_steps[k] for k in refs.difficulty_order], dtype=np.float64)
    span = v.max() - v.min()
    vn = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    dm = np.diff(vn)
    dr = np.diff(np.asarray(refs.difficulty_normalized))
    d1 = float(np.mean(np.abs(dm - dr) / np.abs(dr)))

    ratio = depth_steps["three_level_4x4x4"] / depth_steps["two_level_8x8"]
    d2 = float(abs(ratio - refs.hierarchy_ratio))

    consistent = (
        position_steps["left"] <= position_steps["right"]
        and position_steps["top"] <= position_steps["bottom"]
    )
    return AgreementScores(
        difficulty_delta_change=d1,
        hierarchy_relative_change=d2,
        position_consistency=bool(consistent),
        trend_distance=d1 + d2 + (0.0 if consistent else 1.0),
    )


# ---------------------------------------------------------------------------
# Training distribution and evaluation cells
# ---------------------------------------------------------------------------

def policy_spec_from(cfg: ExperimentConfig) -> PolicySpec:
    return PolicySpec(n_max=cfg.env.n_max, panel_rows=cfg.env.panel_rows)


def make_training_factory(
    study: str, cfg: ExperimentConfig, mem: Optional[MemoryParams] = None
) -> Callable[[int], NavigationEnv]:
    """Fresh layouts per episode, target cells drawn with the left/top prior."""
    if study not in STUDY_CONDITIONS:
        raise MissingCondition(f"unknown study {study!r}")
    gen = cfg.generation
    memory = mem if mem is not None else cfg.memory
    p_left, p_top = cfg.study.p_left, cfg.study.p_top
    code = STUDY_CODES[study]
    master = cfg.seed & _U64

    def factory(episode: int) -> NavigationEnv:
        rng = np.random.default_rng(np.random.SeedSequence([master, code, episode, 5]))
        if study == "difficulty":
            kind = DIFFICULTY_KINDS[int(rng.integers(len(DIFFICULTY_KINDS)))]
            profile, shape = gen.profiles[kind], "8x8"
        elif study == "depth":
            shape = "8x8" if int(rng.integers(2)) == 0 else "4x4x4"
            profile = gen.profiles[gen.depth_profile]
        else:
            profile, shape = gen.profiles[gen.position_profile], "8x8"
        col = int(rng.integers(0, 4)) if rng.random() < p_left else int(rng.integers(4, 8))
        row = int(rng.integers(0, 4)) if rng.random() < p_top else int(rng.integers(4, 8))
        layout = make_menu_layout(shape, profile, (row, col), rng, gen.rho_h, gen.n_max)
        return NavigationEnv(layout, memory, cfg.env)

    return factory


def train_study_policy(
    study: str,
    cfg: ExperimentConfig,
    mem: Optional[MemoryParams] = None,
    total_episodes: Optional[int] = None,
    gamma: Optional[float] = None,
    seed_salt: int = 0,
) -> tuple[Policy, list[CurvePoint]]:
    tc = replace(
        cfg.train,
        total_episodes=total_episodes or cfg.train.total_episodes,
        gamma=gamma if gamma is not None else cfg.train.gamma,
        seed=_seed_int(cfg.seed, STUDY_CODES[study], seed_salt, 21),
    )
    factory = make_training_factory(study, cfg, mem)
    return train(factory, policy_spec_from(cfg), tc)


@dataclass
class CellResult:
    condition: str
    goal_index: int
    layout_hash: str
    logs: list[EpisodeLog]
    records: list[MetricRecord]


def evaluate_cell(
    policy: Policy,
    cond: ConditionSpec,
    cfg: ExperimentConfig,
    episodes: int,
    mem: Optional[MemoryParams] = None,
    eval_seed: Optional[int] = None,
) -> CellResult:
    layout = generate_benchmark_layout(cond, cfg.generation)
    seed = eval_seed if eval_seed is not None else _seed_int(cfg.seed, cond.kind, cond.goal_index, 7)
    logs = evaluate(
        policy, layout, None, episodes, seed,
        mem if mem is not None else cfg.memory, cfg.env,
        condition=cond.kind, goal_index=cond.goal_index,
    )
    records = []
    for i, log in enumerate(logs):
        rec = episode_metrics(log, layout)
        rec.episode = i
        records.append(rec)
    return CellResult(
        condition=cond.kind, goal_index=cond.goal_index,
        layout_hash=layout.content_hash(), logs=logs, records=records,
    )


def evaluate_conditions(
    policy: Policy,
    study: str,
    cfg: ExperimentConfig,
    episodes_per_goal: int,
    mem: Optional[MemoryParams] = None,
    eval_salt: int = 0,
    conditions: Optional[Sequence[str]] = None,
) -> list[CellResult]:
    """Evaluate every (condition, goal) cell of a study with paired seeds.

    The per-cell seed depends on the goal and episode index but not on the
    condition, so conditions see common random numbers.
    """
    cells = []
    for kind in conditions or STUDY_CONDITIONS[study]:
        for g in range(cfg.study.n_goals):
            cond = ConditionSpec(kind=kind, goal_index=g, seed=cfg.seed)
            seed = _seed_int(cfg.seed, STUDY_CODES[study], g, 7, eval_salt)
            cells.append(evaluate_cell(policy, cond, cfg, episodes_per_goal, mem, seed))
    return cells


def condition_records(cells: Sequence[CellResult], kind: str) -> list[MetricRecord]:
    out = []
    for c in cells:
        if c.condition == kind:
            out.extend(c.records)
    if not out:
        raise MissingCondition(kind)
    return out


def condition_mean(cells: Sequence[CellResult], kind: str, metric: str) -> float:
    return float(np.mean(metric_values(condition_records(cells, kind), metric)))


def study_means(cells: Sequence[CellResult], kinds: Sequence[str], metric: str) -> dict[str, float]:
    return {k: condition_mean(cells, k, metric) for k in kinds}


def selection_accuracy(cells: Sequence[CellResult], cfg: ExperimentConfig) -> float:
    """Fraction of Select actions landing on the root-to-target path."""
    correct = total = 0
    for cell in cells:
        for log in cell.logs:
            cond = ConditionSpec(cell.condition, cell.goal_index, cfg.seed)
            layout = _layout_cache(cond, cfg.generation)
            for rec in log.records:
                if rec.action == log.n_max:
                    total += 1
                    correct += rec.focused_id in layout.on_path
    return correct / total if total else 0.0


_LAYOUTS: dict[tuple, Layout] = {}


def _layout_cache(cond: ConditionSpec, gen: GenerationConfig) -> Layout:
    key = (cond.kind, cond.goal_index, cond.seed, id(gen))
    if key not in _LAYOUTS:
        _LAYOUTS[key] = generate_benchmark_layout(cond, gen)
    return _LAYOUTS[key]


# ---------------------------------------------------------------------------
# Benchmark studies
# ---------------------------------------------------------------------------

COMPARISON_METRICS = ("steps", "clicks", "lostness", "revisits", "returns")


@dataclass
class StudyReport:
    study: str
    seed: int
    config_digest: str
    cells: list[CellResult]
    curve: Optional[list[CurvePoint]] = None
    extras: dict = field(default_factory=dict)

    @property
    def conditions(self) -> tuple[str, ...]:
        return STUDY_CONDITIONS[self.study]

    def all_records(self) -> list[MetricRecord]:
        out = []
        for c in self.cells:
            out.extend(c.records)
        return out

    def aggregates(self) -> dict[str, dict[str, AggregateStat]]:
        return {k: aggregate(condition_records(self.cells, k)) for k in self.conditions}

    def comparisons(self) -> list[dict]:
        rows = []
        kinds = self.conditions
        for i in range(len(kinds)):
            for j in range(i + 1, len(kinds)):
                a = condition_records(self.cells, kinds[i])
                b = condition_records(self.cells, kinds[j])
                for metric in COMPARISON_METRICS:
                    res = compare(metric_values(a, metric), metric_values(b, metric))
                    rows.append(
                        {
                            "metric": metric, "cond_a": kinds[i], "cond_b": kinds[j],
                            "u": res.u, "p": res.p, "direction": res.direction,
                        }
                    )
        return rows

    def mean_table(self) -> dict[str, dict[str, float]]:
        return {
            k: {m: condition_mean(self.cells, k, m) for m in MetricRecord.NUMERIC}
            for k in self.conditions
        }


def run_benchmark(
    study: str, cfg: ExperimentConfig, policy: Optional[Policy] = None
) -> tuple[StudyReport, Policy]:
    """Train (unless given) and evaluate one study; build its report."""
    if study not in STUDY_CONDITIONS:
        raise MissingCondition(f"unknown study {study!r}")
    curve = None
    if policy is None:
        policy, curve = train_study_policy(study, cfg)
    cells = evaluate_conditions(policy, study, cfg, cfg.study.episodes_per_goal)
    report = StudyReport(
        study=study, seed=cfg.seed, config_digest=cfg.digest(), cells=cells, curve=curve
    )
    refs = ReferenceTrends()
    if study == "depth":
        report.extras["anchors"] = _depth_anchor_check(report, refs)
    if study == "position":
        report.extras["position"] = _position_summary(report, refs)
    return report, policy


def _depth_anchor_check(report: StudyReport, refs: ReferenceTrends) -> dict:
    out = {}
    for metric, ref_map in (("steps", refs.depth_steps), ("lostness", refs.depth_lostness)):
        out[metric] = {}
        for kind, ref in ref_map.items():
            model = condition_mean(report.cells, kind, metric)
            rel = abs(model - ref) / ref
            out[metric][kind] = {
                "model": model, "ref": ref, "rel_err": rel, "within_30pct": rel <= 0.30,
            }
    return out


def _position_summary(report: StudyReport, refs: ReferenceTrends) -> dict:
    means = {m: study_means(report.cells, POSITION_KINDS, m) for m in
             ("steps", "clicks", "first_click_correct")}
    return {
        "means": means,
        "refs": {
            "steps": dict(refs.position_steps),
            "clicks": dict(refs.position_clicks),
            "first_click_correct": dict(refs.position_first_click),
        },
        "directions": {
            "steps_left_lt_right": means["steps"]["left"] < means["steps"]["right"],
            "steps_top_lt_bottom": means["steps"]["top"] < means["steps"]["bottom"],
            "clicks_left_lt_right": means["clicks"]["left"] < means["clicks"]["right"],
            "first_click_left_gt_right": means["first_click_correct"]["left"]
            > means["first_click_correct"]["right"],
        },
    }


# ---------------------------------------------------------------------------
# Trend suite shared by ablations and sensitivity
# ---------------------------------------------------------------------------

@dataclass
class TrendMetrics:
    difficulty_steps: dict[str, float]
    difficulty_clicks: dict[str, float]
    depth_steps: dict[str, float]
    depth_lostness: dict[str, float]
    position_steps: dict[str, float]
    agreement: AgreementScores

    def directions(self) -> dict[str, bool]:
        d = self.difficulty_steps
        s = self.depth_steps
        return {
            "difficulty": d["no_problem"] < d["competing"] < d["low_scent"],
            "depth": s["two_level_8x8"] < s["three_level_4x4x4"],
            "position": self.agreement.position_consistency,
        }


def evaluate_trends(
    policies: Mapping[str, Policy],
    cfg: ExperimentConfig,
    mem: MemoryParams,
    episodes_per_goal: int,
    refs: ReferenceTrends = ReferenceTrends(),
) -> TrendMetrics:
    """Run all three studies with given policies/memory; score the trends."""
    cells = {
        study: evaluate_conditions(policies[study], study, cfg, episodes_per_goal, mem)
        for study in STUDY_CONDITIONS
    }
    difficulty_steps = study_means(cells["difficulty"], DIFFICULTY_KINDS, "steps")
    depth_steps = study_means(cells["depth"], DEPTH_KINDS, "steps")
    position_steps = study_means(cells["position"], POSITION_KINDS, "steps")
    return TrendMetrics(
        difficulty_steps=difficulty_steps,
        difficulty_clicks=study_means(cells["difficulty"], DIFFICULTY_KINDS, "clicks"),
        depth_steps=depth_steps,
        depth_lostness=study_means(cells["depth"], DEPTH_KINDS, "lostness"),
        position_steps=position_steps,
        agreement=agreement_scores(difficulty_steps, depth_steps, position_steps, refs),
    )


def _trend_policies(
    cfg: ExperimentConfig, mem: MemoryParams, train_episodes: int, salt: int = 0
) -> dict[str, Policy]:
    return {
        study: train_study_policy(study, cfg, mem, train_episodes, seed_salt=salt)[0]
        for study in STUDY_CONDITIONS
    }


# ---------------------------------------------------------------------------
# Component ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_decay", "no_noise", "no_decay_no_noise")


@dataclass
class ComponentAblationReport:
    seed: int
    config_digest: str
    trends: dict[str, TrendMetrics]
    flags: dict = field(default_factory=dict)

    def distances(self) -> dict[str, float]:
        return {k: t.agreement.trend_distance for k, t in self.trends.items()}


def _variant_memory(name: str, mem: MemoryParams) -> MemoryParams:
    if name == "full":
        return mem
    if name == "no_decay":
        return mem.no_decay()
    if name == "no_noise":
        return mem.no_noise()
    if name == "no_decay_no_noise":
        return mem.no_decay().no_noise()
    raise ValueError(f"unknown ablation variant {name!r}")


def run_component_ablation(cfg: ExperimentConfig) -> ComponentAblationReport:
    """Remove the decay and noise components, alone and jointly; score trends.

    Each variant trains its own per-study policies under the ablated memory,
    so the comparison reflects what an agent adapted to that regime does.
    """
    refs = ReferenceTrends()
    trends: dict[str, TrendMetrics] = {}
    for name in ABLATION_VARIANTS:
        mem = _variant_memory(name, cfg.memory)
        policies = _trend_policies(cfg, mem, cfg.ablation.train_episodes)
        trends[name] = evaluate_trends(policies, cfg, mem, cfg.ablation.episodes_per_goal, refs)
    report = ComponentAblationReport(
        seed=cfg.seed, config_digest=cfg.digest(), trends=trends
    )
    d = report.distances()
    report.flags = {
        "full_is_best": d["full"] == min(d.values()),
        "worse_component": "no_noise" if d["no_noise"] >= d["no_decay"] else "no_decay",
    }
    return report


# ---------------------------------------------------------------------------
# Discount-factor ablation
# ---------------------------------------------------------------------------

RADAR_METRICS = ("success", "selection_accuracy", "steps", "lostness", "clicks")


@dataclass
class GammaAblationReport:
    seed: int
    config_digest: str
    gammas: tuple[float, ...]
    n_seeds: int
    raw: dict[float, dict[str, float]]          # seed-averaged metric means
    radar: dict[float, dict[str, float]]        # normalized, best value = 1.0

    def metric(self, gamma: float, name: str) -> float:
        return self.raw[gamma][name]


def run_gamma_ablation(cfg: ExperimentConfig) -> GammaAblationReport:
    """Train and evaluate the difficulty suite at each discount factor."""
    per_gamma: dict[float, dict[str, float]] = {}
    for gamma in cfg.ablation.gammas:
        rows = []
        for s in range(cfg.ablation.n_seeds):
            policy, _ = train_study_policy(
                "difficulty", cfg, total_episodes=cfg.ablation.train_episodes,
                gamma=gamma, seed_salt=1000 + s,
            )
            cells = evaluate_conditions(
                policy, "difficulty", cfg, cfg.ablation.episodes_per_goal, eval_salt=s
            )
            records = [r for c in cells for r in c.records]
            rows.append(
                {
                    "success": float(np.mean(metric_values(records, "success"))),
                    "selection_accuracy": selection_accuracy(cells, cfg),
                    "steps": float(np.mean(metric_values(records, "steps"))),
                    "lostness": float(np.mean(metric_values(records, "lostness"))),
                    "clicks": float(np.mean(metric_values(records, "clicks"))),
                }
            )
        per_gamma[gamma] = {
            m: float(np.mean([r[m] for r in rows])) for m in RADAR_METRICS
        }

    radar: dict[float, dict[str, float]] = {g: {} for g in per_gamma}
    for m in RADAR_METRICS:
        vals = {g: per_gamma[g][m] for g in per_gamma}
        if m in ("success", "selection_accuracy"):
            best = max(vals.values())
            for g in vals:
                radar[g][m] = vals[g] / best if best > 0 else 0.0
        else:
            best = min(vals.values())
            for g in vals:
                radar[g][m] = best / vals[g] if vals[g] > 0 else 0.0

    return GammaAblationReport(
        seed=cfg.seed, config_digest=cfg.digest(),
        gammas=tuple(cfg.ablation.gammas), n_seeds=cfg.ablation.n_seeds,
        raw=per_gamma, radar=radar,
    )


# ---------------------------------------------------------------------------
# Parameter sweeps (theta, sigma)
# ---------------------------------------------------------------------------

SWEEP_METRICS = ("steps", "clicks", "returns", "lostness")


@dataclass
class SweepReport:
    seed: int
    config_digest: str
    theta_rows: list[dict]
    sigma_rows: list[dict]


def _sweep_memory_theta(mem: MemoryParams, theta: float) -> MemoryParams:
    # theta = 0 switches decay off entirely: it is the same configuration as
    # the no-decay ablation variant, not merely a zero threshold.
    if theta == 0.0:
        return mem.no_decay()
    return replace(mem, theta=theta)


def run_parameter_sweeps(cfg: ExperimentConfig) -> SweepReport:
    """Evaluate the baseline difficulty policy across theta and sigma grids."""
    policy, _ = train_study_policy(
        "difficulty", cfg, total_episodes=cfg.sweep.train_episodes
    )

    def row_for(mem: MemoryParams, label: str, value: float) -> dict:
        cells = evaluate_conditions(
            policy, "difficulty", cfg, cfg.sweep.episodes_per_goal, mem
        )
        records = [r for c in cells for r in c.records]
        row = {label: value}
        for m in SWEEP_METRICS:
            row[m] = float(np.mean(metric_values(records, m)))
        return row

    theta_rows = [
        row_for(_sweep_memory_theta(cfg.memory, th), "theta", th)
        for th in cfg.sweep.theta_grid
    ]
    sigma_rows = [
        row_for(replace(cfg.memory, sigma=sg), "sigma", sg)
        for sg in cfg.sweep.sigma_grid
    ]
    return SweepReport(
        seed=cfg.seed, config_digest=cfg.digest(),
        theta_rows=theta_rows, sigma_rows=sigma_rows,
    )


# ---------------------------------------------------------------------------
# Sensitivity analysis
# ---------------------------------------------------------------------------

SENSITIVITY_PARAMS = ("k_glob", "sigma", "lam", "b", "a_s", "a_v", "a_c", "theta")


def perturb_params(mem: MemoryParams, name: str, factor: float) -> MemoryParams:
    value = getattr(mem, name)
    if name == "k_glob":
        newv = max(1, int(round(value * factor)))
    else:
        newv = max(0.0, value * factor)
    if name == "lam":
        newv = min(newv, 1.0)
    return replace(mem, **{name: newv})


@dataclass
class SensitivityReport:
    seed: int
    config_digest: str
    baseline: dict
    rows: list[dict]           # one per (param, level, sign)
    table: dict[str, dict[float, float]]  # param -> level -> aggregated score

    def mean_over_params(self) -> dict[float, float]:
        levels = sorted({lvl for scores in self.table.values() for lvl in scores})
        return {
            lvl: float(np.mean([self.table[p][lvl] for p in self.table])) for lvl in levels
        }

    def directions_hold_at(self, level: float) -> bool:
        rows = [r for r in self.rows if r["level"] == level]
        return all(r["directions_ok"] for r in rows)


def run_sensitivity(cfg: ExperimentConfig) -> SensitivityReport:
    """Perturb each memory parameter by the configured levels and rescore.

    Policies stay fixed at their baseline training (perturbations change the
    evaluation environment only, unless ``sensitivity.retrain`` is set);
    deviations of the three agreement measures from baseline are min-max
    rescaled across all runs and averaged into one score per run.
    """
    refs = ReferenceTrends()
    sens = cfg.sensitivity
    policies = _trend_policies(cfg, cfg.memory, sens.train_episodes)
    base = evaluate_trends(policies, cfg, cfg.memory, sens.episodes_per_goal, refs)
    base_m = (
        base.agreement.difficulty_delta_change,
        base.agreement.hierarchy_relative_change,
        base.agreement.position_consistency,
    )

    rows: list[dict] = []
    for name in SENSITIVITY_PARAMS:
        for level in sens.levels:
            for sign in (1.0, -1.0):
                mem = perturb_params(cfg.memory, name, 1.0 + sign * level)
                if sens.retrain:
                    pol = _trend_policies(cfg, mem, sens.train_episodes, salt=17)
                else:
                    pol = policies
                t = evaluate_trends(pol, cfg, mem, sens.episodes_per_goal, refs)
                rows.append(
                    {
                        "param": name,
                        "level": level,
                        "sign": sign,
                        "d_difficulty": abs(
                            t.agreement.difficulty_delta_change - base_m[0]
                        ),
                        "d_hierarchy": abs(
                            t.agreement.hierarchy_relative_change - base_m[1]
                        ),
                        "d_position": float(
                            t.agreement.position_consistency != base_m[2]
                        ),
                        "directions_ok": all(t.directions().values()),
                    }
                )

    # Min-max rescale each deviation column over all runs, then average the
    # three rescaled deviations into one aggregated score per run.
    for col in ("d_difficulty", "d_hierarchy", "d_position"):
        top = max((r[col] for r in rows), default=0.0)
        for r in rows:
            r[f"{col}_scaled"] = r[col] / top if top > 0 else 0.0
    for r in rows:
        r["aggregated"] = float(
            np.mean([r["d_difficulty_scaled"], r["d_hierarchy_scaled"], r["d_position_scaled"]])
        )

    table: dict[str, dict[float, float]] = {}
    for name in SENSITIVITY_PARAMS:
        table[name] = {}
        for level in sens.levels:
            vals = [r["aggregated"] for r in rows if r["param"] == name and r["level"] == level]
            table[name][level] = float(np.mean(vals))

    baseline = {
        "difficulty_delta_change": base_m[0],
        "hierarchy_relative_change": base_m[1],
        "position_consistency": base_m[2],
        "aggregated": 0.0,
    }
    return SensitivityReport(
        seed=cfg.seed, config_digest=cfg.digest(),
        baseline=baseline, rows=rows, table=table,
    )


# ---------------------------------------------------------------------------
# Calibration: scalarized Bayesian optimization over the memory parameters
# ---------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    best_params: MemoryParams
    best_objective: float
    trace: list[dict]
    pareto: list[dict]
    flags: list[str]


def _calibration_objective(
    mem: MemoryParams, cfg: ExperimentConfig, refs: ReferenceTrends
) -> tuple[float, float, float]:
    cal = cfg.calibration
    pol_diff, _ = train_study_policy("difficulty", cfg, mem, cal.train_episodes, seed_salt=31)
    pol_depth, _ = train_study_policy("depth", cfg, mem, cal.train_episodes, seed_salt=31)
    diff_cells = evaluate_conditions(pol_diff, "difficulty", cfg, cal.episodes_per_goal, mem)
    depth_cells = evaluate_conditions(pol_depth, "depth", cfg, cal.episodes_per_goal, mem)
    diff_steps = study_means(diff_cells, DIFFICULTY_KINDS, "steps")
    depth_steps = study_means(depth_cells, DEPTH_KINDS, "steps")

    v = np.array([diff_steps[k] for k in refs.difficulty_order])
    span = v.max() - v.min()
    vn = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    dr = np.diff(np.asarray(refs.difficulty_normalized))
    m1 = float(np.mean(np.abs(np.diff(vn) - dr) / np.abs(dr)))
    m2 = float(abs(depth_steps["three_level_4x4x4"] / depth_steps["two_level_8x8"]
                   - refs.hierarchy_ratio))
    return cal.w1 * m1 + cal.w2 * m2, m1, m2


def _bounds_arrays() -> tuple[list[str], np.ndarray, np.ndarray]:
    bounds = MemoryParams.table1_bounds()
    names = list(bounds)
    lo = np.array([bounds[n][0] for n in names], dtype=np.float64)
    hi = np.array([bounds[n][1] for n in names], dtype=np.float64)
    return names, lo, hi


def _vec_to_params(x: np.ndarray, names: list[str]) -> MemoryParams:
    kw = dict(zip(names, (float(v) for v in x)))
    kw["k_glob"] = int(round(kw["k_glob"]))
    return MemoryParams(**kw)


def _params_to_vec(mem: MemoryParams, names: list[str]) -> np.ndarray:
    return np.array([float(getattr(mem, n)) for n in names], dtype=np.float64)


def _gp_expected_improvement(
    X: np.ndarray, y: np.ndarray, cand: np.ndarray, length_scale: float = 0.3
) -> np.ndarray:
    """EI for minimization under an RBF-kernel GP on unit-cube inputs."""
    y_mean, y_std = y.mean(), y.std() + 1e-12
    yn = (y - y_mean) / y_std
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    K = np.exp(-0.5 * d2 / length_scale**2) + 1e-6 * np.eye(len(X))
    L = cho_factor(K, lower=True)
    alpha = cho_solve(L, yn)
    d2s = ((cand[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    Ks = np.exp(-0.5 * d2s / length_scale**2)
    mu = Ks @ alpha
    v = cho_solve(L, Ks.T)
    var = np.maximum(1.0 - np.einsum("ij,ji->i", Ks, v), 1e-12)
    sd = np.sqrt(var)
    best = yn.min()
    z = (best - mu) / sd
    return (best - mu) * norm.cdf(z) + sd * norm.pdf(z)


def calibrate(cfg: ExperimentConfig) -> CalibrationResult:
    """Search the calibration box for parameters minimizing the trend error.

    Trial 0 always evaluates the published defaults, so the incumbent can
    never be worse than them. Methods: "bo" (GP surrogate with expected
    improvement) or "random" (uniform search, the cross-checking fallback).
    """
    cal = cfg.calibration
    if cal.n_trials < 1:
        raise ValueError("calibration needs at least one trial")
    refs = ReferenceTrends()
    names, lo, hi = _bounds_arrays()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & _U64, 13]))

    X_unit: list[np.ndarray] = []
    ys: list[float] = []
    trace: list[dict] = []
    incumbent_idx = 0

    def eval_point(x_unit: np.ndarray) -> None:
        nonlocal incumbent_idx
        x = lo + x_unit * (hi - lo)
        mem = _vec_to_params(x, names)
        obj, m1, m2 = _calibration_objective(mem, cfg, refs)
        X_unit.append(x_unit)
        ys.append(obj)
        if obj < ys[incumbent_idx]:
            incumbent_idx = len(ys) - 1
        trace.append(
            {
                "trial": len(ys) - 1,
                **{n: float(v) for n, v in zip(names, x)},
                "k_glob": int(round(x[names.index("k_glob")])),
                "difficulty_delta_change": m1,
                "hierarchy_relative_change": m2,
                "objective": obj,
                "incumbent_objective": ys[incumbent_idx],
            }
        )

    defaults_unit = (_params_to_vec(MemoryParams(), names) - lo) / (hi - lo)
    eval_point(np.clip(defaults_unit, 0.0, 1.0))
    n_init = min(max(0, cal.n_trials - 1), 3 if cal.method == "bo" else cal.n_trials - 1)
    for _ in range(n_init):
        eval_point(rng.random(len(names)))

    while len(ys) < cal.n_trials:
        if cal.method == "random":
            eval_point(rng.random(len(names)))
            continue
        cand = rng.random((1024, len(names)))
        near = np.clip(
            X_unit[incumbent_idx] + 0.1 * rng.standard_normal((256, len(names))), 0.0, 1.0
        )
        cand = np.vstack([cand, near])
        ei = _gp_expected_improvement(np.asarray(X_unit), np.asarray(ys), cand)
        eval_point(cand[int(np.argmax(ei))])

    pareto = []
    pts = [(t["difficulty_delta_change"], t["hierarchy_relative_change"], t["trial"]) for t in trace]
    for m1, m2, trial in pts:
        if not any(o1 <= m1 and o2 <= m2 and (o1 < m1 or o2 < m2) for o1, o2, _ in pts):
            pareto.append({"trial": trial, "difficulty_delta_change": m1,
                           "hierarchy_relative_change": m2})

    flags = []
    if incumbent_idx == 0 and cal.n_trials > 1:
        flags.append("budget_exhausted_no_improvement")
    best_x = lo + X_unit[incumbent_idx] * (hi - lo)
    return CalibrationResult(
        best_params=_vec_to_params(best_x, names),
        best_objective=ys[incumbent_idx],
        trace=trace,
        pareto=sorted(pareto, key=lambda r: r["trial"]),
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Report bundles on disk
# ---------------------------------------------------------------------------

def _write(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


def _agg_to_dict(agg: Mapping[str, Mapping[str, AggregateStat]]) -> dict:
    return {
        cond: {
            m: {"n": s.n, "mean": s.mean, "std": s.std, "ci_lo": s.ci_lo, "ci_hi": s.ci_hi}
            for m, s in stats.items()
        }
        for cond, stats in agg.items()
    }


def _plot_means_csv(report: StudyReport) -> str:
    lines = ["condition,metric,mean,std,ci_lo,ci_hi,n"]
    agg = report.aggregates()
    for cond in report.conditions:
        for m, s in agg[cond].items():
            lines.append(f"{cond},{m},{s.mean!r},{s.std!r},{s.ci_lo!r},{s.ci_hi!r},{s.n}")
    return "\n".join(lines) + "\n"


def _comparisons_csv(rows: list[dict]) -> str:
    lines = ["metric,cond_a,cond_b,u,p,direction"]
    for r in rows:
        lines.append(
            f"{r['metric']},{r['cond_a']},{r['cond_b']},{r['u']!r},{r['p']!r},{r['direction']}"
        )
    return "\n".join(lines) + "\n"


def save_study_report(
    report: StudyReport, outdir: str, cfg: ExperimentConfig, policy: Optional[Policy] = None
) -> None:
    """Write the full bundle: results, aggregates, plot data, logs, manifest."""
    os.makedirs(outdir, exist_ok=True)
    os.makedirs(os.path.join(outdir, "logs"), exist_ok=True)

    records = []
    for cell in report.cells:
        records.extend(cell.records)
        save_logs(
            os.path.join(outdir, "logs", f"{cell.condition}_g{cell.goal_index}.jsonl"),
            cell.logs,
        )
    _write(os.path.join(outdir, "results.csv"), records_to_csv(records))
    _write(os.path.join(outdir, "plot_condition_means.csv"), _plot_means_csv(report))
    _write(os.path.join(outdir, "comparisons.csv"), _comparisons_csv(report.comparisons()))
    if report.curve is not None:
        _write(os.path.join(outdir, "learning_curve.csv"), curve_to_csv(report.curve))

    agg_doc = {
        "study": report.study,
        "aggregates": _agg_to_dict(report.aggregates()),
        "extras": report.extras,
    }
    _write(os.path.join(outdir, "aggregate.json"), json.dumps(agg_doc, indent=1, sort_keys=True))

    manifest = {
        "kind": "study",
        "study": report.study,
        "seed": report.seed,
        "config_digest": report.config_digest,
        "version": PACKAGE_VERSION,
        "cells": [
            {
                "condition": c.condition,
                "goal_index": c.goal_index,
                "layout_hash": c.layout_hash,
                "episodes": len(c.logs),
            }
            for c in report.cells
        ],
    }
    _write(os.path.join(outdir, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
    _write(os.path.join(outdir, "config.toml"), config_to_toml(cfg))
    if policy is not None:
        save_checkpoint(os.path.join(outdir, "checkpoint.ckpt"), policy,
                        extra={"study": report.study, "seed": report.seed})


def regenerate_report(outdir: str) -> StudyReport:
    """Rebuild a study report purely from a bundle's stored logs and config."""
    with open(os.path.join(outdir, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("kind") != "study":
        raise ValueError("only study bundles can be regenerated from logs")
    cfg = load_config(os.path.join(outdir, "config.toml"))
    cells = []
    for cell_info in manifest["cells"]:
        kind, g = cell_info["condition"], cell_info["goal_index"]
        cond = ConditionSpec(kind=kind, goal_index=g, seed=manifest["seed"])
        layout = generate_benchmark_layout(cond, cfg.generation)
        if layout.content_hash() != cell_info["layout_hash"]:
            raise ValueError(f"layout hash mismatch for {kind} goal {g}")
        logs = load_logs(os.path.join(outdir, "logs", f"{kind}_g{g}.jsonl"))
        records = []
        for i, log in enumerate(logs):
            rec = episode_metrics(log, layout)
            rec.episode = i
            records.append(rec)
        cells.append(
            CellResult(condition=kind, goal_index=g,
                       layout_hash=cell_info["layout_hash"], logs=logs, records=records)
        )
    report = StudyReport(
        study=manifest["study"], seed=manifest["seed"],
        config_digest=manifest["config_digest"], cells=cells,
    )
    refs = ReferenceTrends()
    if report.study == "depth":
        report.extras["anchors"] = _depth_anchor_check(report, refs)
    if report.study == "position":
        report.extras["position"] = _position_summary(report, refs)
    return report


def save_table_bundle(outdir: str, kind: str, cfg: ExperimentConfig,
                      tables: Mapping[str, str], summary: dict) -> None:
    """Shared writer for ablation, sweep, sensitivity and calibration outputs."""
    os.makedirs(outdir, exist_ok=True)
    for name, text in tables.items():
        _write(os.path.join(outdir, name), text)
    _write(os.path.join(outdir, "summary.json"), json.dumps(summary, indent=1, sort_keys=True))
    manifest = {
        "kind": kind,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "version": PACKAGE_VERSION,
    }
    _write(os.path.join(outdir, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
    _write(os.path.join(outdir, "config.toml"), config_to_toml(cfg))
