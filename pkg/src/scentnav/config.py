"""Experiment configuration: one TOML file drives every command.

Sections map onto the component configs: [env], [memory] (flat keys named
after the published parameter table: K_glob, sigma, lambda, b, a_s, a_v, a_c,
theta), [train], [study], plus optional [generation], [ablation], [sweep],
[sensitivity], and [calibration] sections. Missing keys fall back to the
defaults below, so an empty file is a valid configuration.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .agent import TrainConfig
from .env import EnvConfig
from .ia import DEFAULT_PROFILES, GenerationConfig, ScentProfile
from .memory import MemoryParams

MEMORY_KEY_MAP = {
    "K_glob": "k_glob",
    "sigma": "sigma",
    "lambda": "lam",
    "b": "b",
    "a_s": "a_s",
    "a_v": "a_v",
    "a_c": "a_c",
    "theta": "theta",
}

ENV_KEY_MAP = {
    "T_max": "t_max",
    "N_max": "n_max",
    "panel_rows": "panel_rows",
    "reward_success": "reward_success",
    "step_cost": "step_cost",
}


@dataclass
class StudyConfig:
    episodes_per_goal: int = 200
    n_goals: int = 3
    p_left: float = 0.6  # training-time probability that the target sits in the left half
    p_top: float = 0.6


@dataclass
class AblationConfig:
    train_episodes: int = 2400
    episodes_per_goal: int = 100
    n_seeds: int = 5
    gammas: tuple[float, ...] = (0.99, 0.75, 0.50)


@dataclass
class SweepConfig:
    theta_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 3.0)
    sigma_grid: tuple[float, ...] = (0.0, 0.04, 0.08, 0.14)
    episodes_per_goal: int = 100
    train_episodes: int = 3200


@dataclass
class SensitivityConfig:
    levels: tuple[float, ...] = (0.05, 0.10, 0.25)
    episodes_per_goal: int = 120
    train_episodes: int = 3200
    retrain: bool = False  # perturbations re-evaluate the baseline policy by default


@dataclass
class CalibrationConfig:
    n_trials: int = 12
    method: str = "bo"  # or "random"
    w1: float = 1.0
    w2: float = 1.0
    train_episodes: int = 1600
    episodes_per_goal: int = 60


@dataclass
class ExperimentConfig:
    seed: int = 7
    env: EnvConfig = field(default_factory=EnvConfig)
    memory: MemoryParams = field(default_factory=MemoryParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "env": {k: getattr(self.env, v) for k, v in ENV_KEY_MAP.items()},
            "memory": {k: getattr(self.memory, v) for k, v in MEMORY_KEY_MAP.items()},
            "train": self.train.to_dict(),
            "study": vars(self.study).copy(),
            "generation": {
                "rho_h": self.generation.rho_h,
                "depth_profile": self.generation.depth_profile,
                "position_profile": self.generation.position_profile,
                "profiles": {
                    name: {
                        "target": [p.target_low, p.target_high],
                        "distractors": [p.distractor_low, p.distractor_high],
                        "competing": [p.n_competing_min, p.n_competing_max, p.competing_halfwidth],
                    }
                    for name, p in sorted(self.generation.profiles.items())
                },
            },
            "ablation": {**vars(self.ablation), "gammas": list(self.ablation.gammas)},
            "sweep": {
                **vars(self.sweep),
                "theta_grid": list(self.sweep.theta_grid),
                "sigma_grid": list(self.sweep.sigma_grid),
            },
            "sensitivity": {**vars(self.sensitivity), "levels": list(self.sensitivity.levels)},
            "calibration": vars(self.calibration).copy(),
        }

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def _take(d: Mapping[str, Any], keymap: Mapping[str, str]) -> dict:
    return {dest: d[src] for src, dest in keymap.items() if src in d}


def _profiles_from_dict(doc: Mapping[str, Any]) -> dict[str, ScentProfile]:
    profiles = dict(DEFAULT_PROFILES)
    for name, spec in doc.items():
        base = profiles.get(name, ScentProfile(0.5, 0.5, 0.05, 0.3))
        t = spec.get("target", [base.target_low, base.target_high])
        d = spec.get("distractors", [base.distractor_low, base.distractor_high])
        c = spec.get(
            "competing", [base.n_competing_min, base.n_competing_max, base.competing_halfwidth]
        )
        profiles[name] = ScentProfile(
            target_low=float(t[0]), target_high=float(t[1]),
            distractor_low=float(d[0]), distractor_high=float(d[1]),
            n_competing_min=int(c[0]), n_competing_max=int(c[1]),
            competing_halfwidth=float(c[2]),
        )
    return profiles


def config_from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    env_doc = dict(doc.get("env", {}))
    mem_doc = dict(doc.get("memory", {}))
    if "sigma" in env_doc:
        # [env] sigma is an alias for the canonical [memory] sigma
        if "sigma" in mem_doc and env_doc["sigma"] != mem_doc["sigma"]:
            raise ValueError("[env] sigma conflicts with [memory] sigma")
        mem_doc.setdefault("sigma", env_doc.pop("sigma"))
    seed = doc.get("seed", env_doc.pop("seed", 7))

    gen_doc = dict(doc.get("generation", {}))
    generation = GenerationConfig(
        profiles=_profiles_from_dict(gen_doc.get("profiles", {})),
        rho_h=float(gen_doc.get("rho_h", 0.9)),
        depth_profile=gen_doc.get("depth_profile", "competing"),
        position_profile=gen_doc.get("position_profile", "competing"),
        n_max=int(env_doc.get("N_max", 12)),
    )

    def build(cls, section, post=None):
        kwargs = dict(doc.get(section, {}))
        if post:
            kwargs = post(kwargs)
        return cls(**kwargs)

    return ExperimentConfig(
        seed=int(seed),
        env=EnvConfig(**_take(env_doc, ENV_KEY_MAP)),
        memory=MemoryParams(**_take(mem_doc, MEMORY_KEY_MAP)),
        train=build(TrainConfig, "train"),
        study=build(StudyConfig, "study"),
        generation=generation,
        ablation=build(
            AblationConfig, "ablation",
            lambda kw: {**kw, "gammas": tuple(kw.get("gammas", (0.99, 0.75, 0.50)))},
        ),
        sweep=build(
            SweepConfig, "sweep",
            lambda kw: {
                **kw,
                "theta_grid": tuple(kw.get("theta_grid", SweepConfig().theta_grid)),
                "sigma_grid": tuple(kw.get("sigma_grid", SweepConfig().sigma_grid)),
            },
        ),
        sensitivity=build(
            SensitivityConfig, "sensitivity",
            lambda kw: {**kw, "levels": tuple(kw.get("levels", SensitivityConfig().levels))},
        ),
        calibration=build(CalibrationConfig, "calibration"),
    )


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, "rb") as f:
        return config_from_dict(_toml.load(f))


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def config_to_toml(cfg: ExperimentConfig) -> str:
    doc = cfg.to_dict()
    lines = [f"seed = {doc.pop('seed')}", ""]
    gen = doc.pop("generation")
    profiles = gen.pop("profiles")
    for section in ("env", "memory", "train", "study", "ablation", "sweep",
                    "sensitivity", "calibration"):
        lines.append(f"[{section}]")
        for k, v in doc[section].items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    lines.append("[generation]")
    for k, v in gen.items():
        lines.append(f"{k} = {_toml_value(v)}")
    lines.append("")
    for name, p in profiles.items():
        lines.append(f"[generation.profiles.{name}]")
        for k, v in p.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write(config_to_toml(cfg))
