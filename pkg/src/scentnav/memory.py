"""Bounded working memory for navigation cues.

Each inspected option leaves a trace whose strength combines a baseline, the
option's true scent, and square-root-scaled view/click repetition, all decayed
exponentially with the number of steps since the option was last seen:

    M_i = exp(-lambda * dk) * (b + a_s * scent + a_v * sqrt(V) + a_c * sqrt(C))

Traces below the retrieval threshold ``theta`` are forgotten: they stop
contributing to observations until the option is inspected again. The global
panel keeps the Top-K accessible traces ranked by priority (revealed scent
times strength).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

HALF_LIFE_DEFAULT = 5.0


class InaccessibleTrace(ValueError):
    pass


@dataclass
class MemoryParams:
    """Memory and perception parameters (see ``table1_bounds`` for the
    calibration ranges; lam=0 / theta=0 / sigma=0 are the ablation settings)."""

    lam: float = math.log(2.0) / HALF_LIFE_DEFAULT
    b: float = 0.50
    a_s: float = 1.50
    a_v: float = 0.80
    a_c: float = 0.50
    theta: float = 1.0
    k_glob: int = 4
    sigma: float = 0.08

    def __post_init__(self):
        if self.lam < 0.0 or self.lam > 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.theta < 0.0:
            raise ValueError(f"theta must be >= 0, got {self.theta}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.k_glob < 1:
            raise ValueError(f"k_glob must be >= 1, got {self.k_glob}")
        for name in ("b", "a_s", "a_v", "a_c"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")

    @staticmethod
    def table1_bounds() -> dict[str, tuple[float, float]]:
        """Calibration ranges. theta's open-ended range is capped at 2.5."""
        return {
            "k_glob": (3, 5),
            "sigma": (0.01, 0.1),
            "lam": (1e-6, 1.0),
            "b": (0.0, 1.0),
            "a_s": (0.0, 2.0),
            "a_v": (0.0, 1.0),
            "a_c": (0.0, 1.0),
            "theta": (0.0, 2.5),
        }

    def validate_table1(self) -> None:
        """Check every field against its calibration range."""
        for name, (lo, hi) in self.table1_bounds().items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside calibration range [{lo}, {hi}]")

    def no_decay(self) -> "MemoryParams":
        """Ablation variant: decay and the retrieval threshold disabled together."""
        return MemoryParams(
            lam=0.0, b=self.b, a_s=self.a_s, a_v=self.a_v, a_c=self.a_c,
            theta=0.0, k_glob=self.k_glob, sigma=self.sigma,
        )

    def no_noise(self) -> "MemoryParams":
        return MemoryParams(
            lam=self.lam, b=self.b, a_s=self.a_s, a_v=self.a_v, a_c=self.a_c,
            theta=self.theta, k_glob=self.k_glob, sigma=0.0,
        )

    def to_dict(self) -> dict:
        return {
            "lam": self.lam, "b": self.b, "a_s": self.a_s, "a_v": self.a_v,
            "a_c": self.a_c, "theta": self.theta, "k_glob": self.k_glob,
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryParams":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class MemoryTrace:
    node_id: int
    last_seen_step: int
    views: int = 0
    clicks: int = 0
    revealed_scent: Optional[float] = None


class MemoryStore:
    """Per-episode trace map. Owned by a single episode; never shared."""

    def __init__(self):
        self.traces: dict[int, MemoryTrace] = {}
        self.current_step: int = 0

    def __len__(self) -> int:
        return len(self.traces)

    def get(self, node_id: int) -> Optional[MemoryTrace]:
        return self.traces.get(node_id)

    def record_event(self, node_id: int, kind: str, step: int) -> MemoryTrace:
        """Record a view or click of ``node_id`` at ``step``.

        Views create the trace on first contact; both event kinds reset the
        recency clock. Cumulative counters survive forgetting: the threshold
        gates observability only, it never erases history.
        """
        if step < self.current_step:
            raise ValueError(f"step {step} precedes current step {self.current_step}")
        self.current_step = step
        trace = self.traces.get(node_id)
        if kind == "view":
            if trace is None:
                trace = MemoryTrace(node_id=node_id, last_seen_step=step)
                self.traces[node_id] = trace
            trace.views += 1
        elif kind == "click":
            if trace is None:
                raise ValueError(f"click on never-viewed node {node_id}")
            trace.clicks += 1
        else:
            raise ValueError(f"unknown event kind {kind!r}")
        trace.last_seen_step = step
        return trace


def strength(trace: MemoryTrace, now: int, p: MemoryParams, true_scent: float) -> float:
    """Memory strength M_i at step ``now``."""
    dk = now - trace.last_seen_step
    base = (
        p.b
        + p.a_s * true_scent
        + p.a_v * math.sqrt(trace.views)
        + p.a_c * math.sqrt(trace.clicks)
    )
    return math.exp(-p.lam * dk) * base


def accessible(trace: MemoryTrace, now: int, p: MemoryParams, true_scent: float) -> bool:
    """True while the trace clears the retrieval threshold. Checked fresh every step."""
    return strength(trace, now, p, true_scent) >= p.theta


def priority(trace: MemoryTrace, now: int, p: MemoryParams, true_scent: float) -> float:
    """Priority score q_i = revealed scent times strength, for accessible traces."""
    m = strength(trace, now, p, true_scent)
    if m < p.theta:
        raise InaccessibleTrace(f"trace {trace.node_id} below threshold")
    revealed = trace.revealed_scent if trace.revealed_scent is not None else 0.0
    return revealed * m


def select_global_panel(store: MemoryStore, now: int, p: MemoryParams, layout) -> list[int]:
    """Ids of the Top-K accessible traces by priority, best first.

    Ties break on higher strength, then lower node id, so the panel is a
    deterministic function of the store.
    """
    ranked = []
    for nid, trace in store.traces.items():
        scent = layout.scent(nid)
        m = strength(trace, now, p, scent)
        if m < p.theta:
            continue
        revealed = trace.revealed_scent if trace.revealed_scent is not None else 0.0
        ranked.append((-(revealed * m), -m, nid))
    ranked.sort()
    return [nid for _, _, nid in ranked[: p.k_glob]]
