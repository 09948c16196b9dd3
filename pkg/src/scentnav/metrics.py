"""Per-episode behavioral metrics and aggregate statistics.

A "page" is a layer instance: the root layer plus every child layer entered
through a Select. Lostness is Smith's disorientation measure over pages
visited versus pages required; everything else counts actions straight off
the episode log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .env import EpisodeLog
from .ia import Layout


class MalformedLog(ValueError):
    pass


class ZeroVisits(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass
class MetricRecord:
    steps: int
    clicks: int
    success: bool
    first_click_correct: bool
    lostness: float
    returns: int
    revisits: int
    steps_before_first_select: int
    condition: str | None = None
    goal_index: int | None = None
    episode: int | None = None

    NUMERIC = (
        "steps", "clicks", "success", "first_click_correct",
        "lostness", "returns", "revisits", "steps_before_first_select",
    )


def _page_sequence(log: EpisodeLog) -> list[tuple[int, ...]]:
    """Layer paths entered, in order, counting re-entries."""
    pages: list[tuple[int, ...]] = [()]
    for rec in log.records:
        if rec.layer_path != pages[-1]:
            pages.append(rec.layer_path)
    return pages


def lostness(log: EpisodeLog, layout: Layout) -> float:
    """Smith's measure: sqrt((N/S - 1)^2 + (R/N - 1)^2).

    S counts page entries including repeats, N distinct pages visited, and R
    the minimum pages needed to reach the target from the root.
    """
    if not log.records:
        raise ZeroVisits("episode log holds no steps")
    pages = _page_sequence(log)
    s = len(pages)
    n = len(set(pages))
    r = layout.depth(log.target)
    return math.sqrt((n / s - 1.0) ** 2 + (r / n - 1.0) ** 2)


def episode_metrics(log: EpisodeLog, layout: Layout) -> MetricRecord:
    """All per-episode metrics, a pure function of (log, layout)."""
    if not log.records:
        raise MalformedLog("episode log holds no steps")
    if log.steps != len(log.records):
        raise MalformedLog(f"header says {log.steps} steps, log holds {len(log.records)}")
    select_id = log.n_max
    return_id = log.n_max + 1

    clicks = 0
    returns = 0
    revisits = 0
    first_click_correct = False
    first_select_idx: int | None = None
    seen: set[int] = set()
    for i, rec in enumerate(log.records):
        if rec.action < log.n_max:
            if rec.focused_id in seen:
                revisits += 1
            seen.add(rec.focused_id)
        elif rec.action == select_id:
            clicks += 1
            if first_select_idx is None:
                first_select_idx = i
                first_click_correct = rec.focused_id in layout.on_path
        elif rec.action == return_id:
            returns += 1
        else:
            raise MalformedLog(f"action id {rec.action} outside the action space")

    return MetricRecord(
        steps=log.steps,
        clicks=clicks,
        success=log.success,
        first_click_correct=first_click_correct,
        lostness=lostness(log, layout),
        returns=returns,
        revisits=revisits,
        steps_before_first_select=first_select_idx if first_select_idx is not None else log.steps,
        condition=log.condition,
        goal_index=log.goal_index,
    )


@dataclass
class AggregateStat:
    n: int
    mean: float
    std: float
    ci_lo: float
    ci_hi: float


def aggregate(records: Sequence[MetricRecord]) -> dict[str, AggregateStat]:
    """Mean, population std, and normal-approximation 95% CI per metric."""
    if not records:
        raise EmptyInput("no records to aggregate")
    out: dict[str, AggregateStat] = {}
    n = len(records)
    for name in MetricRecord.NUMERIC:
        vals = np.array([float(getattr(r, name)) for r in records])
        mean = float(vals.mean())
        std = float(vals.std(ddof=0))
        half = 1.959963984540054 * std / math.sqrt(n)
        out[name] = AggregateStat(n=n, mean=mean, std=std, ci_lo=mean - half, ci_hi=mean + half)
    return out


@dataclass
class CompareResult:
    u: float       # U statistic of group a (pairs where a beats b, ties half)
    p: float       # two-sided, normal approximation with tie correction
    direction: int  # sign of median(a) - median(b)


def compare(group_a: Sequence[float], group_b: Sequence[float]) -> CompareResult:
    """Two-sided Mann-Whitney U with midranks, tie correction, and continuity."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptyInput("both groups must be non-empty")
    n1, n2 = a.size, b.size
    ranks = rankdata(np.concatenate([a, b]))
    r1 = ranks[:n1].sum()
    u_a = r1 - n1 * (n1 + 1) / 2.0

    n = n1 + n2
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = (counts**3 - counts).sum()
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    direction = int(np.sign(np.median(a) - np.median(b)))
    if var <= 0:
        return CompareResult(u=float(u_a), p=1.0, direction=direction)
    num = u_a - n1 * n2 / 2.0
    if num > 0:
        num -= 0.5
    elif num < 0:
        num += 0.5
    z = num / math.sqrt(var)
    p = min(1.0, 2.0 * float(norm.sf(abs(z))))
    return CompareResult(u=float(u_a), p=p, direction=direction)


def metric_values(records: Iterable[MetricRecord], name: str) -> np.ndarray:
    return np.array([float(getattr(r, name)) for r in records])


RESULTS_HEADER = (
    "condition,goal_index,episode,steps,clicks,success,first_click_correct,"
    "lostness,returns,revisits,steps_before_first_select"
)


def records_to_csv(records: Sequence[MetricRecord]) -> str:
    lines = [RESULTS_HEADER]
    for r in records:
        lines.append(
            f"{r.condition or ''},{r.goal_index if r.goal_index is not None else ''},"
            f"{r.episode if r.episode is not None else ''},{r.steps},{r.clicks},"
            f"{int(r.success)},{int(r.first_click_correct)},{r.lostness!r},"
            f"{r.returns},{r.revisits},{r.steps_before_first_select}"
        )
    return "\n".join(lines) + "\n"
