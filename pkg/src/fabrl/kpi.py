"""KPI accounting, reference normalization, ES costs and PPO rewards.

Tardiness convention: per-lot lateness is clamped at zero (a lot ahead of
schedule contributes nothing), measured in lot-hours.  ``td_out`` sums over
completed lots relative to their fab due date, ``td_in`` over work in
progress relative to the step due date of the current step.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

log = logging.getLogger(__name__)

DENOM_EPS = 1e-9

# stable CSV schema for hourly snapshot series
SNAPSHOT_CSV_COLUMNS = ("clock", "wip", "completed", "td_in", "td_out")


@dataclass
class KpiSnapshot:
    t: float
    wip_wafers: int
    completed_wafers_cum: int
    completed_td_cum: float  # cumulative tardiness of completed lots, lot-hours
    tp_24h: int
    td_out_24h: float
    td_in_t: float
    avg_ct: float
    avg_fab_wip: float
    avg_tardiness: float
    std_tardiness: float
    tardy_lot_count: int
    group_wip: dict[str, int] = field(default_factory=dict)


@dataclass
class EpisodeResult:
    seed: int
    horizon: float
    final_td_in: float
    final_td_out: float
    final_tp: int  # completed wafers over the whole episode
    completed_lots: int
    released_lots: int
    tc_violations: int
    snapshots: list[KpiSnapshot]
    decision_log: list
    events_executed: int
    ref_td_in: float | None = None
    ref_td_out: float | None = None
    ref_tp: int | None = None

    @property
    def total_tardiness(self) -> float:
        return self.final_td_in + self.final_td_out

    def has_reference(self) -> bool:
        return self.ref_tp is not None


def lot_tardiness(lot, now: float) -> float:
    """Current tardiness contribution of one lot (>= 0, lot-hours)."""
    if lot.completion_time is not None:
        return max(0.0, lot.completion_time - lot.due_date)
    return max(0.0, now - lot.step_due_dates[lot.current_step])


def tardiness(lots, now: float) -> tuple[float, float]:
    """(td_in, td_out) over an iterable of lots at time ``now``.

    Lots that have not been released yet (release_time > now) are skipped.
    """
    td_in = 0.0
    td_out = 0.0
    for lot in lots:
        if lot.release_time > now:
            continue
        if lot.completion_time is not None:
            td_out += max(0.0, lot.completion_time - lot.due_date)
        else:
            td_in += max(0.0, now - lot.step_due_dates[lot.current_step])
    return td_in, td_out


@dataclass(frozen=True)
class CostConfig:
    alpha1: float = 10.0
    alpha2: float = 10.0
    variant: str = "standard"  # or "industry"

    def __post_init__(self):
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("alpha1 and alpha2 must be > 0")
        if self.variant not in ("standard", "industry"):
            raise ValueError(f"unknown cost variant {self.variant!r}")


def floor_references(episode: EpisodeResult, eps: float = DENOM_EPS) -> EpisodeResult:
    """Clamp zero reference KPIs to ``eps`` so cost ratios stay defined.

    Easy scenarios can finish a reference run with zero tardiness; callers
    that feed cost functions are expected to floor first.  Logs a warning
    whenever a floor actually kicks in.
    """
    for name in ("ref_td_in", "ref_td_out", "ref_tp"):
        v = getattr(episode, name)
        if v is not None and v <= 0:
            log.warning("reference KPI %s is %s; flooring to %g", name, v, eps)
            setattr(episode, name, eps)
    return episode


def cost_es(episode: EpisodeResult, cfg: CostConfig = CostConfig()) -> float:
    """Episode cost for the evolutionary trainer (lower is better).

    The base cost is the completed-lot tardiness ratio to a reference run.
    It is inflated multiplicatively by ``alpha1 * td_in ratio`` when WIP
    tardiness got worse than the reference, and by ``alpha2 * inverse
    throughput ratio`` when fewer wafers completed; both penalties stack
    when both trigger.
    """
    if not episode.has_reference():
        raise ValueError("cost_es needs an episode evaluated against a reference run")
    if episode.ref_td_out <= 0 or episode.ref_td_in <= 0 or episode.ref_tp <= 0:
        raise ValueError(
            "zero reference denominator; floor the reference KPIs first "
            "(see floor_references)"
        )
    c = episode.final_td_out / episode.ref_td_out
    if episode.final_td_in > episode.ref_td_in:
        c *= cfg.alpha1 * episode.final_td_in / episode.ref_td_in
    if episode.final_tp < episode.ref_tp:
        if episode.final_tp <= 0:
            return math.inf
        c *= cfg.alpha2 * episode.ref_tp / episode.final_tp
    return c


def cost_es_industry(episode: EpisodeResult, cfg: CostConfig = CostConfig()) -> float:
    """Adjusted cost for hard scenarios: combined tardiness ratio times the
    squared inverse throughput ratio."""
    if not episode.has_reference():
        raise ValueError("cost_es_industry needs an episode evaluated against a reference run")
    denom = episode.ref_td_out + episode.ref_td_in
    if denom <= 0 or episode.ref_tp <= 0:
        raise ValueError(
            "zero reference denominator; floor the reference KPIs first "
            "(see floor_references)"
        )
    if episode.final_tp <= 0:
        log.warning("episode completed zero wafers; returning infinite cost")
        return math.inf
    tard = (episode.final_td_out + episode.final_td_in) / denom
    return tard * (episode.ref_tp / episode.final_tp) ** 2


def episode_cost(episode: EpisodeResult, cfg: CostConfig) -> float:
    if cfg.variant == "industry":
        return cost_es_industry(episode, cfg)
    return cost_es(episode, cfg)


REWARD_VARIANTS = ("A", "B", "C", "D")


def reward_ppo(window: KpiSnapshot, variant: str = "D") -> float:
    """Windowed reward for the policy-gradient trainer.

    ``A`` is raw throughput, ``B`` the WIP tardiness (a cost-style signal the
    trainer negates), ``C`` and ``D`` are throughput/tardiness ratios that
    differ by a factor of (WIP + tp)^2.  Denominators are floored at 1e-9.
    """
    tp = float(window.tp_24h)
    wip = float(window.wip_wafers)
    td_out = window.td_out_24h
    td_in = window.td_in_t
    if variant == "A":
        return tp
    if variant == "B":
        return td_in
    weighted = max(tp * td_out + wip * td_in, DENOM_EPS)
    if variant == "C":
        return tp * (wip + tp) / weighted
    if variant == "D":
        return tp / (weighted * max(wip + tp, DENOM_EPS))
    raise ValueError(f"unknown reward variant {variant!r}")


def rolling_window(snapshots: list[KpiSnapshot], t: int, span: int = 24) -> KpiSnapshot:
    """Aggregate a window ``(t - span, t]`` out of the hourly snapshot series.

    Completed-wafer counts and completed-lot tardiness are accumulated over
    the span (truncated at episode start); WIP and td_in are taken at ``t``.
    Snapshots are indexed by integer hour, snapshot 0 being the episode
    start.
    """
    if not 0 <= t < len(snapshots):
        raise IndexError(f"no snapshot at hour {t}")
    lo = max(0, t - span)
    end = snapshots[t]
    start = snapshots[lo]
    return replace(
        end,
        tp_24h=end.completed_wafers_cum - start.completed_wafers_cum,
        td_out_24h=end.completed_td_cum - start.completed_td_cum,
    )


def write_snapshot_csv(snapshots: list[KpiSnapshot], path) -> None:
    """Write the stable 5-column hourly series (see SNAPSHOT_CSV_COLUMNS)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_CSV_COLUMNS)
        for s in snapshots:
            w.writerow([s.t, s.wip_wafers, s.completed_wafers_cum, s.td_in_t, s.completed_td_cum])
