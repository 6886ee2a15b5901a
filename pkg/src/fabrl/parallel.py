"""Process pool for candidate evaluation and rollout collection.

Each worker process owns isolated simulator instances; the orchestrator
ships immutable inputs (flat parameter vectors, normalizer snapshots,
seeds) and collects results keyed by candidate index, so iteration
results never depend on worker scheduling order.  ``workers=1`` runs
everything in-process, which keeps tests and small jobs simple.
"""

from __future__ import annotations

import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dispatchers import PolicyDispatcher
from .fabmodel import FabModel
from .kpi import CostConfig, episode_cost, floor_references, reward_ppo, rolling_window
from .policy import ArchDescriptor, PolicyParams, RunningStats
from .simkernel import ReferenceSeries, run_episode


def norm_state(stats: RunningStats) -> tuple[float, np.ndarray, np.ndarray]:
    return stats.count, stats.mean.copy(), stats.m2.copy()


def norm_from_state(dim: int, state, frozen: bool) -> RunningStats:
    count, mean, m2 = state
    return RunningStats(dim=dim, count=count, mean=mean.copy(), m2=m2.copy(), frozen=frozen)


@dataclass
class EvalContext:
    """Everything a worker needs to evaluate episodes, shipped once."""

    scenarios: dict[str, FabModel]
    horizon: float
    baseline_rule: str
    controlled: frozenset[str]
    desc: ArchDescriptor
    cost_cfg: CostConfig = field(default_factory=CostConfig)
    references: dict[tuple[str, int], ReferenceSeries] = field(default_factory=dict)
    reward_variant: str = "D"
    reward_span: int = 24
    reward_sign: float = 1.0


_CTX: EvalContext | None = None
_REF_CACHE: dict = {}


def _init_worker(blob: bytes) -> None:
    global _CTX, _REF_CACHE
    _CTX = pickle.loads(blob)
    _REF_CACHE = {}


def _get_reference(scenario: str, seed: int) -> ReferenceSeries:
    ctx = _CTX
    key = (scenario, seed)
    if key in ctx.references:
        return ctx.references[key]
    if key not in _REF_CACHE:
        from .dispatchers import HeuristicDispatcher

        res = run_episode(
            ctx.scenarios[scenario],
            HeuristicDispatcher(ctx.baseline_rule),
            seed,
            ctx.horizon,
        )
        _REF_CACHE[key] = ReferenceSeries.from_result(res)
    return _REF_CACHE[key]


def eval_candidate(task):
    """Evaluate one ES candidate over its (scenario, seed) pairs.

    Returns (index, mean cost, per-episode KPI tuples, normalizer delta).
    """
    idx, theta, lot_state, pairs, frozen = task
    ctx = _CTX
    params = PolicyParams(theta, ctx.desc)
    base = norm_from_state(len(lot_state[1]), lot_state, frozen=True)
    delta = RunningStats(dim=base.dim)
    costs = []
    kpis = []
    for scenario, seed in pairs:
        disp = PolicyDispatcher(
            params=params,
            controlled=ctx.controlled,
            fallback_rule=ctx.baseline_rule,
            base_norm=base,
            mode="es",
            frozen=frozen,
        )
        res = run_episode(
            ctx.scenarios[scenario],
            disp,
            seed,
            ctx.horizon,
            reference=_get_reference(scenario, seed),
        )
        floor_references(res)
        costs.append(episode_cost(res, ctx.cost_cfg))
        kpis.append(
            (
                scenario,
                seed,
                res.total_tardiness,
                res.final_tp,
                res.ref_td_in + res.ref_td_out,
                res.ref_tp,
            )
        )
        if not frozen:
            delta.merge(disp.local_norm)
    return idx, float(np.mean(costs)), kpis, norm_state(delta)


def collect_rollout(task):
    """Run one PPO episode and return its reward-annotated transitions."""
    idx, theta, lot_state, fab_state, scenario, seed = task
    ctx = _CTX
    params = PolicyParams(theta, ctx.desc)
    base = norm_from_state(len(lot_state[1]), lot_state, frozen=True)
    fab_base = norm_from_state(len(fab_state[1]), fab_state, frozen=True)
    disp = PolicyDispatcher(
        params=params,
        controlled=ctx.controlled,
        fallback_rule=ctx.baseline_rule,
        base_norm=base,
        fab_base_norm=fab_base,
        mode="ppo",
    )
    reference = _get_reference(scenario, seed)
    res = run_episode(ctx.scenarios[scenario], disp, seed, ctx.horizon, reference=reference)
    floor_references(res)
    last_hour = len(res.snapshots) - 1
    for tr in res.decision_log:
        hour = min(int(np.ceil(tr.time)), last_hour)
        window = rolling_window(res.snapshots, hour, ctx.reward_span)
        tr.reward = ctx.reward_sign * reward_ppo(window, ctx.reward_variant)
    kpis = (
        scenario,
        seed,
        res.total_tardiness,
        res.final_tp,
        res.ref_td_in + res.ref_td_out,
        res.ref_tp,
    )
    return idx, res.decision_log, kpis, norm_state(disp.local_norm), norm_state(disp.fab_local_norm)


class EpisodeEvaluator:
    """Maps evaluation tasks over a worker pool (or inline for workers=1)."""

    def __init__(self, ctx: EvalContext, workers: int = 1):
        if workers < 1:
            raise ValueError("worker count must be >= 1")
        self.ctx = ctx
        self.workers = workers
        self._pool = None
        if workers > 1:
            blob = pickle.dumps(ctx)
            self._pool = ProcessPoolExecutor(
                max_workers=workers, initializer=_init_worker, initargs=(blob,)
            )
        else:
            _init_worker(pickle.dumps(ctx))

    def map(self, fn, tasks):
        if self._pool is None:
            return [fn(t) for t in tasks]
        return list(self._pool.map(fn, tasks, chunksize=1))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
