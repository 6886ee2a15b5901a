"""Discrete-event engine executing one fab episode.

Events are executed in (time, insertion sequence) order, which makes every
run bit-reproducible for a given model, dispatcher parameterization, seed,
and horizon.  All randomness flows through named streams derived from the
episode seed (release/due dates, breakdowns, processing, policy), so a
change to the policy never perturbs the breakdown pattern.

Machine failures are pre-sampled per tool as alternating up/down intervals.
A breakdown during processing suspends the work: the completion event is
scheduled by walking the down intervals so that processing only accrues
during up time (the lot is never aborted).  Setup changes are folded into
the busy period that precedes processing.
"""

from __future__ import annotations

import heapq
import itertools
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .fabmodel import FabModel, Lot, Tool, assign_due_dates
from .kpi import EpisodeResult, KpiSnapshot

# event kinds
RELEASE = 0
TOOL_FREE = 1
PROCESS_DONE = 2
BREAKDOWN = 3
REPAIR = 4
KPI_TICK = 5

EVENT_NAMES = {
    RELEASE: "release",
    TOOL_FREE: "tool_free",
    PROCESS_DONE: "process_done",
    BREAKDOWN: "breakdown",
    REPAIR: "repair",
    KPI_TICK: "kpi_tick",
}

IDLE = "idle"
SETUP = "setup"
PROCESSING = "processing"
DOWN = "down"


class DispatchContractError(RuntimeError):
    """A dispatcher returned a lot that is not eligible (policy bug)."""


class CapacityError(RuntimeError):
    """A configured memory budget was exceeded."""


@dataclass
class MachineState:
    tool: Tool
    status: str = IDLE
    current_batch: tuple[int, ...] = ()
    busy_until: float = 0.0
    setup_family: str | None = None
    # sorted, non-overlapping down intervals over the whole horizon
    down_intervals: list[tuple[float, float]] = field(default_factory=list)

    def is_down_at(self, t: float) -> bool:
        for d, u in self.down_intervals:
            if d <= t < u:
                return True
            if d > t:
                break
        return False

    def finish_time(self, start: float, work: float) -> float:
        """Absolute completion time for ``work`` hours starting at ``start``,
        accruing only outside down intervals."""
        t = start
        remaining = work
        for d, u in self.down_intervals:
            if u <= t:
                continue
            if d <= t:
                t = u  # currently down; wait for repair
                continue
            gap = d - t
            if remaining <= gap:
                return t + remaining
            remaining -= gap
            t = u
        return t + remaining


@dataclass
class Decision:
    """What a dispatcher wants a freed tool to run next.

    ``batch`` lists every lot to load including the primary selection; for
    non-batch tools it is just ``(lot_id,)``.
    """

    lot_id: int
    batch: tuple[int, ...]

    @classmethod
    def single(cls, lot_id: int) -> "Decision":
        return cls(lot_id=lot_id, batch=(lot_id,))


class Dispatcher(Protocol):
    def decide(self, ctx: "DecisionContext") -> Decision | None:
        """Pick a lot (and co-batched lots) from the eligible queue.

        Returning ``None`` defers: the tool stays idle until the next
        arrival, tool release, or hourly tick.
        """
        ...


@dataclass
class DecisionContext:
    sim: "Simulation"
    tool: Tool
    group_id: str
    eligible: list[int]  # lot ids, arrival order
    now: float

    @property
    def model(self) -> FabModel:
        return self.sim.model

    @property
    def lots(self) -> dict[int, Lot]:
        return self.sim.lots

    @property
    def policy_rng(self) -> np.random.Generator:
        return self.sim.rng_policy


def sample_breakdowns(
    tool: Tool, rng: np.random.Generator, horizon: float
) -> list[tuple[float, float]]:
    """Alternating up/down intervals for one tool, truncated at the horizon.

    Up durations are Exp(mtbf), repair durations Exp(mttr); zero-length
    downs (mttr == 0 or a zero draw) are dropped.
    """
    intervals: list[tuple[float, float]] = []
    t = 0.0
    while True:
        t += rng.exponential(tool.mtbf_hours)
        if t >= horizon:
            return intervals
        down = rng.exponential(tool.mttr_hours) if tool.mttr_hours > 0 else 0.0
        up_at = min(t + down, horizon)
        if up_at > t:
            intervals.append((t, up_at))
        t = up_at


def eligible_queue(sim: "Simulation", tool: Tool) -> list[int]:
    """Lots in the tool's work-center queue whose current step can run on
    this tool (dedication filter, queue order preserved)."""
    out = []
    for lot_id in sim.queues[tool.group_id]:
        lot = sim.lots[lot_id]
        step = sim.model.step_of(lot)
        if tool.id in step.processing_time_hours:
            out.append(lot_id)
    return out


def form_batch(
    selection: int,
    queue: list[int],
    scores: dict[int, float],
    max_size: int,
    min_size: int,
    compat_key: Callable[[int], object],
) -> tuple[int, ...]:
    """Selection plus the highest-scoring batch-compatible lots.

    Fills up to ``max_size``; if fewer than ``min_size`` lots are available
    the batch degenerates to the selection alone.  Score ties pick the lower
    lot id.
    """
    key = compat_key(selection)
    mates = [lid for lid in queue if lid != selection and compat_key(lid) == key]
    mates.sort(key=lambda lid: (-scores[lid], lid))
    batch = [selection] + mates[: max_size - 1]
    if len(batch) < min_size:
        return (selection,)
    return tuple(batch)


@dataclass
class ReferenceSeries:
    """Hourly KPI series of a baseline run, used for normalization."""

    snapshots: list[KpiSnapshot]
    final_td_in: float
    final_td_out: float
    final_tp: int
    horizon: float

    @classmethod
    def from_result(cls, result: EpisodeResult) -> "ReferenceSeries":
        return cls(
            snapshots=result.snapshots,
            final_td_in=result.final_td_in,
            final_td_out=result.final_td_out,
            final_tp=result.final_tp,
            horizon=result.horizon,
        )

    def at(self, t: float) -> KpiSnapshot:
        idx = min(int(t), len(self.snapshots) - 1)
        return self.snapshots[idx]


class Simulation:
    """One episode's mutable world: clock, event queue, queues, machines."""

    def __init__(
        self,
        model: FabModel,
        dispatcher: Dispatcher,
        seed: int,
        horizon: float,
        reference: ReferenceSeries | None = None,
        check_invariants: bool = False,
        collect_trace: bool = False,
    ):
        if horizon > model.horizon_hours:
            raise ValueError(
                f"horizon {horizon} exceeds model horizon {model.horizon_hours}"
            )
        if reference is not None and reference.horizon < horizon:
            raise ValueError("reference series does not cover the episode horizon")
        self.model = model
        self.dispatcher = dispatcher
        self.seed = seed
        self.horizon = horizon
        self.reference = reference
        self.check_invariants = check_invariants
        self.trace: list[tuple[float, int, int]] | None = [] if collect_trace else None

        ss = np.random.SeedSequence(entropy=seed)
        kids = ss.spawn(4)
        self.rng_release = np.random.default_rng(kids[0])
        self.rng_breakdown = np.random.default_rng(kids[1])
        self.rng_processing = np.random.default_rng(kids[2])  # reserved
        self.rng_policy = np.random.default_rng(kids[3])

        self.clock = 0.0
        self._events: list[tuple[float, int, int, object]] = []
        self._seq = itertools.count()
        self.queues: dict[str, list[int]] = {g.id: [] for g in model.tool_groups}
        self.machines: dict[str, MachineState] = {}
        self.lots: dict[int, Lot] = {}
        self.events_executed = 0

        # KPI accumulators
        self.wip_wafers = 0
        self.released_lots = 0
        self.completed_wafers = 0
        self.completed_lots = 0
        self.completed_td_total = 0.0
        self.completed_td_sumsq = 0.0
        self.completed_tardy = 0
        self.completed_ct_sum = 0.0
        self.completion_times: list[float] = []
        self.completion_wafers_cum: list[int] = []
        self.completion_td_cum: list[float] = []
        self.group_wip: dict[str, int] = {g.id: 0 for g in model.tool_groups}
        self.wip_sample_sum = 0.0
        self.wip_sample_count = 0
        self.tc_violations = 0
        self.snapshots: list[KpiSnapshot] = []
        self._wip_ids: set[int] = set()

        self._init_events()

    # -- setup ---------------------------------------------------------------

    def _push(self, time: float, kind: int, payload) -> None:
        heapq.heappush(self._events, (time, next(self._seq), kind, payload))

    def _init_events(self) -> None:
        for lot_id, rel in enumerate(self.model.release_schedule):
            if rel.time_hours > self.horizon:
                break
            lot = Lot(
                id=lot_id,
                product_id=rel.product_id,
                priority=rel.priority,
                wafer_count=rel.wafers,
                release_time=rel.time_hours,
            )
            assign_due_dates(self.model, lot, self.rng_release)
            self.lots[lot_id] = lot
            self._push(rel.time_hours, RELEASE, lot_id)

        for g in self.model.tool_groups:
            for tool in g.tools:
                ms = MachineState(tool=tool, setup_family=tool.setup_state)
                ms.down_intervals = sample_breakdowns(tool, self.rng_breakdown, self.horizon)
                self.machines[tool.id] = ms
                for d, u in ms.down_intervals:
                    self._push(d, BREAKDOWN, tool.id)
                    self._push(u, REPAIR, tool.id)

        self.snapshots.append(self._empty_snapshot(0.0))
        t = 1.0
        while t <= self.horizon:
            self._push(t, KPI_TICK, None)
            t += 1.0

    def _empty_snapshot(self, t: float) -> KpiSnapshot:
        return KpiSnapshot(
            t=t,
            wip_wafers=0,
            completed_wafers_cum=0,
            completed_td_cum=0.0,
            tp_24h=0,
            td_out_24h=0.0,
            td_in_t=0.0,
            avg_ct=0.0,
            avg_fab_wip=0.0,
            avg_tardiness=0.0,
            std_tardiness=0.0,
            tardy_lot_count=0,
            group_wip={g: 0 for g in self.group_wip},
        )

    # -- main loop -----------------------------------------------------------

    def run(self) -> EpisodeResult:
        handlers = {
            RELEASE: self._on_release,
            TOOL_FREE: self._on_tool_free,
            PROCESS_DONE: self._on_process_done,
            BREAKDOWN: self._on_breakdown,
            REPAIR: self._on_repair,
            KPI_TICK: self._on_tick,
        }
        while self._events:
            time, seq, kind, payload = self._events[0]
            if time > self.horizon:
                break
            heapq.heappop(self._events)
            assert time >= self.clock, "event time went backwards"
            self.clock = time
            if self.trace is not None:
                self.trace.append((time, seq, kind))
            handlers[kind](payload)
            self.events_executed += 1
            if self.check_invariants:
                self._assert_invariants()

        self.clock = self.horizon
        return self._result()

    def _assert_invariants(self) -> None:
        in_queue = sum(len(q) for q in self.queues.values())
        in_process = sum(len(m.current_batch) for m in self.machines.values())
        completed = self.completed_lots
        assert self.released_lots == in_queue + in_process + completed, (
            f"lot conservation violated at t={self.clock}: released={self.released_lots}"
            f" queue={in_queue} process={in_process} done={completed}"
        )
        for m in self.machines.values():
            assert (len(m.current_batch) > 0) == (m.status in (SETUP, PROCESSING))
            g = self.model.groups_by_id[m.tool.group_id]
            cap = g.batching.max_size if g.batching else 1
            assert len(m.current_batch) <= cap

    # -- event handlers ------------------------------------------------------

    def _on_release(self, lot_id: int) -> None:
        lot = self.lots[lot_id]
        lot.current_step = 0
        lot.step_arrival_time = self.clock
        self.released_lots += 1
        self.wip_wafers += lot.wafer_count
        self._wip_ids.add(lot_id)
        first_group = self.model.route_of(lot.product_id).steps[0].tool_group_id
        self.queues[first_group].append(lot_id)
        self.group_wip[first_group] += lot.wafer_count
        self._try_dispatch(first_group)

    def _on_tool_free(self, tool_id: str) -> None:
        # dispatch retry trigger; a no-op if the tool got re-busied inline
        ms = self.machines[tool_id]
        if ms.status == IDLE:
            self._try_dispatch(ms.tool.group_id)

    def _on_process_done(self, tool_id: str) -> None:
        ms = self.machines[tool_id]
        batch = ms.current_batch
        touched: list[str] = []
        for lot_id in batch:
            lot = self.lots[lot_id]
            self.group_wip[ms.tool.group_id] -= lot.wafer_count
            route = self.model.route_of(lot.product_id)
            lot.current_step += 1
            if lot.current_step >= len(route.steps):
                self._complete_lot(lot)
            else:
                lot.step_arrival_time = self.clock
                gid = route.steps[lot.current_step].tool_group_id
                self.queues[gid].append(lot_id)
                self.group_wip[gid] += lot.wafer_count
                touched.append(gid)
        ms.current_batch = ()
        ms.status = IDLE
        self._push(self.clock, TOOL_FREE, tool_id)
        for gid in dict.fromkeys(touched):
            self._try_dispatch(gid)

    def _complete_lot(self, lot: Lot) -> None:
        lot.completion_time = self.clock
        self._wip_ids.discard(lot.id)
        self.wip_wafers -= lot.wafer_count
        self.completed_lots += 1
        self.completed_wafers += lot.wafer_count
        td = max(0.0, self.clock - lot.due_date)
        self.completed_td_total += td
        self.completed_td_sumsq += td * td
        if td > 0:
            self.completed_tardy += 1
        self.completed_ct_sum += self.clock - lot.release_time
        self.completion_times.append(self.clock)
        self.completion_wafers_cum.append(self.completed_wafers)
        self.completion_td_cum.append(self.completed_td_total)

    def _on_breakdown(self, tool_id: str) -> None:
        ms = self.machines[tool_id]
        if ms.status == IDLE:
            ms.status = DOWN
        # while busy the delay is already built into the completion time

    def _on_repair(self, tool_id: str) -> None:
        ms = self.machines[tool_id]
        if ms.status == DOWN:
            ms.status = IDLE
            self._try_dispatch(ms.tool.group_id)

    def _on_tick(self, _payload) -> None:
        for gid in self.queues:
            self._bounce_expired(gid)
        for gid in self.queues:
            self._try_dispatch(gid)
        self._record_snapshot()

    # -- dispatching ---------------------------------------------------------

    def _bounce_expired(self, group_id: str) -> None:
        """Send lots whose step wait exceeded the time constraint back one
        step (the previous operation must be repeated)."""
        queue = self.queues[group_id]
        expired = []
        for lot_id in queue:
            lot = self.lots[lot_id]
            step = self.model.step_of(lot)
            tc = step.time_constraint_hours
            if tc is not None and self.clock - lot.step_arrival_time > tc:
                expired.append(lot_id)
        for lot_id in expired:
            lot = self.lots[lot_id]
            queue.remove(lot_id)
            self.group_wip[group_id] -= lot.wafer_count
            lot.current_step -= 1
            lot.step_arrival_time = self.clock
            prev_gid = self.model.step_of(lot).tool_group_id
            self.queues[prev_gid].append(lot_id)
            self.group_wip[prev_gid] += lot.wafer_count
            self.tc_violations += 1

    def _try_dispatch(self, group_id: str) -> None:
        self._bounce_expired(group_id)
        group = self.model.groups_by_id[group_id]
        if not self.queues[group_id]:
            return
        for tool in group.tools:
            ms = self.machines[tool.id]
            if ms.status != IDLE or ms.is_down_at(self.clock):
                continue
            elig = eligible_queue(self, tool)
            if not elig:
                continue
            ctx = DecisionContext(
                sim=self, tool=tool, group_id=group_id, eligible=elig, now=self.clock
            )
            decision = self.dispatcher.decide(ctx)
            if decision is None:
                continue
            self._validate_decision(decision, elig, group)
            self._start_processing(ms, decision.batch)
            if not self.queues[group_id]:
                break

    def _validate_decision(self, decision: Decision, elig: list[int], group) -> None:
        elig_set = set(elig)
        if decision.lot_id not in elig_set:
            raise DispatchContractError(
                f"dispatcher selected lot {decision.lot_id} not in eligible queue"
            )
        if decision.lot_id not in decision.batch:
            raise DispatchContractError("batch must contain the selected lot")
        if len(set(decision.batch)) != len(decision.batch):
            raise DispatchContractError("batch contains duplicate lots")
        cap = group.batching.max_size if group.batching else 1
        if len(decision.batch) > cap:
            raise DispatchContractError(
                f"batch of {len(decision.batch)} exceeds max size {cap}"
            )
        sel = self.lots[decision.lot_id]
        sel_step = self.model.step_of(sel)
        if len(decision.batch) > 1 and not sel_step.batch_eligible:
            raise DispatchContractError("co-batching at a non-batch-eligible step")
        sel_key = self.model.batch_family(group.id, sel.product_id, sel.current_step)
        for lot_id in decision.batch:
            if lot_id not in elig_set:
                raise DispatchContractError(f"batched lot {lot_id} not in eligible queue")
            if lot_id == decision.lot_id:
                continue
            lot = self.lots[lot_id]
            step = self.model.step_of(lot)
            if not step.batch_eligible:
                raise DispatchContractError(f"lot {lot_id} step is not batch-eligible")
            key = self.model.batch_family(group.id, lot.product_id, lot.current_step)
            if key != sel_key:
                raise DispatchContractError(
                    f"lot {lot_id} is not batch-compatible with {decision.lot_id}"
                )

    def _start_processing(self, ms: MachineState, batch: tuple[int, ...]) -> None:
        tool = ms.tool
        queue = self.queues[tool.group_id]
        proc = 0.0
        setup = 0.0
        for lot_id in batch:
            lot = self.lots[lot_id]
            step = self.model.step_of(lot)
            proc = max(proc, step.processing_time_hours[tool.id])
            setup = max(setup, tool.setup_duration(ms.setup_family, step.setup_id))
            queue.remove(lot_id)
        first_step = self.model.step_of(self.lots[batch[0]])
        if first_step.setup_id is not None:
            ms.setup_family = first_step.setup_id
        ms.status = SETUP if setup > 0 else PROCESSING
        ms.current_batch = tuple(batch)
        done_at = ms.finish_time(self.clock, setup + proc)
        ms.busy_until = done_at
        self._push(done_at, PROCESS_DONE, tool.id)

    # -- KPI -----------------------------------------------------------------

    def _wip_tardiness(self, t: float) -> tuple[float, int, float]:
        """(td_in, tardy count, sum of squares) over current WIP."""
        td_in = 0.0
        tardy = 0
        sumsq = 0.0
        for lot_id in sorted(self._wip_ids):
            lot = self.lots[lot_id]
            late = t - lot.step_due_dates[lot.current_step]
            if late > 0:
                td_in += late
                tardy += 1
                sumsq += late * late
        return td_in, tardy, sumsq

    def _record_snapshot(self) -> None:
        t = self.clock
        td_in, wip_tardy, wip_sumsq = self._wip_tardiness(t)
        self.wip_sample_sum += self.wip_wafers
        self.wip_sample_count += 1
        lo = bisect_right(self.completion_times, t - 24.0)
        tp24 = self.completed_wafers - (self.completion_wafers_cum[lo - 1] if lo > 0 else 0)
        td24 = self.completed_td_total - (self.completion_td_cum[lo - 1] if lo > 0 else 0.0)
        n_lots = self.released_lots
        total_td = td_in + self.completed_td_total
        avg_td = total_td / n_lots if n_lots else 0.0
        var = 0.0
        if n_lots:
            sumsq = wip_sumsq + self.completed_td_sumsq
            var = max(0.0, sumsq / n_lots - avg_td * avg_td)
        self.snapshots.append(
            KpiSnapshot(
                t=t,
                wip_wafers=self.wip_wafers,
                completed_wafers_cum=self.completed_wafers,
                completed_td_cum=self.completed_td_total,
                tp_24h=tp24,
                td_out_24h=td24,
                td_in_t=td_in,
                avg_ct=(self.completed_ct_sum / self.completed_lots if self.completed_lots else 0.0),
                avg_fab_wip=self.wip_sample_sum / self.wip_sample_count,
                avg_tardiness=avg_td,
                std_tardiness=math.sqrt(var),
                tardy_lot_count=self.completed_tardy + wip_tardy,
                group_wip=dict(self.group_wip),
            )
        )

    def fab_state_raw(self, group_id: str) -> np.ndarray:
        """Live fab-state vector at the current clock (agent side)."""
        t = self.clock
        td_in, wip_tardy, wip_sumsq = self._wip_tardiness(t)
        n_lots = self.released_lots
        total_td = td_in + self.completed_td_total
        avg_td = total_td / n_lots if n_lots else 0.0
        var = 0.0
        if n_lots:
            sumsq = wip_sumsq + self.completed_td_sumsq
            var = max(0.0, sumsq / n_lots - avg_td * avg_td)
        avg_wip = (
            self.wip_sample_sum / self.wip_sample_count if self.wip_sample_count else 0.0
        )
        return np.array(
            [
                self.group_wip[group_id],
                self.completed_wafers,
                total_td,
                self.completed_tardy + wip_tardy,
                avg_td,
                math.sqrt(var),
                self.completed_ct_sum / self.completed_lots if self.completed_lots else 0.0,
                avg_wip,
            ],
            dtype=np.float64,
        )

    def fab_state_diff(self, group_id: str) -> np.ndarray:
        """Fab-state vector as the difference to the reference run at the
        same time (reference sampled at the floor hour)."""
        raw = self.fab_state_raw(group_id)
        if self.reference is None:
            return raw
        ref = self.reference.at(self.clock)
        ref_vec = np.array(
            [
                ref.group_wip.get(group_id, 0),
                ref.completed_wafers_cum,
                ref.td_in_t + ref.completed_td_cum,
                ref.tardy_lot_count,
                ref.avg_tardiness,
                ref.std_tardiness,
                ref.avg_ct,
                ref.avg_fab_wip,
            ],
            dtype=np.float64,
        )
        return raw - ref_vec

    # -- result --------------------------------------------------------------

    def _result(self) -> EpisodeResult:
        td_in, _, _ = self._wip_tardiness(self.horizon)
        log = getattr(self.dispatcher, "transitions", None)
        res = EpisodeResult(
            seed=self.seed,
            horizon=self.horizon,
            final_td_in=td_in,
            final_td_out=self.completed_td_total,
            final_tp=self.completed_wafers,
            completed_lots=self.completed_lots,
            released_lots=self.released_lots,
            tc_violations=self.tc_violations,
            snapshots=self.snapshots,
            decision_log=list(log) if log is not None else [],
            events_executed=self.events_executed,
        )
        if self.reference is not None:
            res.ref_td_in = self.reference.final_td_in
            res.ref_td_out = self.reference.final_td_out
            res.ref_tp = self.reference.final_tp
        return res


def run_episode(
    model: FabModel,
    dispatcher: Dispatcher,
    seed: int,
    horizon: float,
    reference: ReferenceSeries | None = None,
    check_invariants: bool = False,
    collect_trace: bool = False,
) -> EpisodeResult:
    """Execute one episode and return its KPIs, hourly series, and log."""
    sim = Simulation(
        model,
        dispatcher,
        seed,
        horizon,
        reference=reference,
        check_invariants=check_invariants,
        collect_trace=collect_trace,
    )
    result = sim.run()
    if collect_trace:
        result.event_trace = sim.trace  # type: ignore[attr-defined]
    return result
