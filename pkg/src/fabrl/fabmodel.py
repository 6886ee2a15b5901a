"""Static fab description: products, routes, tool groups, releases.

A :class:`FabModel` is immutable after construction and safe to share
across worker processes.  Models come from three places: the built-in
``minifab`` builder, the built-in ``midifab`` file shipped with the
package, or a user-supplied YAML model file (schema documented in the
README and in :func:`load_model`).

All durations are hours (floats), wafer counts are integers.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import yaml

PRIORITIES = ("regular", "hot", "super_hot")
DEFAULT_WAFERS_PER_LOT = 25


class ModelError(ValueError):
    """A model file or model structure violates the schema."""


class Release(NamedTuple):
    product_id: str
    time_hours: float
    priority: str
    wafers: int


@dataclass(frozen=True)
class Step:
    index: int
    tool_group_id: str
    # tool id -> processing hours; listing a subset of the group's tools
    # expresses dedication.
    processing_time_hours: dict[str, float]
    setup_id: str | None = None
    batch_eligible: bool = False
    time_constraint_hours: float | None = None
    planned_cycle_time_hours: float = 0.0

    def min_time(self) -> float:
        return min(self.processing_time_hours.values())


@dataclass(frozen=True)
class Route:
    steps: tuple[Step, ...]


@dataclass(frozen=True)
class Product:
    id: str
    route_id: str
    raw_process_time_hours: float


@dataclass(frozen=True)
class Tool:
    id: str
    group_id: str
    mtbf_hours: float
    mttr_hours: float
    setup_state: str | None = None
    # (from_family, to_family) -> hours; from_family "*" acts as a wildcard.
    setup_change_hours: dict[tuple[str, str], float] = field(default_factory=dict)

    def setup_duration(self, current: str | None, wanted: str | None) -> float:
        """Hours needed to switch this tool from ``current`` to ``wanted``."""
        if wanted is None or wanted == current:
            return 0.0
        key = (current if current is not None else "*", wanted)
        if key in self.setup_change_hours:
            return self.setup_change_hours[key]
        return self.setup_change_hours.get(("*", wanted), 0.0)


@dataclass(frozen=True)
class BatchRule:
    max_size: int
    min_size: int = 1
    # family id -> sorted tuple of (product_id, step_index) pairs.  Pairs not
    # listed anywhere form implicit singleton families (same product and step
    # can still batch together).
    families: dict[str, tuple[tuple[str, int], ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class ToolGroup:
    id: str
    tools: tuple[Tool, ...]
    batching: BatchRule | None = None
    dispatch_rule: str = "fifo"


@dataclass
class Lot:
    """A job instance flowing through its product's route."""

    id: int
    product_id: str
    priority: str
    wafer_count: int
    release_time: float
    due_date: float = 0.0
    step_due_dates: tuple[float, ...] = ()
    current_step: int = 0
    step_arrival_time: float = 0.0
    completion_time: float | None = None


@dataclass(frozen=True, eq=False)
class FabModel:
    products: tuple[Product, ...]
    tool_groups: tuple[ToolGroup, ...]
    routes: dict[str, Route]  # product id -> route
    release_schedule: tuple[Release, ...]
    horizon_hours: float
    # derived lookup tables, built by validate(); not part of equality
    _derived: dict = field(default_factory=dict, repr=False, compare=False)

    def __eq__(self, other):
        if not isinstance(other, FabModel):
            return NotImplemented
        return (
            self.products == other.products
            and self.tool_groups == other.tool_groups
            and self.routes == other.routes
            and self.release_schedule == other.release_schedule
            and self.horizon_hours == other.horizon_hours
        )

    # -- derived accessors --------------------------------------------------

    @property
    def groups_by_id(self) -> dict[str, ToolGroup]:
        return self._derived["groups_by_id"]

    @property
    def tools_by_id(self) -> dict[str, Tool]:
        return self._derived["tools_by_id"]

    def route_of(self, product_id: str) -> Route:
        return self.routes[product_id]

    def step_of(self, lot: Lot) -> Step:
        return self.routes[lot.product_id].steps[lot.current_step]

    def raw_time(self, product_id: str) -> float:
        return self._derived["raw_time"][product_id]

    def remaining_min_ct(self, product_id: str, step_index: int) -> float:
        """Sum of minimal eligible-tool times for steps >= step_index."""
        return self._derived["suffix_min"][product_id][step_index]

    def batch_family(self, group_id: str, product_id: str, step_index: int):
        """Batch-compatibility key for a (product, step) pair at a group.

        Pairs sharing a key may be processed in one batch; unlisted pairs get
        an implicit singleton family.
        """
        fam = self._derived["family_of"].get((group_id, product_id, step_index))
        if fam is not None:
            return fam
        return ("_implicit", product_id, step_index)


def validate_model(m: FabModel) -> FabModel:
    """Check all structural invariants and build derived lookup tables.

    Raises :class:`ModelError` naming the offending field.  Returns the same
    model instance for chaining.
    """
    if m.horizon_hours <= 0:
        raise ModelError(f"horizon_hours must be > 0, got {m.horizon_hours}")

    groups_by_id: dict[str, ToolGroup] = {}
    tools_by_id: dict[str, Tool] = {}
    for gi, g in enumerate(m.tool_groups):
        if g.id in groups_by_id:
            raise ModelError(f"tool_groups[{gi}]: duplicate group id {g.id!r}")
        if not g.tools:
            raise ModelError(f"tool_groups[{gi}] ({g.id}): tools list is empty")
        groups_by_id[g.id] = g
        for t in g.tools:
            if t.id in tools_by_id:
                raise ModelError(f"tool_groups[{gi}].tools: duplicate tool id {t.id!r}")
            if t.group_id != g.id:
                raise ModelError(f"tool {t.id}: group_id {t.group_id!r} != {g.id!r}")
            if t.mtbf_hours <= 0:
                raise ModelError(f"tool {t.id}: mtbf_hours must be > 0")
            if t.mttr_hours < 0:
                raise ModelError(f"tool {t.id}: mttr_hours must be >= 0")
            tools_by_id[t.id] = t
        if g.batching is not None:
            b = g.batching
            if b.max_size < 2:
                raise ModelError(f"tool group {g.id}: batching.max_size must be >= 2")
            if not (1 <= b.min_size <= b.max_size):
                raise ModelError(f"tool group {g.id}: batching.min_size out of range")

    product_ids = set()
    for pi, p in enumerate(m.products):
        if p.id in product_ids:
            raise ModelError(f"products[{pi}]: duplicate product id {p.id!r}")
        product_ids.add(p.id)
        if p.id not in m.routes:
            raise ModelError(f"products[{pi}] ({p.id}): no route entry")

    suffix_min: dict[str, list[float]] = {}
    raw_time: dict[str, float] = {}
    for pid, route in m.routes.items():
        if pid not in product_ids:
            raise ModelError(f"routes: route for unknown product {pid!r}")
        if not route.steps:
            raise ModelError(f"routes[{pid}]: route has no steps")
        mins = []
        for si, s in enumerate(route.steps):
            where = f"routes[{pid}].steps[{si}]"
            if s.index != si:
                raise ModelError(f"{where}: index {s.index} != position {si}")
            g = groups_by_id.get(s.tool_group_id)
            if g is None:
                raise ModelError(f"{where}: unknown tool group {s.tool_group_id!r}")
            if not s.processing_time_hours:
                raise ModelError(f"{where}: processing_time_hours is empty")
            group_tool_ids = {t.id for t in g.tools}
            for tid, hours in s.processing_time_hours.items():
                if tid not in group_tool_ids:
                    raise ModelError(f"{where}: tool {tid!r} not in group {g.id!r}")
                if hours <= 0:
                    raise ModelError(f"{where}: processing time for {tid!r} must be > 0")
            if s.time_constraint_hours is not None:
                if si == 0:
                    raise ModelError(f"{where}: time constraint not allowed on first step")
                if s.time_constraint_hours <= 0:
                    raise ModelError(f"{where}: time_constraint_hours must be > 0")
            if s.batch_eligible and g.batching is None:
                raise ModelError(f"{where}: batch step at non-batching group {g.id!r}")
            if s.planned_cycle_time_hours <= 0:
                raise ModelError(f"{where}: planned_cycle_time_hours must be > 0")
            mins.append(s.min_time())
        suffix = [0.0] * (len(mins) + 1)
        for i in range(len(mins) - 1, -1, -1):
            suffix[i] = suffix[i + 1] + mins[i]
        suffix_min[pid] = suffix
        raw_time[pid] = suffix[0]

    for p in m.products:
        if p.raw_process_time_hours <= 0 or not math.isclose(
            p.raw_process_time_hours, raw_time[p.id], rel_tol=1e-12
        ):
            raise ModelError(
                f"product {p.id}: raw_process_time_hours {p.raw_process_time_hours}"
                f" != route minimum sum {raw_time[p.id]}"
            )

    family_of: dict[tuple[str, str, int], tuple[str, str]] = {}
    for g in m.tool_groups:
        if g.batching is None:
            continue
        seen: dict[tuple[str, int], str] = {}
        for fam_id, pairs in g.batching.families.items():
            setups = set()
            for (pid, si) in pairs:
                if pid not in product_ids:
                    raise ModelError(
                        f"tool group {g.id} family {fam_id}: unknown product {pid!r}"
                    )
                route = m.routes[pid]
                if not (0 <= si < len(route.steps)):
                    raise ModelError(
                        f"tool group {g.id} family {fam_id}: step {si} out of range for {pid}"
                    )
                step = route.steps[si]
                if step.tool_group_id != g.id:
                    raise ModelError(
                        f"tool group {g.id} family {fam_id}: ({pid},{si}) runs at"
                        f" {step.tool_group_id!r}"
                    )
                if not step.batch_eligible:
                    raise ModelError(
                        f"tool group {g.id} family {fam_id}: ({pid},{si}) is not batch-eligible"
                    )
                if (pid, si) in seen:
                    raise ModelError(
                        f"tool group {g.id}: ({pid},{si}) in both {seen[(pid, si)]!r}"
                        f" and {fam_id!r} (families must partition)"
                    )
                seen[(pid, si)] = fam_id
                setups.add(step.setup_id)
                family_of[(g.id, pid, si)] = ("fam", fam_id)
            if len(setups) > 1:
                raise ModelError(
                    f"tool group {g.id} family {fam_id}: members mix setup families {setups}"
                )

    for ri, r in enumerate(m.release_schedule):
        if r.product_id not in product_ids:
            raise ModelError(f"releases[{ri}]: unknown product {r.product_id!r}")
        if r.priority not in PRIORITIES:
            raise ModelError(f"releases[{ri}]: unknown priority {r.priority!r}")
        if r.time_hours < 0:
            raise ModelError(f"releases[{ri}]: negative release time")
        if r.wafers < 1:
            raise ModelError(f"releases[{ri}]: wafers must be >= 1")

    m._derived.clear()
    m._derived.update(
        groups_by_id=groups_by_id,
        tools_by_id=tools_by_id,
        suffix_min=suffix_min,
        raw_time=raw_time,
        family_of=family_of,
    )
    return m


def _canonical_releases(releases) -> tuple[Release, ...]:
    return tuple(sorted(releases, key=lambda r: (r.time_hours, r.product_id, r.priority)))


def make_model(products, tool_groups, routes, releases, horizon_hours) -> FabModel:
    """Assemble and validate a FabModel (releases are canonically sorted)."""
    m = FabModel(
        products=tuple(products),
        tool_groups=tuple(tool_groups),
        routes=dict(routes),
        release_schedule=_canonical_releases(releases),
        horizon_hours=float(horizon_hours),
    )
    return validate_model(m)


# ---------------------------------------------------------------------------
# Due dates
# ---------------------------------------------------------------------------

FLOW_FACTOR_LOW = 2.1
FLOW_FACTOR_HIGH = 2.5


def assign_due_dates(model: FabModel, lot: Lot, rng: np.random.Generator) -> Lot:
    """Set the lot's fab due date and per-step due dates.

    The fab due date is ``release + FF * raw_process_time`` with the flow
    factor FF drawn uniformly from [2.1, 2.5].  Step due dates are obtained
    by subtracting the planned cycle time of the remaining steps from the
    due date; each step's planned contribution is its planned cycle time
    scaled so the contributions sum exactly to ``FF * raw_process_time``,
    which makes the step due dates telescope to the fab due date with the
    last one equal to it.
    """
    ff = rng.uniform(FLOW_FACTOR_LOW, FLOW_FACTOR_HIGH)
    route = model.route_of(lot.product_id)
    raw = model.raw_time(lot.product_id)
    due = lot.release_time + ff * raw
    planned = [s.planned_cycle_time_hours for s in route.steps]
    scale = ff * raw / sum(planned)
    sdds = []
    tail = 0.0
    for p in reversed(planned):
        sdds.append(due - scale * tail)
        tail += p
    sdds.reverse()
    lot.due_date = due
    lot.step_due_dates = tuple(sdds)
    return lot


# ---------------------------------------------------------------------------
# Built-in Minifab
# ---------------------------------------------------------------------------

# Base per-step hours of the six-step reentrant flow.  Step times grow
# along the route, lithography is the single-tool bottleneck, and per-lot
# work differs strongly between products; release intervals are derived
# from the drawn processing times so the lithography tool sits at the
# target utilization regardless of the variation draw.
_MINIFAB_BASE_HOURS = (2.4, 0.6, 0.75, 0.95, 4.4, 1.05)
_MINIFAB_GROUP_SEQ = ("diffusion", "implant", "litho", "implant", "diffusion", "litho")
_MINIFAB_PRODUCTS = ("PA", "PB", "PC")
_MINIFAB_PRODUCT_SCALE = {"PA": 0.7, "PB": 1.0, "PC": 1.35}
_MINIFAB_RATE_WEIGHTS = {"PA": 1 / 3.5, "PB": 1 / 7.0, "PC": 1 / 14.0}
_MINIFAB_RELEASE_OFFSETS = {"PA": 0.0, "PB": 1.0, "PC": 2.0}
_MINIFAB_LITHO_UTIL = 0.96
_MINIFAB_HORIZON = 4800.0  # allows 50-day runs and 6-month generalization tests


def build_minifab(seed: int, load_factor: float = 1.0, horizon_hours: float = _MINIFAB_HORIZON) -> FabModel:
    """Build the five-tool Minifab instance.

    Three tool groups (two implanters, one lithography tool, two batching
    diffusion furnaces), three products with staggered cyclic releases, and
    six-step reentrant routes.  Per-product processing times combine a
    structural spread (PA runs ~30 % faster than PB, PC ~35 % slower) with
    +/-20 % per-step and +/-5 % per-tool variation drawn deterministically
    from ``seed``.

    ``load_factor`` scales the release rate (values > 1 release more lots)
    and is the knob used to create alternative loading scenarios.
    """
    rng = np.random.default_rng(seed)
    tools = {
        "implant": (("IMP1", 130.0, 4.0), ("IMP2", 150.0, 5.0)),
        "litho": (("LITHO1", 170.0, 5.0),),
        "diffusion": (("DIFF1", 260.0, 7.0), ("DIFF2", 290.0, 8.0)),
    }
    groups = []
    for gid in ("implant", "litho", "diffusion"):
        batching = None
        if gid == "diffusion":
            fams = {
                "DIFF_EARLY": tuple((p, 0) for p in _MINIFAB_PRODUCTS),
                "DIFF_LATE": tuple((p, 4) for p in _MINIFAB_PRODUCTS),
            }
            batching = BatchRule(max_size=3, min_size=1, families=fams)
        groups.append(
            ToolGroup(
                id=gid,
                tools=tuple(
                    Tool(id=tid, group_id=gid, mtbf_hours=mtbf, mttr_hours=mttr)
                    for tid, mtbf, mttr in tools[gid]
                ),
                batching=batching,
                dispatch_rule="srpt",
            )
        )
    group_map = {g.id: g for g in groups}

    products = []
    routes = {}
    litho_work = {}
    for pid in _MINIFAB_PRODUCTS:
        steps = []
        for si, (gid, base) in enumerate(zip(_MINIFAB_GROUP_SEQ, _MINIFAB_BASE_HOURS)):
            prod_factor = rng.uniform(0.8, 1.2) * _MINIFAB_PRODUCT_SCALE[pid]
            times = {}
            for t in group_map[gid].tools:
                tool_factor = rng.uniform(0.95, 1.05)
                times[t.id] = round(base * prod_factor * tool_factor, 4)
            steps.append(
                Step(
                    index=si,
                    tool_group_id=gid,
                    processing_time_hours=times,
                    batch_eligible=(gid == "diffusion"),
                    planned_cycle_time_hours=min(times.values()),
                )
            )
        route = Route(steps=tuple(steps))
        routes[pid] = route
        products.append(
            Product(
                id=pid,
                route_id=pid,
                raw_process_time_hours=sum(s.min_time() for s in steps),
            )
        )
        litho_work[pid] = sum(steps[i].min_time() for i in (2, 5))

    # release rates hold the lithography bottleneck at the target utilization
    nominal = sum(_MINIFAB_RATE_WEIGHTS[p] * litho_work[p] for p in _MINIFAB_PRODUCTS)
    k = _MINIFAB_LITHO_UTIL * load_factor / nominal
    releases = []
    for pid in _MINIFAB_PRODUCTS:
        interval = round(1.0 / (_MINIFAB_RATE_WEIGHTS[pid] * k), 4)
        t = _MINIFAB_RELEASE_OFFSETS[pid]
        while t < horizon_hours:
            releases.append(Release(pid, round(t, 6), "regular", DEFAULT_WAFERS_PER_LOT))
            t += interval

    return make_model(products, groups, routes, releases, horizon_hours)


# ---------------------------------------------------------------------------
# Model files (YAML)
# ---------------------------------------------------------------------------


def _require(mapping, key, where):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ModelError(f"{where}: missing required field {key!r}")
    return mapping[key]


def _parse_tool(raw, gid, where) -> Tool:
    tid = str(_require(raw, "id", where))
    setup_change: dict[tuple[str, str], float] = {}
    for i, entry in enumerate(raw.get("setup_change", []) or []):
        w = f"{where}.setup_change[{i}]"
        setup_change[(str(_require(entry, "from", w)), str(_require(entry, "to", w)))] = float(
            _require(entry, "hours", w)
        )
    return Tool(
        id=tid,
        group_id=gid,
        mtbf_hours=float(_require(raw, "mtbf_hours", where)),
        mttr_hours=float(_require(raw, "mttr_hours", where)),
        setup_state=(str(raw["setup"]) if raw.get("setup") is not None else None),
        setup_change_hours=setup_change,
    )


def _parse_step(raw, index, where) -> Step:
    hours = _require(raw, "hours", where)
    if not isinstance(hours, dict):
        raise ModelError(f"{where}: 'hours' must map tool ids to durations")
    times = {str(k): float(v) for k, v in hours.items()}
    planned = raw.get("planned_hours")
    return Step(
        index=index,
        tool_group_id=str(_require(raw, "tool_group", where)),
        processing_time_hours=times,
        setup_id=(str(raw["setup"]) if raw.get("setup") is not None else None),
        batch_eligible=bool(raw.get("batch", False)),
        time_constraint_hours=(
            float(raw["max_wait_hours"]) if raw.get("max_wait_hours") is not None else None
        ),
        planned_cycle_time_hours=(
            float(planned) if planned is not None else (min(times.values()) if times else 0.0)
        ),
    )


def parse_model(text: str) -> FabModel:
    """Parse the YAML model format (see README for the schema)."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ModelError(f"model file is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelError("model file must be a mapping at the top level")

    horizon = float(_require(doc, "horizon_hours", "top level"))

    groups = []
    for gi, raw in enumerate(_require(doc, "tool_groups", "top level") or []):
        where = f"tool_groups[{gi}]"
        gid = str(_require(raw, "id", where))
        tools = tuple(
            _parse_tool(t, gid, f"{where}.tools[{ti}]")
            for ti, t in enumerate(raw.get("tools", []) or [])
        )
        batching = None
        if raw.get("batching") is not None:
            braw = raw["batching"]
            fams = {}
            for fam_id, pairs in (braw.get("families") or {}).items():
                fams[str(fam_id)] = tuple(
                    sorted((str(p), int(s)) for p, s in pairs)
                )
            batching = BatchRule(
                max_size=int(_require(braw, "max_size", f"{where}.batching")),
                min_size=int(braw.get("min_size", 1)),
                families=fams,
            )
        groups.append(
            ToolGroup(
                id=gid,
                tools=tools,
                batching=batching,
                dispatch_rule=str(raw.get("dispatch_rule", "fifo")),
            )
        )

    named_routes: dict[str, Route] = {}
    for rid, raw_steps in (_require(doc, "routes", "top level") or {}).items():
        steps = tuple(
            _parse_step(s, si, f"routes[{rid}].steps[{si}]")
            for si, s in enumerate(raw_steps or [])
        )
        named_routes[str(rid)] = Route(steps=steps)

    products = []
    routes: dict[str, Route] = {}
    for pi, raw in enumerate(_require(doc, "products", "top level") or []):
        where = f"products[{pi}]"
        pid = str(_require(raw, "id", where))
        rid = str(_require(raw, "route", where))
        if rid not in named_routes:
            raise ModelError(f"{where}: unknown route {rid!r}")
        route = named_routes[rid]
        routes[pid] = route
        raw = sum(s.min_time() for s in route.steps if s.processing_time_hours)
        products.append(Product(id=pid, route_id=rid, raw_process_time_hours=raw))

    releases = []
    for ri, raw in enumerate(doc.get("releases") or []):
        where = f"releases[{ri}]"
        if isinstance(raw, (list, tuple)):
            if len(raw) not in (3, 4):
                raise ModelError(f"{where}: expected [product, time, priority, wafers?]")
            pid, t, prio = str(raw[0]), float(raw[1]), str(raw[2])
            wafers = int(raw[3]) if len(raw) == 4 else DEFAULT_WAFERS_PER_LOT
        else:
            pid = str(_require(raw, "product", where))
            t = float(_require(raw, "time", where))
            prio = str(raw.get("priority", "regular"))
            wafers = int(raw.get("wafers", DEFAULT_WAFERS_PER_LOT))
        releases.append(Release(pid, t, prio, wafers))
    for ri, raw in enumerate(doc.get("release_patterns") or []):
        where = f"release_patterns[{ri}]"
        pid = str(_require(raw, "product", where))
        start = float(raw.get("start", 0.0))
        interval = float(_require(raw, "interval_hours", where))
        if interval <= 0:
            raise ModelError(f"{where}: interval_hours must be > 0")
        until = float(raw.get("until", horizon))
        prio = str(raw.get("priority", "regular"))
        wafers = int(raw.get("wafers", DEFAULT_WAFERS_PER_LOT))
        t = start
        while t < until:
            releases.append(Release(pid, round(t, 6), prio, wafers))
            t += interval

    return make_model(products, groups, routes, releases, horizon)


def load_model(path) -> FabModel:
    """Load and fully validate a YAML model file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_model(text)
    except ModelError as exc:
        raise ModelError(f"{path}: {exc}") from exc


def emit_model(model: FabModel) -> str:
    """Serialize a model to the YAML format with deterministic field order.

    ``parse_model(emit_model(m)) == m`` for every valid model; releases are
    always written explicitly (patterns are an input-only convenience).
    """
    doc: dict = {"horizon_hours": model.horizon_hours}

    doc["products"] = [{"id": p.id, "route": p.route_id} for p in model.products]

    tg = []
    for g in model.tool_groups:
        raw: dict = {"id": g.id, "dispatch_rule": g.dispatch_rule}
        if g.batching is not None:
            braw: dict = {"max_size": g.batching.max_size, "min_size": g.batching.min_size}
            if g.batching.families:
                braw["families"] = {
                    fam: [[p, s] for p, s in pairs]
                    for fam, pairs in sorted(g.batching.families.items())
                }
            raw["batching"] = braw
        raw["tools"] = []
        for t in g.tools:
            traw: dict = {"id": t.id, "mtbf_hours": t.mtbf_hours, "mttr_hours": t.mttr_hours}
            if t.setup_state is not None:
                traw["setup"] = t.setup_state
            if t.setup_change_hours:
                traw["setup_change"] = [
                    {"from": f, "to": to, "hours": h}
                    for (f, to), h in sorted(t.setup_change_hours.items())
                ]
            raw["tools"].append(traw)
        tg.append(raw)
    doc["tool_groups"] = tg

    routes: dict = {}
    emitted: dict[int, str] = {}
    for p in model.products:
        route = model.routes[p.id]
        if id(route) in emitted:
            continue
        emitted[id(route)] = p.route_id
        steps = []
        for s in route.steps:
            sraw: dict = {
                "tool_group": s.tool_group_id,
                "hours": {k: v for k, v in sorted(s.processing_time_hours.items())},
            }
            if s.setup_id is not None:
                sraw["setup"] = s.setup_id
            if s.batch_eligible:
                sraw["batch"] = True
            if s.time_constraint_hours is not None:
                sraw["max_wait_hours"] = s.time_constraint_hours
            sraw["planned_hours"] = s.planned_cycle_time_hours
            steps.append(sraw)
        routes[p.route_id] = steps
    doc["routes"] = routes

    doc["releases"] = [
        [r.product_id, r.time_hours, r.priority, r.wafers] for r in model.release_schedule
    ]

    buf = io.StringIO()
    yaml.safe_dump(doc, buf, sort_keys=False, default_flow_style=None, width=100)
    return buf.getvalue()


def save_model(model: FabModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(emit_model(model))
