"""Static dispatching rules and the hierarchical composite.

All rules order an eligible queue and are pure functions of the model,
the lots, the deciding tool, and the current clock.  Rule names:

* ``fifo`` -- earliest arrival at the current step first
* ``cr``   -- smallest critical ratio (time to due date / remaining CT) first
* ``srpt`` -- shortest remaining processing time first
* ``spt``  -- shortest processing time of the next step (on the deciding tool)
* ``edd``  -- earliest fab due date first
* ``hier:<tie>`` -- time-constrained lots, then super-hot, then hot, then
  setup-matching lots, ties broken by ``<tie>``

Every rule breaks remaining ties by ascending lot id, which makes each
ordering a deterministic total order.
"""

from __future__ import annotations

from .fabmodel import FabModel, Lot, Tool

PLAIN_RULES = ("fifo", "cr", "srpt", "spt", "edd")

_PRIORITY_RANK = {"super_hot": 0, "hot": 1, "regular": 2}


def parse_rule(name: str) -> tuple[str, str | None]:
    """Split a rule name into (kind, tie_break). Raises on unknown names."""
    if name in PLAIN_RULES:
        return name, None
    if name.startswith("hier:"):
        tie = name.split(":", 1)[1]
        if tie not in PLAIN_RULES:
            raise ValueError(f"unknown hierarchical tie-break {tie!r}")
        return "hier", tie
    raise ValueError(f"unknown dispatch rule {name!r}")


def priority_key(rule: str, lot: Lot, now: float, tool: Tool, model: FabModel):
    """Orderable key for one lot under a plain rule (smaller dispatches first)."""
    step = model.step_of(lot)
    if rule == "fifo":
        key = lot.step_arrival_time
    elif rule == "cr":
        remaining = model.remaining_min_ct(lot.product_id, lot.current_step)
        if remaining <= 0:
            # already past any plan; treat as maximally urgent
            key = float("-inf")
        else:
            key = (lot.due_date - now) / remaining
    elif rule == "srpt":
        key = model.remaining_min_ct(lot.product_id, lot.current_step)
    elif rule == "spt":
        key = step.processing_time_hours[tool.id]
    elif rule == "edd":
        key = lot.due_date
    else:
        raise ValueError(f"unknown dispatch rule {rule!r}")
    return (key, lot.id)


def hierarchical_order(
    queue: list[Lot], tool: Tool, now: float, tie: str, model: FabModel
) -> list[Lot]:
    """Order lots by the layered composite used for larger fab models.

    Time-constrained lots go first, then super-hot, then hot lots; among
    equals, lots matching the tool's current setup family avoid a setup and
    are favored; final ties fall through to the ``tie`` rule.
    """

    def key(lot: Lot):
        step = model.step_of(lot)
        constrained = 0 if step.time_constraint_hours is not None else 1
        rank = _PRIORITY_RANK[lot.priority]
        setup_match = 0 if tool.setup_duration(tool.setup_state, step.setup_id) == 0.0 else 1
        return (constrained, rank, setup_match, priority_key(tie, lot, now, tool, model))

    return sorted(queue, key=key)


def order_queue(rule: str, queue: list[Lot], tool: Tool, now: float, model: FabModel) -> list[Lot]:
    """Order an eligible queue under any rule name (plain or hierarchical)."""
    kind, tie = parse_rule(rule)
    if kind == "hier":
        return hierarchical_order(queue, tool, now, tie, model)
    return sorted(queue, key=lambda lot: priority_key(kind, lot, now, tool, model))
