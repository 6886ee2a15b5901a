import numpy as np
import pytest

from fabrl.fabmodel import (
    BatchRule,
    Product,
    Release,
    Route,
    Step,
    Tool,
    ToolGroup,
    make_model,
)


def tiny_model(
    proc_hours=2.0,
    n_steps=2,
    n_tools=1,
    horizon=100.0,
    releases=((0.0, "regular"),),
    batch=None,
    time_constraint=None,
    mtbf=1e9,
    mttr=0.0,
    setup_change=None,
    setup_ids=None,
):
    """Single-product, single-group model for targeted kernel tests."""
    tools = tuple(
        Tool(
            id=f"T{i}",
            group_id="g",
            mtbf_hours=mtbf,
            mttr_hours=mttr,
            setup_change_hours=dict(setup_change or {}),
        )
        for i in range(n_tools)
    )
    steps = []
    for si in range(n_steps):
        steps.append(
            Step(
                index=si,
                tool_group_id="g",
                processing_time_hours={t.id: proc_hours for t in tools},
                setup_id=(setup_ids[si] if setup_ids else None),
                batch_eligible=batch is not None,
                time_constraint_hours=(time_constraint if si > 0 else None),
                planned_cycle_time_hours=proc_hours,
            )
        )
    group = ToolGroup(id="g", tools=tools, batching=batch, dispatch_rule="fifo")
    product = Product(id="P", route_id="P", raw_process_time_hours=proc_hours * n_steps)
    rel = tuple(Release("P", t, prio, 25) for t, prio in releases)
    return make_model([product], [group], {"P": Route(tuple(steps))}, rel, horizon)


def random_model(rng: np.random.Generator):
    """Small random fab for conservation/determinism fuzzing."""
    n_groups = int(rng.integers(2, 5))
    groups = []
    for gi in range(n_groups):
        gid = f"g{gi}"
        n_tools = int(rng.integers(1, 3))
        tools = tuple(
            Tool(
                id=f"{gid}t{i}",
                group_id=gid,
                mtbf_hours=float(rng.uniform(20, 200)),
                mttr_hours=float(rng.uniform(0, 5)),
            )
            for i in range(n_tools)
        )
        batching = None
        if rng.random() < 0.3:
            batching = BatchRule(max_size=int(rng.integers(2, 4)), min_size=1)
        groups.append(ToolGroup(id=gid, tools=tools, batching=batching))

    n_products = int(rng.integers(1, 4))
    products, routes = [], {}
    for pi in range(n_products):
        pid = f"p{pi}"
        n_steps = int(rng.integers(2, 6))
        steps = []
        for si in range(n_steps):
            g = groups[int(rng.integers(0, n_groups))]
            # random dedication to a nonempty subset of the group's tools
            k = int(rng.integers(1, len(g.tools) + 1))
            chosen = rng.choice(len(g.tools), size=k, replace=False)
            times = {g.tools[int(i)].id: float(rng.uniform(0.3, 4.0)) for i in chosen}
            tc = float(rng.uniform(1.0, 8.0)) if (si > 0 and rng.random() < 0.2) else None
            steps.append(
                Step(
                    index=si,
                    tool_group_id=g.id,
                    processing_time_hours=times,
                    batch_eligible=(g.batching is not None and rng.random() < 0.7),
                    time_constraint_hours=tc,
                    planned_cycle_time_hours=min(times.values()),
                )
            )
        routes[pid] = Route(tuple(steps))
        products.append(
            Product(id=pid, route_id=pid, raw_process_time_hours=sum(s.min_time() for s in steps))
        )

    horizon = float(rng.uniform(24, 96))
    n_rel = int(rng.integers(3, 25))
    releases = []
    for _ in range(n_rel):
        pid = f"p{int(rng.integers(0, n_products))}"
        prio = ["regular", "hot", "super_hot"][int(rng.integers(0, 3))]
        releases.append(
            Release(pid, float(rng.uniform(0, horizon * 0.8)), prio, int(rng.integers(1, 26)))
        )
    return make_model(products, groups, routes, releases, horizon)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
