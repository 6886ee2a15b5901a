#!/usr/bin/env python3
"""Generate the bundled midifab model file.

A scaled synthetic instance exercising the larger-fab mechanisms: 40 tools
in 8 groups, three products with 15-17 step reentrant routes, hot and
super-hot releases, per-product setup families on the implanters, a
time-constrained clean step after deposition, and batching furnaces.

Release rates are derived from the drawn processing times so lithography
sits at the target utilization; the result is written to
src/fabrl/models/midifab.yaml (deterministic for a fixed seed).
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")

from fabrl.fabmodel import (
    BatchRule,
    Product,
    Release,
    Route,
    Step,
    Tool,
    ToolGroup,
    make_model,
    save_model,
)

SEED = 7
HORIZON = 4800.0
LITHO_UTIL = 0.97
WAFERS = 25

GROUPS = {
    # id: (tool count, mtbf, mttr)
    "litho": (5, 200.0, 6.0),
    "diffusion": (6, 320.0, 9.0),
    "implant_a": (5, 150.0, 5.0),
    "implant_b": (5, 160.0, 5.0),
    "etch": (6, 140.0, 4.0),
    "cvd": (5, 180.0, 6.0),
    "clean": (3, 220.0, 4.0),
    "metro": (5, 260.0, 3.0),
}

SETUP_CHANGE_HOURS = 0.7

# route skeletons: (group, base hours, flags)
ROUTES = {
    "RX": [
        ("diffusion", 5.5, "batch"),
        ("implant_a", 1.4, "setup"),
        ("litho", 2.1, ""),
        ("etch", 1.9, ""),
        ("cvd", 2.4, ""),
        ("clean", 1.0, "tc"),
        ("metro", 0.8, ""),
        ("litho", 2.2, ""),
        ("implant_b", 1.7, ""),
        ("etch", 2.0, ""),
        ("diffusion", 6.0, "batch"),
        ("clean", 0.9, ""),
        ("litho", 2.0, ""),
        ("implant_a", 1.5, "setup"),
        ("metro", 0.7, ""),
        ("clean", 1.1, ""),
    ],
    "RY": [
        ("diffusion", 5.8, "batch"),
        ("etch", 1.8, ""),
        ("litho", 2.3, ""),
        ("implant_a", 1.3, "setup"),
        ("cvd", 2.6, ""),
        ("clean", 1.0, "tc"),
        ("litho", 2.1, ""),
        ("metro", 0.9, ""),
        ("etch", 2.1, ""),
        ("implant_b", 1.6, ""),
        ("cvd", 2.2, ""),
        ("clean", 0.9, "tc"),
        ("diffusion", 5.6, "batch"),
        ("litho", 2.2, ""),
        ("implant_a", 1.4, "setup"),
        ("etch", 1.8, ""),
        ("metro", 0.8, ""),
    ],
    "RZ": [
        ("diffusion", 5.2, "batch"),
        ("implant_a", 1.5, "setup"),
        ("litho", 2.5, ""),
        ("etch", 2.0, ""),
        ("cvd", 2.5, ""),
        ("clean", 1.1, "tc"),
        ("litho", 2.4, ""),
        ("implant_b", 1.8, ""),
        ("diffusion", 5.9, "batch"),
        ("metro", 0.8, ""),
        ("litho", 2.3, ""),
        ("etch", 1.9, ""),
        ("clean", 1.0, ""),
        ("metro", 0.7, ""),
        ("litho", 2.1, ""),
    ],
}

PRODUCTS = {"PX": "RX", "PY": "RY", "PZ": "RZ"}
PRODUCT_SCALE = {"PX": 0.9, "PY": 1.0, "PZ": 1.15}
SETUP_FAMILY = {"PX": "f_px", "PY": "f_py", "PZ": "f_pz"}
RATE_WEIGHTS = {"PX": 1.0, "PY": 0.8, "PZ": 0.5}
TC_MAX_WAIT = 1.5
# share of releases per priority class
HOT_EVERY = 12
SUPER_HOT_EVERY = 33


def build(seed=SEED):
    rng = np.random.default_rng(seed)
    groups = []
    for gid, (count, mtbf, mttr) in GROUPS.items():
        tools = []
        for i in range(count):
            setup_change = {}
            if gid == "implant_a":
                setup_change = {("*", fam): SETUP_CHANGE_HOURS for fam in SETUP_FAMILY.values()}
            tools.append(
                Tool(
                    id=f"{gid.upper()}{i + 1}",
                    group_id=gid,
                    mtbf_hours=round(mtbf * rng.uniform(0.9, 1.1), 1),
                    mttr_hours=round(mttr * rng.uniform(0.8, 1.2), 1),
                    setup_change_hours=setup_change,
                )
            )
        groups.append(
            ToolGroup(
                id=gid,
                tools=tuple(tools),
                batching=None,
                dispatch_rule="hier:cr",
            )
        )
    gmap = {g.id: g for g in groups}

    products = []
    routes = {}
    litho_work = {}
    diff_steps = {}
    for pid, rid in PRODUCTS.items():
        steps = []
        lw = 0.0
        dsteps = []
        for si, (gid, base, flags) in enumerate(ROUTES[rid]):
            pf = PRODUCT_SCALE[pid] * rng.uniform(0.85, 1.15)
            group_tools = gmap[gid].tools
            # dedication: heavier steps can run on a subset of the group
            n_elig = len(group_tools)
            if n_elig >= 4 and rng.random() < 0.35:
                n_elig = rng.integers(3, len(group_tools)) if len(group_tools) > 3 else 3
            chosen = sorted(rng.choice(len(group_tools), size=n_elig, replace=False))
            times = {
                group_tools[int(i)].id: round(base * pf * rng.uniform(0.95, 1.05), 4)
                for i in chosen
            }
            steps.append(
                Step(
                    index=si,
                    tool_group_id=gid,
                    processing_time_hours=times,
                    setup_id=SETUP_FAMILY[pid] if flags == "setup" else None,
                    batch_eligible=(flags == "batch"),
                    time_constraint_hours=TC_MAX_WAIT if flags == "tc" else None,
                    planned_cycle_time_hours=min(times.values()),
                )
            )
            if gid == "litho":
                lw += min(times.values())
            if flags == "batch":
                dsteps.append(si)
        routes[pid] = Route(steps=tuple(steps))
        products.append(
            Product(id=pid, route_id=rid, raw_process_time_hours=sum(s.min_time() for s in steps))
        )
        litho_work[pid] = lw
        diff_steps[pid] = dsteps

    # cross-product furnace batch families by visit position
    fams = {
        "DIFF_EARLY": tuple(sorted((pid, diff_steps[pid][0]) for pid in PRODUCTS)),
        "DIFF_LATE": tuple(sorted((pid, diff_steps[pid][1]) for pid in PRODUCTS)),
    }
    batching = BatchRule(max_size=4, min_size=1, families=fams)
    groups = [
        ToolGroup(id=g.id, tools=g.tools, batching=batching if g.id == "diffusion" else None,
                  dispatch_rule=g.dispatch_rule)
        for g in groups
    ]

    litho_capacity = len(GROUPS["litho"][0] * [0]) or 5
    litho_capacity = GROUPS["litho"][0]
    nominal = sum(RATE_WEIGHTS[p] * litho_work[p] for p in PRODUCTS)
    k = LITHO_UTIL * litho_capacity / nominal
    releases = []
    offsets = {"PX": 0.0, "PY": 0.4, "PZ": 0.8}
    for pid in PRODUCTS:
        interval = round(1.0 / (RATE_WEIGHTS[pid] * k), 4)
        t = offsets[pid]
        n = 0
        while t < HORIZON:
            if n % SUPER_HOT_EVERY == SUPER_HOT_EVERY - 1:
                prio = "super_hot"
            elif n % HOT_EVERY == HOT_EVERY - 1:
                prio = "hot"
            else:
                prio = "regular"
            releases.append(Release(pid, round(t, 6), prio, WAFERS))
            t += interval
            n += 1
    return make_model(products, groups, routes, releases, HORIZON)


if __name__ == "__main__":
    model = build()
    out = Path("src/fabrl/models/midifab.yaml")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    n_tools = sum(len(g.tools) for g in model.tool_groups)
    print(f"wrote {out}: {n_tools} tools, {len(model.release_schedule)} releases")
