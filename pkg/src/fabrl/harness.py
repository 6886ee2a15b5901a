"""Experiment orchestration: baselines, training, evaluation, timing.

The CLI in :mod:`fabrl.cli` is a thin argument layer over the ``cmd_*``
functions here.  Every command writes its outputs (CSV tables, logs,
checkpoints, and an echo of the configuration) into a self-contained run
directory so any table or figure can be regenerated from it.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from . import heuristics
from .cmaes import CmaesConfig, EsTrainConfig, run_es_training
from .dispatchers import HeuristicDispatcher, PolicyDispatcher
from .fabmodel import FabModel, build_minifab, load_model
from .kpi import CostConfig
from .policy import ArchDescriptor, load_checkpoint
from .ppo import PpoConfig, PpoTrainConfig, run_ppo_training
from .simkernel import ReferenceSeries, run_episode

HOURS_PER_DAY = 24.0
DEFAULT_HORIZON_HOURS = 50 * HOURS_PER_DAY


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "builtin:minifab"  # or builtin:midifab, or a file path
    model_seed: int = 0
    dispatch: str | None = None  # baseline rule; None = model default
    controlled: tuple[str, ...] = ()  # tool group ids; ("all",) controls every group
    optimizer: str = "cmaes"  # or "ppo"
    train_seeds: tuple[int, ...] = (0,)
    test_seeds: tuple[int, ...] = (100, 101, 102, 103, 104)
    train_scenarios: tuple[str, ...] = ("base",)
    test_scenarios: tuple[str, ...] = ("base",)
    horizon_hours: float = DEFAULT_HORIZON_HOURS
    workers: int = 1
    out_dir: str | None = None
    iterations: int = 40
    popsize: int = 16
    n_best: int = 8
    sigma0: float = 0.5
    cost_variant: str = "standard"
    reward_variant: str = "D"
    reward_span: int = 24
    ppo_complete_episodes: bool = True
    ppo_epochs: int = 5
    ppo_minibatch: int = 128
    ppo_fragment: int = 16
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("worker count must be >= 1")
        overlap = set(self.train_seeds) & set(self.test_seeds)
        if overlap:
            raise ValueError(f"train and test seeds overlap: {sorted(overlap)}")
        if self.optimizer not in ("cmaes", "ppo"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# scenario name -> minifab load factor; file models only support "base"
SCENARIO_LOAD_FACTORS = {
    "base": 1.0,
    "load+10": 1.1,
    "load-10": 0.9,
    "load+20": 1.2,
}


def resolve_model(cfg: ExperimentConfig, scenario: str = "base") -> FabModel:
    if cfg.model == "builtin:minifab":
        factor = SCENARIO_LOAD_FACTORS.get(scenario)
        if factor is None:
            raise ValueError(f"unknown minifab scenario {scenario!r}")
        return build_minifab(cfg.model_seed, load_factor=factor)
    if scenario != "base":
        raise ValueError("file-based models only provide the 'base' scenario")
    if cfg.model == "builtin:midifab":
        ref = resources.files("fabrl").joinpath("models/midifab.yaml")
        with resources.as_file(ref) as path:
            return load_model(path)
    return load_model(cfg.model)


def build_scenarios(cfg: ExperimentConfig, names: tuple[str, ...]) -> dict[str, FabModel]:
    return {name: resolve_model(cfg, name) for name in names}


def default_rule(model: FabModel) -> str:
    return model.tool_groups[0].dispatch_rule


def baseline_rule(cfg: ExperimentConfig, model: FabModel) -> str:
    return cfg.dispatch if cfg.dispatch else default_rule(model)


def controlled_groups(cfg: ExperimentConfig, model: FabModel) -> frozenset[str]:
    if cfg.controlled == ("all",):
        return frozenset(g.id for g in model.tool_groups)
    ids = {g.id for g in model.tool_groups}
    unknown = set(cfg.controlled) - ids
    if unknown:
        raise ValueError(f"unknown tool groups {sorted(unknown)}")
    return frozenset(cfg.controlled)


def model_is_hierarchical(model: FabModel) -> bool:
    """Heuristic baselines run as hierarchical composites when the model
    exercises priorities, setups, or time constraints."""
    if any(r.priority != "regular" for r in model.release_schedule):
        return True
    for route in model.routes.values():
        for s in route.steps:
            if s.setup_id is not None or s.time_constraint_hours is not None:
                return True
    return False


class ReferenceCache:
    """Memoized baseline reference runs keyed by (scenario, seed, rule)."""

    def __init__(self):
        self._store: dict = {}

    def get(self, model: FabModel, scenario: str, seed: int, rule: str, horizon: float) -> ReferenceSeries:
        key = (scenario, seed, rule, horizon)
        if key not in self._store:
            res = run_episode(model, HeuristicDispatcher(rule), seed, horizon)
            self._store[key] = ReferenceSeries.from_result(res)
        return self._store[key]


# ---------------------------------------------------------------------------
# baseline sweep
# ---------------------------------------------------------------------------


def cmd_baseline(cfg: ExperimentConfig, rules: tuple[str, ...] | None = None) -> list[dict]:
    """Run each heuristic across the seed set and tabulate the results.

    On hierarchical models every rule runs as the tie-break of the layered
    composite.  The returned rows carry raw medians plus the paper-style
    normalization where the highest value of each metric is scaled to 100.
    """
    model = resolve_model(cfg)
    hier = model_is_hierarchical(model)
    if rules is None:
        rules = tuple(
            f"hier:{r}" if hier else r for r in heuristics.PLAIN_RULES
        )
    seeds = cfg.train_seeds + cfg.test_seeds
    rows = []
    for rule in rules:
        wafers = []
        tards = []
        for seed in seeds:
            res = run_episode(model, HeuristicDispatcher(rule), seed, cfg.horizon_hours)
            wafers.append(res.final_tp)
            tards.append(res.total_tardiness)
        rows.append(
            {
                "rule": rule,
                "median_completed_wafers": statistics.median(wafers),
                "median_tardiness": statistics.median(tards),
                "per_seed_wafers": wafers,
                "per_seed_tardiness": tards,
            }
        )
    max_w = max(r["median_completed_wafers"] for r in rows) or 1
    max_t = max(r["median_tardiness"] for r in rows) or 1
    for r in rows:
        r["completed_wafers_norm"] = 100.0 * r["median_completed_wafers"] / max_w
        r["tardiness_norm"] = 100.0 * r["median_tardiness"] / max_t
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(cfg, out)
        with open(out / "baseline.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["rule", "median_completed_wafers", "median_tardiness",
                 "completed_wafers_norm", "tardiness_norm"]
            )
            for r in rows:
                w.writerow(
                    [r["rule"], r["median_completed_wafers"], r["median_tardiness"],
                     round(r["completed_wafers_norm"], 1), round(r["tardiness_norm"], 1)]
                )
    return rows


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig):
    """Dispatch to the configured trainer; reference runs are cached first."""
    scenarios = build_scenarios(cfg, cfg.train_scenarios)
    model = scenarios[cfg.train_scenarios[0]]
    rule = baseline_rule(cfg, model)
    controlled = controlled_groups(cfg, model)
    if not controlled:
        raise ValueError("no controlled tool groups configured")
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(cfg, out)

    if cfg.optimizer == "cmaes":
        train_cfg = EsTrainConfig(
            controlled=controlled,
            baseline_rule=rule,
            horizon=cfg.horizon_hours,
            iterations=cfg.iterations,
            train_pairs=tuple(
                (scen, seed) for scen in cfg.train_scenarios for seed in cfg.train_seeds
            ),
            cmaes=CmaesConfig(popsize=cfg.popsize, n_best=cfg.n_best, sigma0=cfg.sigma0),
            cost=CostConfig(variant=cfg.cost_variant),
            workers=cfg.workers,
            out_dir=str(out) if out else None,
        )
        return run_es_training(scenarios, train_cfg)

    from .ppo import validate_controlled_groups

    validate_controlled_groups(model, controlled)
    train_cfg = PpoTrainConfig(
        controlled=controlled,
        baseline_rule=rule,
        horizon=cfg.horizon_hours,
        episodes=cfg.iterations,
        ppo=PpoConfig(
            workers=cfg.workers,
            complete_episodes=cfg.ppo_complete_episodes,
            epochs=cfg.ppo_epochs,
            minibatch=cfg.ppo_minibatch,
            horizon=cfg.ppo_fragment,
            learning_rate=cfg.learning_rate,
            entropy_coef=cfg.entropy_coef,
        ),
        reward_variant=cfg.reward_variant,
        reward_span=cfg.reward_span,
        seed=cfg.train_seeds[0],
        out_dir=str(out) if out else None,
    )
    return run_ppo_training(scenarios, train_cfg)


def resume_es_training(cfg: ExperimentConfig, state_path):
    """Continue a checkpointed ES run; iteration numbering carries on."""
    from .cmaes import Cmaes

    scenarios = build_scenarios(cfg, cfg.train_scenarios)
    model = scenarios[cfg.train_scenarios[0]]
    rule = baseline_rule(cfg, model)
    es = Cmaes.load(state_path)
    train_cfg = EsTrainConfig(
        controlled=controlled_groups(cfg, model),
        baseline_rule=rule,
        horizon=cfg.horizon_hours,
        iterations=cfg.iterations,
        train_pairs=tuple(
            (scen, seed) for scen in cfg.train_scenarios for seed in cfg.train_seeds
        ),
        cost=CostConfig(variant=cfg.cost_variant),
        workers=cfg.workers,
        out_dir=cfg.out_dir,
    )
    return run_es_training(scenarios, train_cfg, resume=es)


# ---------------------------------------------------------------------------
# generalization evaluation
# ---------------------------------------------------------------------------


def cmd_eval(checkpoint_path, cfg: ExperimentConfig, desc: ArchDescriptor | None = None) -> list[dict]:
    """Run a frozen policy checkpoint over held-out seeds and scenarios.

    Each row reports tardiness/throughput improvement versus the baseline
    reference for one (scenario, seed) pair, flagged with whether the pair
    was part of training.
    """
    pairs = [
        (scen, seed, False) for scen in cfg.test_scenarios for seed in cfg.test_seeds
    ] + [(scen, seed, True) for scen in cfg.train_scenarios for seed in cfg.train_seeds]
    if not any(not trained for _, _, trained in pairs):
        raise ValueError("no held-out evaluation pairs configured")
    params, lot_norm, _, _ = load_checkpoint(checkpoint_path, expected_desc=desc)
    names = tuple(dict.fromkeys(cfg.test_scenarios + cfg.train_scenarios))
    scenarios = build_scenarios(cfg, names)
    model = scenarios[names[0]]
    rule = baseline_rule(cfg, model)
    controlled = controlled_groups(cfg, model)
    cache = ReferenceCache()
    rows = []
    for scen, seed, trained in pairs:
        m = scenarios[scen]
        ref = cache.get(m, scen, seed, rule, cfg.horizon_hours)
        disp = PolicyDispatcher(
            params=params,
            controlled=controlled,
            fallback_rule=rule,
            base_norm=lot_norm,
            mode="es",
            frozen=True,
        )
        res = run_episode(m, disp, seed, cfg.horizon_hours, reference=ref)
        ref_td = ref.final_td_in + ref.final_td_out
        rows.append(
            {
                "scenario": scen,
                "seed": seed,
                "in_training": trained,
                "tardiness": res.total_tardiness,
                "ref_tardiness": ref_td,
                "tardiness_impr_pct": 100.0 * (ref_td - res.total_tardiness) / ref_td
                if ref_td > 0
                else 0.0,
                "throughput": res.final_tp,
                "ref_throughput": ref.final_tp,
                "throughput_impr_pct": 100.0 * (res.final_tp - ref.final_tp) / ref.final_tp
                if ref.final_tp > 0
                else 0.0,
            }
        )
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


def cmd_timing(
    cfg: ExperimentConfig,
    worker_counts: tuple[int, ...] = (1, 4),
    iterations: int = 3,
) -> list[dict]:
    """Measure ES wall-clock per iteration for several worker counts.

    Uses the real training path (population evaluation through the worker
    pool) so the numbers include serialization and merge overhead.
    """
    if iterations <= 0:
        return []
    scenarios = build_scenarios(cfg, cfg.train_scenarios)
    model = scenarios[cfg.train_scenarios[0]]
    rule = baseline_rule(cfg, model)
    controlled = controlled_groups(cfg, model)
    rows = []
    for workers in worker_counts:
        times: list[float] = []
        train_cfg = EsTrainConfig(
            controlled=controlled,
            baseline_rule=rule,
            horizon=cfg.horizon_hours,
            iterations=iterations,
            train_pairs=tuple(
                (scen, seed) for scen in cfg.train_scenarios for seed in cfg.train_seeds
            ),
            cmaes=CmaesConfig(popsize=cfg.popsize, n_best=cfg.n_best),
            workers=workers,
        )
        run_es_training(scenarios, train_cfg, timing_hook=lambda it, dt: times.append(dt))
        rows.append(
            {
                "model": cfg.model,
                "controlled": ",".join(sorted(controlled)),
                "workers": workers,
                "iterations": iterations,
                "seconds_per_iteration": statistics.median(times),
                "total_seconds": sum(times),
            }
        )
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    return rows


def _echo_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
