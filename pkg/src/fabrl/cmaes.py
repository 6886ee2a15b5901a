"""Covariance matrix adaptation evolution strategy.

Minimizes a black-box cost over parameter vectors.  Three modes:

* ``full`` -- standard CMA-ES with cumulative step-size control and
  rank-one plus rank-mu covariance updates (eigendecomposition refreshed
  lazily for large dimensions),
* ``diag`` -- separable variant adapting only the coordinate variances,
  for very large parameter counts,
* ``simplified`` -- the bare sample/select/average scheme where the new
  mean is the elite average and the step size becomes the norm of the
  mean elite displacement.

Selection uses the ``n_best`` lowest costs with an unweighted elite mean
by default (log-rank weights are available behind a flag).
"""

from __future__ import annotations

import csv
import json
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kpi import CostConfig
from .parallel import EpisodeEvaluator, EvalContext, eval_candidate, norm_from_state, norm_state
from .policy import ArchDescriptor, PolicyParams, RunningStats, save_checkpoint, srpt_like_params


@dataclass(frozen=True)
class CmaesConfig:
    popsize: int = 16
    n_best: int = 8
    sigma0: float = 0.5
    mode: str = "full"  # full | diag | simplified
    log_rank_weights: bool = False
    seed: int = 0
    # switch to diagonal adaptation above this dimension unless forced
    diag_threshold: int = 2000

    def __post_init__(self):
        if self.popsize < 2:
            raise ValueError("popsize must be >= 2")
        if not 1 <= self.n_best <= self.popsize:
            raise ValueError("n_best must be in [1, popsize]")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be > 0")
        if self.mode not in ("full", "diag", "simplified"):
            raise ValueError(f"unknown CMA-ES mode {self.mode!r}")


class Cmaes:
    """ask/tell optimizer state over vectors of dimension ``dim``."""

    def __init__(self, x0: np.ndarray, cfg: CmaesConfig = CmaesConfig()):
        self.cfg = cfg
        self.mean = np.asarray(x0, dtype=np.float64).copy()
        self.dim = len(self.mean)
        self.sigma = cfg.sigma0
        self.mode = cfg.mode
        if self.mode == "full" and self.dim > cfg.diag_threshold:
            self.mode = "diag"
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.best_cost = np.inf
        self.best_x = self.mean.copy()
        self._pending: np.ndarray | None = None

        n, mu = self.dim, cfg.n_best
        if cfg.log_rank_weights:
            w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
            self.weights = w / w.sum()
        else:
            self.weights = np.full(mu, 1.0 / mu)
        self.mu_eff = 1.0 / np.sum(self.weights**2)

        self.c_sigma = (self.mu_eff + 2.0) / (n + self.mu_eff + 5.0)
        self.d_sigma = (
            1.0 + 2.0 * max(0.0, np.sqrt((self.mu_eff - 1.0) / (n + 1.0)) - 1.0) + self.c_sigma
        )
        self.c_c = (4.0 + self.mu_eff / n) / (n + 4.0 + 2.0 * self.mu_eff / n)
        self.c_1 = 2.0 / ((n + 1.3) ** 2 + self.mu_eff)
        self.c_mu = min(
            1.0 - self.c_1,
            2.0 * (self.mu_eff - 2.0 + 1.0 / self.mu_eff) / ((n + 2.0) ** 2 + self.mu_eff),
        )
        if self.mode == "diag":
            # separable variant learns n variances instead of n^2 covariances
            self.c_mu = min(1.0 - self.c_1, self.c_mu * (n + 2.0) / 3.0)
        self.chi_n = np.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

        self.p_sigma = np.zeros(n)
        self.p_c = np.zeros(n)
        if self.mode == "full":
            self.C = np.eye(n)
            self._B = np.eye(n)
            self._D = np.ones(n)
            self._eigen_stale = 0
            self._eigen_interval = max(1, int(1.0 / (10.0 * n * (self.c_1 + self.c_mu))))
        else:
            self.C_diag = np.ones(n)

    # -- sampling ------------------------------------------------------------

    def ask(self) -> np.ndarray:
        """Population matrix (popsize, dim) sampled from N(mean, sigma^2 C)."""
        z = self.rng.standard_normal((self.cfg.popsize, self.dim))
        if self.mode == "full":
            y = z * self._D[None, :] @ self._B.T
        elif self.mode == "diag":
            y = z * np.sqrt(self.C_diag)[None, :]
        else:
            y = z
        pop = self.mean[None, :] + self.sigma * y
        self._pending = pop
        return pop

    # -- update --------------------------------------------------------------

    def tell(self, costs) -> None:
        """Rank the last population by cost (lower is better) and update."""
        if self._pending is None:
            raise RuntimeError("tell called before ask")
        pop = self._pending
        self._pending = None
        costs = np.asarray(costs, dtype=np.float64)
        if costs.shape != (self.cfg.popsize,):
            raise ValueError(
                f"expected {self.cfg.popsize} costs, got shape {costs.shape}"
            )
        costs = np.where(np.isfinite(costs), costs, np.inf)
        order = np.argsort(costs, kind="stable")
        elite = pop[order[: self.cfg.n_best]]

        if costs[order[0]] < self.best_cost:
            self.best_cost = float(costs[order[0]])
            self.best_x = pop[order[0]].copy()

        old_mean = self.mean
        if self.mode == "simplified":
            self.mean = elite.mean(axis=0)
            self.sigma = max(float(np.linalg.norm(self.mean - old_mean)), 1e-12)
            self.iteration += 1
            return

        y_elite = (elite - old_mean[None, :]) / self.sigma
        y_w = self.weights @ y_elite
        self.mean = old_mean + self.sigma * y_w

        if self.mode == "full":
            self._refresh_eigen_if_needed()
            c_inv_half_y = self._B @ ((self._B.T @ y_w) / self._D)
        else:
            c_inv_half_y = y_w / np.sqrt(self.C_diag)
        self.p_sigma = (1.0 - self.c_sigma) * self.p_sigma + np.sqrt(
            self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff
        ) * c_inv_half_y

        t = self.iteration + 1
        ps_norm = np.linalg.norm(self.p_sigma)
        h_sigma = float(
            ps_norm / np.sqrt(1.0 - (1.0 - self.c_sigma) ** (2 * t))
            < (1.4 + 2.0 / (self.dim + 1.0)) * self.chi_n
        )
        self.p_c = (1.0 - self.c_c) * self.p_c + h_sigma * np.sqrt(
            self.c_c * (2.0 - self.c_c) * self.mu_eff
        ) * y_w

        c1a = self.c_1 * (1.0 - (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c))
        if self.mode == "full":
            rank_mu = np.einsum("i,ij,ik->jk", self.weights, y_elite, y_elite)
            self.C = (
                (1.0 - c1a - self.c_mu) * self.C
                + self.c_1 * np.outer(self.p_c, self.p_c)
                + self.c_mu * rank_mu
            )
            self._eigen_stale += 1
        else:
            rank_mu = self.weights @ (y_elite**2)
            self.C_diag = (
                (1.0 - c1a - self.c_mu) * self.C_diag
                + self.c_1 * self.p_c**2
                + self.c_mu * rank_mu
            )
            self.C_diag = np.maximum(self.C_diag, 1e-20)

        self.sigma *= np.exp((self.c_sigma / self.d_sigma) * (ps_norm / self.chi_n - 1.0))
        self.iteration += 1

    def _refresh_eigen_if_needed(self) -> None:
        if self._eigen_stale >= self._eigen_interval:
            self._force_eigen()

    def _force_eigen(self) -> None:
        self.C = (self.C + self.C.T) / 2.0
        vals, vecs = np.linalg.eigh(self.C)
        self._D = np.sqrt(np.maximum(vals, 1e-20))
        self._B = vecs
        self._eigen_stale = 0

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        payload = {
            "mean": self.mean,
            "sigma": np.array(self.sigma),
            "p_sigma": self.p_sigma,
            "p_c": self.p_c,
            "iteration": np.array(self.iteration),
            "best_cost": np.array(self.best_cost),
            "best_x": self.best_x,
            "cfg": np.frombuffer(json.dumps(self.cfg.__dict__).encode(), dtype=np.uint8),
            "rng": np.frombuffer(json.dumps(self.rng.bit_generator.state).encode(), dtype=np.uint8),
            "mode": np.frombuffer(self.mode.encode(), dtype=np.uint8),
        }
        if self.mode == "full":
            payload["C"] = self.C
            payload["eigen_B"] = self._B
            payload["eigen_D"] = self._D
            payload["eigen_stale"] = np.array(self._eigen_stale)
        elif self.mode == "diag":
            payload["C_diag"] = self.C_diag
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "Cmaes":
        with np.load(path) as data:
            cfg = CmaesConfig(**json.loads(bytes(data["cfg"]).decode()))
            es = cls(data["mean"].copy(), cfg)
            es.mode = bytes(data["mode"]).decode()
            es.sigma = float(data["sigma"])
            es.p_sigma = data["p_sigma"].copy()
            es.p_c = data["p_c"].copy()
            es.iteration = int(data["iteration"])
            es.best_cost = float(data["best_cost"])
            es.best_x = data["best_x"].copy()
            if "C" in data:
                es.C = data["C"].copy()
                es._B = data["eigen_B"].copy()
                es._D = data["eigen_D"].copy()
                es._eigen_stale = int(data["eigen_stale"])
            if "C_diag" in data:
                es.C_diag = data["C_diag"].copy()
            es.rng.bit_generator.state = json.loads(bytes(data["rng"]).decode())
        return es


# ---------------------------------------------------------------------------
# Episode-based training
# ---------------------------------------------------------------------------

ES_LOG_COLUMNS = ("iteration", "best_cost", "mean_cost", "tardiness_vs_ref_pct", "throughput_vs_ref_pct")


@dataclass
class EsTrainConfig:
    controlled: frozenset[str]
    baseline_rule: str
    horizon: float
    iterations: int = 40
    train_pairs: tuple[tuple[str, int], ...] = (("base", 0),)
    cmaes: CmaesConfig = field(default_factory=CmaesConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    workers: int = 1
    out_dir: str | None = None
    checkpoint_every: int = 25
    # search center: a shortest-remaining-equivalent policy keeps the early
    # population near baseline performance instead of in the penalty cliffs
    init: str = "srpt_like"  # or "zeros"


@dataclass
class EsTrainResult:
    best_params: PolicyParams
    best_cost: float
    lot_norm: RunningStats
    log_rows: list[dict]
    optimizer: Cmaes


def seed_normalizer_from_reference(reference_log: list[np.ndarray]) -> RunningStats:
    stats = RunningStats(dim=reference_log[0].shape[-1])
    for rows in reference_log:
        stats.update(rows)
    return stats


def _improvement_pcts(kpis) -> tuple[float, float]:
    """Mean tardiness/throughput improvement percentages across episodes."""
    td_pcts = []
    tp_pcts = []
    for _, _, td, tp, ref_td, ref_tp in kpis:
        td_pcts.append(100.0 * (ref_td - td) / ref_td if ref_td > 0 else 0.0)
        tp_pcts.append(100.0 * (tp - ref_tp) / ref_tp if ref_tp > 0 else 0.0)
    return float(np.mean(td_pcts)), float(np.mean(tp_pcts))


def run_es_training(
    scenarios: dict[str, "FabModel"],
    cfg: EsTrainConfig,
    desc: ArchDescriptor = ArchDescriptor(),
    lot_norm: RunningStats | None = None,
    resume: Cmaes | None = None,
    timing_hook=None,
) -> EsTrainResult:
    """Iterate ask -> parallel episode evaluation -> cost -> tell.

    Every candidate is evaluated as full episodes over the configured
    (scenario, seed) training pairs; the per-iteration log records best and
    mean cost plus the best candidate's KPI improvement versus the baseline
    reference runs.
    """
    from .dispatchers import HeuristicDispatcher  # local to avoid cycles
    from .simkernel import ReferenceSeries, run_episode

    out_dir_early = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir_early:
        out_dir_early.mkdir(parents=True, exist_ok=True)
    references: dict[tuple[str, int], ReferenceSeries] = {}
    for scenario, seed in cfg.train_pairs:
        res = run_episode(
            scenarios[scenario], HeuristicDispatcher(cfg.baseline_rule), seed, cfg.horizon
        )
        references[(scenario, seed)] = ReferenceSeries.from_result(res)
        if out_dir_early:
            from .kpi import write_snapshot_csv

            write_snapshot_csv(
                res.snapshots, out_dir_early / f"reference_{scenario}_seed{seed}.csv"
            )

    if lot_norm is None:
        lot_norm = _featurize_reference(scenarios, cfg, references)

    ctx = EvalContext(
        scenarios=scenarios,
        horizon=cfg.horizon,
        baseline_rule=cfg.baseline_rule,
        controlled=cfg.controlled,
        desc=desc,
        cost_cfg=cfg.cost,
        references=references,
    )
    if resume is not None:
        es = resume
    else:
        if cfg.init == "srpt_like":
            x0 = srpt_like_params(desc).theta
        elif cfg.init == "zeros":
            x0 = np.zeros(desc.param_count)
        else:
            raise ValueError(f"unknown init mode {cfg.init!r}")
        es = Cmaes(x0, cfg.cmaes)
    log_rows: list[dict] = []
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    with EpisodeEvaluator(ctx, cfg.workers) as pool:
        start_iter = es.iteration
        for it in range(start_iter, start_iter + cfg.iterations):
            t0 = _time.perf_counter()
            pop = es.ask()
            base_state = norm_state(lot_norm)
            tasks = [
                (i, pop[i], base_state, list(cfg.train_pairs), False)
                for i in range(len(pop))
            ]
            results = pool.map(eval_candidate, tasks)
            results.sort(key=lambda r: r[0])
            costs = np.array([r[1] for r in results])
            es.tell(costs)
            # merge normalizer deltas in candidate order (deterministic)
            for r in results:
                delta = norm_from_state(lot_norm.dim, r[3], frozen=False)
                lot_norm.merge(delta)
            best_i = int(np.argmin(costs))
            td_pct, tp_pct = _improvement_pcts(results[best_i][2])
            row = {
                "iteration": it,
                "best_cost": float(costs[best_i]),
                "mean_cost": float(np.mean(costs[np.isfinite(costs)]))
                if np.isfinite(costs).any()
                else float("inf"),
                "tardiness_vs_ref_pct": td_pct,
                "throughput_vs_ref_pct": tp_pct,
            }
            log_rows.append(row)
            if timing_hook is not None:
                timing_hook(it, _time.perf_counter() - t0)
            if out_dir and ((it + 1) % cfg.checkpoint_every == 0 or it == start_iter + cfg.iterations - 1):
                es.save(out_dir / "cmaes_state.npz")
                save_checkpoint(
                    out_dir / "best_params.npz",
                    PolicyParams(es.best_x.copy(), desc),
                    lot_norm.copy(frozen=True),
                )

    if out_dir:
        write_training_log(out_dir / "training_log.csv", log_rows)
    return EsTrainResult(
        best_params=PolicyParams(es.best_x.copy(), desc),
        best_cost=es.best_cost,
        lot_norm=lot_norm,
        log_rows=log_rows,
        optimizer=es,
    )


def _featurize_reference(scenarios, cfg: EsTrainConfig, references) -> RunningStats:
    """Warm up the lot-feature statistics by replaying the reference runs
    with a recording heuristic dispatcher (decisions stay heuristic)."""
    from .dispatchers import HeuristicDispatcher
    from .policy import featurize_queue
    from .simkernel import run_episode

    stats = RunningStats(dim=ArchDescriptor().n_lot_features)

    class Recorder(HeuristicDispatcher):
        def decide(self, ctx):
            if ctx.group_id in cfg.controlled:
                stats.update(featurize_queue(sorted(ctx.eligible), ctx.tool, ctx.sim))
            return super().decide(ctx)

    for scenario, seed in cfg.train_pairs:
        run_episode(scenarios[scenario], Recorder(cfg.baseline_rule), seed, cfg.horizon)
    if stats.count < 2:
        # controlled tools saw at most one lot; fall back to unit stats
        stats.update(np.zeros((1, stats.dim)))
        stats.update(np.ones((1, stats.dim)))
    return stats


def write_training_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ES_LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in ES_LOG_COLUMNS})
