"""Proximal policy optimization over the attention dispatching policy.

Rollouts come straight from episode decision logs.  Each worker runs one
episode per training iteration on its own seed; transitions carry the
normalized observations, the sampled action with its log-probability, the
collection-time value estimate, and the windowed KPI reward assigned to
the decision's hour.  Updates run at episode boundaries: in
``complete_episodes`` mode one update phase sees every transition with
whole-episode advantage estimation, otherwise the log is chopped into
fragments of length ``horizon`` whose advantages do not flow across
fragment boundaries and the kept fragments are split into successive
update phases (the staleness this creates is the point of the mode).

Gradients are exact analytic backprop through the scoring network and are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import policy
from .dispatchers import Transition
from .kpi import CostConfig
from .parallel import (
    EpisodeEvaluator,
    EvalContext,
    collect_rollout,
    norm_from_state,
    norm_state,
)
from .policy import ArchDescriptor, PolicyParams, RunningStats
from .simkernel import CapacityError


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatch: int = 128
    horizon: int = 16  # rollout fragment length T
    workers: int = 2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    complete_episodes: bool = True
    learning_rate: float = 3e-4
    rollouts_per_worker: int = 50
    updates_per_episode: int = 2  # used when episodes are truncated
    max_buffer_transitions: int = 2_000_000

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("rollout fragment length must be >= 1")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must be in [0, 1]")
        if self.clip_eps < 0:
            raise ValueError("clip epsilon must be >= 0")
        if self.minibatch < 1:
            raise ValueError("minibatch size must be >= 1")


def compute_gae(
    transitions: list[Transition],
    values: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one trajectory segment.

    ``values`` must hold one entry per transition plus the bootstrap value
    of the state after the segment.  Returns raw (unnormalized) advantages
    and the value targets ``advantages + values[:-1]``.
    """
    n = len(transitions)
    if values.shape != (n + 1,):
        raise ValueError(f"values must have length {n + 1}, got {values.shape}")
    adv = np.zeros(n)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        tr = transitions[t]
        cont = 0.0 if tr.done else 1.0
        delta = tr.reward + gamma * cont * values[t + 1] - values[t]
        carry = delta + gamma * lam * cont * carry
        adv[t] = carry
    return adv, adv + values[:-1]


@dataclass
class Adam:
    size: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None  # type: ignore[assignment]
    v: np.ndarray = None  # type: ignore[assignment]
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def ppo_loss(
    batch: list[Transition],
    advantages: np.ndarray,
    returns: np.ndarray,
    params: PolicyParams,
    cfg: PpoConfig,
) -> tuple[float, np.ndarray, dict]:
    """Clipped-surrogate loss with value and entropy terms, plus its exact
    gradient as a flat vector aligned with ``params.theta``."""
    if not batch:
        raise ValueError("empty update batch")
    n = len(batch)
    flat_grad, grads = policy.zero_grads(params.desc)
    loss_pi = 0.0
    loss_v = 0.0
    entropy_sum = 0.0
    clipped_count = 0
    for tr, adv, ret in zip(batch, advantages, returns):
        scores, value, cache = policy._forward(tr.feats, params, fab=tr.fab)
        logps = policy.log_softmax(scores)
        probs = np.exp(logps)
        logp = logps[tr.action]
        rho = math.exp(logp - tr.log_prob_old)
        unclipped = rho * adv
        clipped = float(np.clip(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)) * adv
        surr = min(unclipped, clipped)
        ent = float(-(probs * logps).sum())
        loss_pi -= surr
        loss_v += (value - ret) ** 2
        entropy_sum += ent

        binds = (adv > 0 and rho >= 1.0 + cfg.clip_eps) or (
            adv < 0 and rho <= 1.0 - cfg.clip_eps
        )
        dlogp = 0.0 if binds else -adv * rho / n
        if binds:
            clipped_count += 1
        one_hot = np.zeros_like(probs)
        one_hot[tr.action] = 1.0
        dscores = dlogp * (one_hot - probs)
        dscores += (-cfg.entropy_coef / n) * (-probs * (logps + ent))
        dvalue = 2.0 * cfg.value_coef * (value - ret) / n
        policy._backward(cache, dscores, dvalue, params, grads)

    loss = loss_pi / n + cfg.value_coef * loss_v / n - cfg.entropy_coef * entropy_sum / n
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite PPO loss over batch of {n}")
    stats = {
        "policy_loss": loss_pi / n,
        "value_loss": loss_v / n,
        "entropy": entropy_sum / n,
        "clip_fraction": clipped_count / n,
    }
    return float(loss), flat_grad, stats


def _segments(log: list[Transition], cfg: PpoConfig) -> list[tuple[list[Transition], float]]:
    """Split one worker's episode log into (segment, bootstrap value) pairs."""
    if not log:
        return []
    log[-1].done = True
    if cfg.complete_episodes:
        return [(log, 0.0)]
    out = []
    t = cfg.horizon
    limit = cfg.rollouts_per_worker * cfg.horizon
    for start in range(0, min(len(log), limit), t):
        seg = log[start : start + t]
        nxt = start + len(seg)
        bootstrap = log[nxt].value_old if nxt < len(log) else 0.0
        out.append((seg, bootstrap))
    return out


def _update_phase(batch, params, cfg, adam, rng) -> tuple[PolicyParams, dict]:
    transitions, advantages, returns = batch
    std = advantages.std()
    norm_adv = (advantages - advantages.mean()) / (std if std > 1e-8 else 1.0)
    idx = np.arange(len(transitions))
    stats: dict = {}
    theta = params.theta
    m = min(cfg.minibatch, len(transitions))
    for _ in range(cfg.epochs):
        rng.shuffle(idx)
        for lo in range(0, len(idx), m):
            sel = idx[lo : lo + m]
            _, grad, stats = ppo_loss(
                [transitions[i] for i in sel],
                norm_adv[sel],
                returns[sel],
                PolicyParams(theta, params.desc),
                cfg,
            )
            theta = adam.step(theta, grad)
    return PolicyParams(theta, params.desc), stats


PPO_LOG_COLUMNS = (
    "iteration",
    "mean_reward",
    "tardiness_vs_ref_pct",
    "throughput_vs_ref_pct",
    "policy_loss",
    "value_loss",
    "entropy",
)


@dataclass
class PpoTrainConfig:
    controlled: frozenset[str]
    baseline_rule: str
    horizon: float
    episodes: int = 40
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward_variant: str = "D"
    reward_span: int = 24
    seed: int = 0
    out_dir: str | None = None


@dataclass
class PpoTrainResult:
    params: PolicyParams
    lot_norm: RunningStats
    fab_norm: RunningStats
    log_rows: list[dict]


def validate_controlled_groups(model, controlled: frozenset[str]) -> None:
    """Policy-gradient control cannot include batch tools."""
    for gid in controlled:
        group = model.groups_by_id.get(gid)
        if group is None:
            raise ValueError(f"unknown tool group {gid!r}")
        if group.batching is not None:
            raise ValueError(
                f"tool group {gid!r} batches lots; batch tools cannot be"
                " controlled by the policy-gradient trainer"
            )


def run_ppo_training(
    scenarios: dict[str, "FabModel"],
    cfg: PpoTrainConfig,
    desc: ArchDescriptor | None = None,
) -> PpoTrainResult:
    """Iterate: broadcast params -> N worker episodes -> aggregate -> update.

    Each iteration runs one episode per worker on fresh seeds, fills in the
    windowed rewards, and performs the configured update phases.  The log
    records per-iteration mean reward, KPI improvement versus the baseline
    reference (averaged over the workers' seeds), and loss components.
    """
    if desc is None:
        desc = ArchDescriptor(critic=True)
    if not desc.critic:
        raise policy.MissingCriticError("PPO training needs a critic-enabled descriptor")
    for model in scenarios.values():
        validate_controlled_groups(model, cfg.controlled)

    reward_sign = -1.0 if cfg.reward_variant == "B" else 1.0
    ctx = EvalContext(
        scenarios=scenarios,
        horizon=cfg.horizon,
        baseline_rule=cfg.baseline_rule,
        controlled=cfg.controlled,
        desc=desc,
        cost_cfg=CostConfig(),
        reward_variant=cfg.reward_variant,
        reward_span=cfg.reward_span,
        reward_sign=reward_sign,
    )
    rng = np.random.default_rng(cfg.seed)
    params = PolicyParams.random(desc, rng, scale=0.1)
    lot_norm = _seed_lot_norm(scenarios, cfg)
    fab_norm = RunningStats(dim=desc.n_fab_features)
    adam = Adam(size=desc.param_count, lr=cfg.ppo.learning_rate)
    update_rng = np.random.default_rng(cfg.seed + 1)
    scenario_names = sorted(scenarios)
    log_rows: list[dict] = []
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    n_workers = cfg.ppo.workers
    with EpisodeEvaluator(ctx, n_workers) as pool:
        for it in range(cfg.episodes):
            lot_state = norm_state(lot_norm)
            fab_state = norm_state(fab_norm)
            tasks = []
            for w in range(n_workers):
                scen = scenario_names[(it * n_workers + w) % len(scenario_names)]
                seed = cfg.seed + 1000 + it * n_workers + w
                tasks.append((w, params.theta, lot_state, fab_state, scen, seed))
            results = pool.map(collect_rollout, tasks)
            results.sort(key=lambda r: r[0])

            segments: list[tuple[list[Transition], float]] = []
            total = 0
            for _, log, _, lot_delta, fab_delta in results:
                total += len(log)
                if cfg.ppo.complete_episodes and total > cfg.ppo.max_buffer_transitions:
                    raise CapacityError(
                        f"complete-episode buffer needs {total} transitions,"
                        f" budget is {cfg.ppo.max_buffer_transitions}"
                    )
                segments.extend(_segments(log, cfg.ppo))
                lot_norm.merge(norm_from_state(lot_norm.dim, lot_delta, frozen=False))
                fab_norm.merge(norm_from_state(fab_norm.dim, fab_delta, frozen=False))

            stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
            if segments and cfg.ppo.epochs > 0:
                phases = 1 if cfg.ppo.complete_episodes else max(1, cfg.ppo.updates_per_episode)
                for chunk in np.array_split(np.arange(len(segments)), phases):
                    if len(chunk) == 0:
                        continue
                    transitions: list[Transition] = []
                    advs: list[np.ndarray] = []
                    rets: list[np.ndarray] = []
                    for si in chunk:
                        seg, bootstrap = segments[si]
                        values = np.array([t.value_old for t in seg] + [bootstrap])
                        a, r = compute_gae(seg, values, cfg.ppo.gamma, cfg.ppo.gae_lambda)
                        transitions.extend(seg)
                        advs.append(a)
                        rets.append(r)
                    params, stats = _update_phase(
                        (transitions, np.concatenate(advs), np.concatenate(rets)),
                        params,
                        cfg.ppo,
                        adam,
                        update_rng,
                    )

            rewards = [t.reward for _, log, _, _, _ in results for t in log]
            td_pcts, tp_pcts = [], []
            for _, _, (scen, seed, td, tp, ref_td, ref_tp), _, _ in results:
                td_pcts.append(100.0 * (ref_td - td) / ref_td if ref_td > 0 else 0.0)
                tp_pcts.append(100.0 * (tp - ref_tp) / ref_tp if ref_tp > 0 else 0.0)
            row = {
                "iteration": it,
                "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
                "tardiness_vs_ref_pct": float(np.mean(td_pcts)),
                "throughput_vs_ref_pct": float(np.mean(tp_pcts)),
                "policy_loss": stats.get("policy_loss", 0.0),
                "value_loss": stats.get("value_loss", 0.0),
                "entropy": stats.get("entropy", 0.0),
            }
            log_rows.append(row)

    if out_dir:
        with open(out_dir / "training_log.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=PPO_LOG_COLUMNS)
            w.writeheader()
            for row in log_rows:
                w.writerow({k: row[k] for k in PPO_LOG_COLUMNS})
        policy.save_checkpoint(
            out_dir / "ppo_params.npz", params, lot_norm.copy(frozen=True), fab_norm.copy(frozen=True)
        )
    return PpoTrainResult(params=params, lot_norm=lot_norm, fab_norm=fab_norm, log_rows=log_rows)


def _seed_lot_norm(scenarios, cfg: PpoTrainConfig) -> RunningStats:
    from .cmaes import EsTrainConfig, _featurize_reference

    first = sorted(scenarios)[0]
    es_cfg = EsTrainConfig(
        controlled=cfg.controlled,
        baseline_rule=cfg.baseline_rule,
        horizon=cfg.horizon,
        train_pairs=((first, cfg.seed + 500),),
    )
    return _featurize_reference(scenarios, es_cfg, {})
