"""Dispatcher implementations plugged into the simulation kernel.

``HeuristicDispatcher`` wraps a static rule (plain or hierarchical) and
greedily fills batches by the same rule.  ``PolicyDispatcher`` scores the
eligible queue with the attention network on the groups it controls and
falls back to the baseline rule everywhere else; in ``es`` mode it picks
the argmax and co-batches by score, in ``ppo`` mode it samples and records
a transition per decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import heuristics, policy
from .simkernel import Decision, DecisionContext, form_batch


def _batch_context(ctx: DecisionContext):
    """(max_size, min_size, compat_key) for the deciding tool, or None."""
    group = ctx.model.groups_by_id[ctx.group_id]
    if group.batching is None:
        return None

    def compat_key(lot_id: int):
        lot = ctx.lots[lot_id]
        step = ctx.model.step_of(lot)
        if not step.batch_eligible:
            # never co-batched: a unique key per lot
            return ("solo", lot_id)
        return ctx.model.batch_family(ctx.group_id, lot.product_id, lot.current_step)

    return group.batching.max_size, group.batching.min_size, compat_key


class HeuristicDispatcher:
    """Static-rule dispatcher; ``rule`` accepts e.g. "srpt" or "hier:cr"."""

    def __init__(self, rule: str):
        heuristics.parse_rule(rule)
        self.rule = rule

    def decide(self, ctx: DecisionContext) -> Decision:
        lots = [ctx.lots[lid] for lid in ctx.eligible]
        ordered = heuristics.order_queue(self.rule, lots, ctx.tool, ctx.now, ctx.model)
        top = ordered[0].id
        binfo = _batch_context(ctx)
        step = ctx.model.step_of(ctx.lots[top])
        if binfo is None or not step.batch_eligible:
            return Decision.single(top)
        max_size, min_size, compat_key = binfo
        # score by rule order: earlier in the ordering, higher the score
        scores = {lot.id: float(len(ordered) - i) for i, lot in enumerate(ordered)}
        batch = form_batch(top, [l.id for l in ordered], scores, max_size, min_size, compat_key)
        return Decision(lot_id=top, batch=batch)


@dataclass
class PolicyDispatcher:
    """Attention-policy dispatcher for the controlled groups.

    The per-episode normalizer delta lives in ``local_norm`` and is merged
    into the trainer's global statistics at episode end; ``base_norm`` is a
    frozen snapshot of those global statistics.  With ``frozen=True`` (used
    by evaluation runs) no statistics are collected at all.
    """

    params: policy.PolicyParams
    controlled: frozenset[str]
    fallback_rule: str
    base_norm: policy.RunningStats
    mode: str = "es"  # or "ppo"
    frozen: bool = False
    fab_base_norm: policy.RunningStats | None = None
    reward_variant: str = "D"
    local_norm: policy.RunningStats = field(init=False)
    fab_local_norm: policy.RunningStats = field(init=False)
    transitions: list = field(init=False, default_factory=list)
    _fallback: HeuristicDispatcher = field(init=False)

    def __post_init__(self):
        if self.mode not in ("es", "ppo"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.mode == "ppo" and not self.params.desc.critic:
            raise policy.MissingCriticError("ppo mode needs critic-enabled parameters")
        self.local_norm = policy.RunningStats(dim=self.base_norm.dim, frozen=self.frozen)
        fab_dim = self.fab_base_norm.dim if self.fab_base_norm is not None else policy.N_FAB_FEATURES
        self.fab_local_norm = policy.RunningStats(dim=fab_dim, frozen=self.frozen)
        self._fallback = HeuristicDispatcher(self.fallback_rule)

    def decide(self, ctx: DecisionContext) -> Decision:
        if ctx.group_id not in self.controlled:
            return self._fallback.decide(ctx)
        order = sorted(ctx.eligible)  # canonical queue order: ascending lot id
        raw = policy.featurize_queue(order, ctx.tool, ctx.sim)
        self.local_norm.update(raw)
        norm = policy.merged(self.base_norm, self.local_norm)
        feats = norm.apply(raw)
        if self.mode == "es":
            scores = policy.attention_scores(feats, self.params)
            idx = policy.select_es(scores)
            return self._with_batch(ctx, order, idx, scores)
        return self._decide_ppo(ctx, order, feats)

    def _decide_ppo(self, ctx: DecisionContext, order: list[int], feats: np.ndarray) -> Decision:
        fab_raw = ctx.sim.fab_state_diff(ctx.group_id)
        self.fab_local_norm.update(fab_raw[None, :])
        if self.fab_base_norm is not None:
            fab_norm = policy.merged(self.fab_base_norm, self.fab_local_norm)
        else:
            fab_norm = self.fab_local_norm
        if fab_norm.count < 2 and not fab_norm.frozen:
            # cold start: no usable statistics yet, feed a neutral fab state
            fab = np.zeros_like(fab_raw)
        else:
            fab = fab_norm.apply(fab_raw)
        scores, value, _ = policy._forward(feats, self.params, fab=fab)
        idx, logp = policy.select_ppo(scores, ctx.policy_rng)
        self.transitions.append(
            Transition(
                feats=feats,
                fab=fab,
                action=idx,
                log_prob_old=logp,
                value_old=value,
                reward=0.0,
                done=False,
                time=ctx.now,
            )
        )
        # PPO control is restricted to non-batch tools; single selection only
        return Decision.single(order[idx])

    def _with_batch(self, ctx, order: list[int], idx: int, scores: np.ndarray) -> Decision:
        top = order[idx]
        binfo = _batch_context(ctx)
        step = ctx.model.step_of(ctx.lots[top])
        if binfo is None or not step.batch_eligible:
            return Decision.single(top)
        max_size, min_size, compat_key = binfo
        score_map = {lid: float(s) for lid, s in zip(order, scores)}
        batch = form_batch(top, order, score_map, max_size, min_size, compat_key)
        return Decision(lot_id=top, batch=batch)


@dataclass
class Transition:
    """One PPO decision sample."""

    feats: np.ndarray  # normalized queue features (L, 11)
    fab: np.ndarray  # normalized fab-state difference (8,)
    action: int
    log_prob_old: float
    value_old: float
    reward: float
    done: bool
    time: float


def make_baseline(rule: str) -> HeuristicDispatcher:
    return HeuristicDispatcher(rule)
