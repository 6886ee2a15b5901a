"""Acceptance suite: one test per criterion, each printing a PASS line.

The training-based criteria (3, 4, 5) and the 4-worker timing measurement
(11) are tagged ``slow``; deselect them with ``-m 'not slow'`` for quick
iteration.  Everything runs on fixed seeds.
"""

import statistics

import numpy as np
import pytest

from fabrl.cmaes import Cmaes, CmaesConfig, EsTrainConfig, run_es_training
from fabrl.dispatchers import HeuristicDispatcher, PolicyDispatcher
from fabrl.fabmodel import build_minifab
from fabrl.harness import ExperimentConfig, cmd_timing, resolve_model
from fabrl.kpi import cost_es, cost_es_industry, reward_ppo
from fabrl.policy import ArchDescriptor, PolicyParams, attention_scores, select_es, softmax
from fabrl.ppo import PpoConfig, PpoTrainConfig, run_ppo_training
from fabrl.simkernel import ReferenceSeries, run_episode

from conftest import random_model
from test_kpi import make_episode, window
from test_ppo import gradcheck_batch
from test_simkernel import results_identical

HORIZON_50D = 50 * 24.0
MINIFAB_ALL = frozenset({"litho", "implant", "diffusion"})


def _sweep(model, rules, seeds, horizon):
    out = {}
    for rule in rules:
        wafers, tards = [], []
        for seed in seeds:
            res = run_episode(model, HeuristicDispatcher(rule), seed, horizon)
            wafers.append(res.final_tp)
            tards.append(res.total_tardiness)
        out[rule] = (statistics.median(wafers), statistics.median(tards))
    return out


def test_criterion_1_minifab_heuristic_ordering():
    """SRPT wins both medians among the five plain rules (10 seeds, 50 days)."""
    model = build_minifab(0)
    rows = _sweep(model, ("fifo", "cr", "srpt", "spt", "edd"), range(10), HORIZON_50D)
    srpt_w, srpt_t = rows["srpt"]
    others = {r: v for r, v in rows.items() if r != "srpt"}
    assert srpt_t < min(t for _, t in others.values()), rows
    assert srpt_w > max(w for w, _ in others.values()), rows
    print(f"ACCEPTANCE 1: PASS — SRPT tardiness {srpt_t:.0f} (next "
          f"{min(t for _, t in others.values()):.0f}), wafers {srpt_w:.0f}")


def test_criterion_2_midifab_cr_ordering():
    """CR has the lowest median tardiness under the hierarchical composite."""
    model = resolve_model(ExperimentConfig(model="builtin:midifab"))
    rules = tuple(f"hier:{r}" for r in ("fifo", "cr", "srpt", "spt", "edd"))
    rows = _sweep(model, rules, range(10), HORIZON_50D)
    cr_w, cr_t = rows["hier:cr"]
    others = {r: v for r, v in rows.items() if r != "hier:cr"}
    assert cr_t < min(t for _, t in others.values()), rows
    fifo_w, _ = rows["hier:fifo"]
    print(f"ACCEPTANCE 2: PASS — CR tardiness {cr_t:.0f} (next "
          f"{min(t for _, t in others.values()):.0f}); FIFO wafers {fifo_w:.0f} vs CR {cr_w:.0f}")


def _eval_frozen(model, params, lot_norm, controlled, rule, seed, horizon):
    ref = ReferenceSeries.from_result(
        run_episode(model, HeuristicDispatcher(rule), seed, horizon)
    )
    disp = PolicyDispatcher(
        params=params,
        controlled=controlled,
        fallback_rule=rule,
        base_norm=lot_norm,
        mode="es",
        frozen=True,
    )
    res = run_episode(model, disp, seed, horizon, reference=ref)
    ref_td = ref.final_td_in + ref.final_td_out
    td_impr = 100.0 * (ref_td - res.total_tardiness) / ref_td
    tp_impr = 100.0 * (res.final_tp - ref.final_tp) / ref.final_tp
    return td_impr, tp_impr


@pytest.mark.slow
def test_criterion_3_es_training_gain(tmp_path):
    """CMA-ES on all Minifab tools: >=10 % tardiness gain on the training
    seed, >=5 % median on five held-out seeds, throughput within 1 %."""
    model = build_minifab(0)
    cfg = EsTrainConfig(
        controlled=MINIFAB_ALL,
        baseline_rule="srpt",
        horizon=HORIZON_50D,
        iterations=200,
        train_pairs=(("base", 0),),
        cmaes=CmaesConfig(popsize=16, n_best=8, sigma0=0.2, seed=0),
        workers=2,
        out_dir=str(tmp_path),
    )
    result = run_es_training({"base": model}, cfg)
    frozen = result.lot_norm.copy(frozen=True)

    train_td, train_tp = _eval_frozen(
        model, result.best_params, frozen, MINIFAB_ALL, "srpt", 0, HORIZON_50D
    )
    held = [
        _eval_frozen(model, result.best_params, frozen, MINIFAB_ALL, "srpt", s, HORIZON_50D)
        for s in (100, 101, 102, 103, 104)
    ]
    med_td = statistics.median(td for td, _ in held)
    med_tp = statistics.median(tp for _, tp in held)
    assert train_td >= 10.0, (train_td, train_tp)
    assert train_tp >= -1.0, (train_td, train_tp)
    assert med_td >= 5.0, held
    assert med_tp >= -1.0, held
    print(f"ACCEPTANCE 3: PASS — train {train_td:.1f} % td / {train_tp:.2f} % tp;"
          f" held-out median {med_td:.1f} % td / {med_tp:.2f} % tp")


def _final_improvement(log_rows, tail=5):
    tail_rows = log_rows[-tail:]
    return statistics.median(r["tardiness_vs_ref_pct"] for r in tail_rows)


@pytest.mark.slow
def test_criterion_4_tool_combination_monotonicity():
    """All-tools control reaches at least the litho-only improvement
    (median over 3 repeats, 40 iterations each)."""
    model = build_minifab(0)
    finals = {"litho": [], "all": []}
    for name, controlled in (("litho", frozenset({"litho"})), ("all", MINIFAB_ALL)):
        for repeat in range(3):
            cfg = EsTrainConfig(
                controlled=controlled,
                baseline_rule="srpt",
                horizon=HORIZON_50D,
                iterations=40,
                train_pairs=(("base", 0),),
                cmaes=CmaesConfig(popsize=16, n_best=8, sigma0=0.2, seed=repeat),
                workers=2,
            )
            result = run_es_training({"base": model}, cfg)
            finals[name].append(_final_improvement(result.log_rows))
    med_all = statistics.median(finals["all"])
    med_litho = statistics.median(finals["litho"])
    assert med_all >= med_litho, finals
    print(f"ACCEPTANCE 4: PASS — all-tools median {med_all:.1f} % >= litho-only {med_litho:.1f} %")


@pytest.mark.slow
def test_criterion_5_ppo_minifab_litho():
    """PPO on the litho group, complete episodes, reward D: positive median
    tardiness improvement over the final 10 % of training episodes across
    3 repeats.  (Larger models are not required to improve.)"""
    model = build_minifab(0)
    episodes = 40
    finals = []
    for repeat in range(3):
        cfg = PpoTrainConfig(
            controlled=frozenset({"litho"}),
            baseline_rule="srpt",
            horizon=HORIZON_50D,
            episodes=episodes,
            ppo=PpoConfig(workers=2, complete_episodes=True),
            reward_variant="D",
            seed=repeat,
        )
        result = run_ppo_training({"base": model}, cfg)
        tail = result.log_rows[-max(1, episodes // 10):]
        finals.extend(r["tardiness_vs_ref_pct"] for r in tail)
    med = statistics.median(finals)
    assert med > 0.0, finals
    print(f"ACCEPTANCE 5: PASS — PPO final-10 % median tardiness improvement {med:.1f} %")


def test_criterion_6_cmaes_sphere_oracle():
    """Best-so-far < 1e-3 on the 10-D sphere within 200 iterations."""
    es = Cmaes(np.full(10, 1.0), CmaesConfig(popsize=16, n_best=8, sigma0=0.5, seed=0))
    iters = 0
    for _ in range(200):
        pop = es.ask()
        es.tell([float(w @ w) for w in pop])
        iters += 1
        if es.best_cost < 1e-3:
            break
    assert es.best_cost < 1e-3
    print(f"ACCEPTANCE 6: PASS — sphere best {es.best_cost:.2e} after {iters} iterations")


def test_criterion_7_gradient_check():
    """Analytic PPO gradients match central differences (1e-4 relative) on
    100 random small batches; every coordinate is covered."""
    n = ArchDescriptor(critic=True).param_count
    worst = 0.0
    for batch_idx in range(100):
        offset = batch_idx * 60
        worst = max(worst, gradcheck_batch(batch_idx, n_coords=60, offset=offset))
    assert worst < 1e-4
    assert 100 * 60 > 2 * n  # systematic slices cover all 2418 coordinates
    print(f"ACCEPTANCE 7: PASS — worst relative gradient error {worst:.2e}")


def test_criterion_8_policy_invariants():
    """1000 random cases each: exact attention permutation equivariance,
    softmax normalization within 1e-9, argmax lot-id invariance."""
    rng = np.random.default_rng(0)
    desc = ArchDescriptor()
    for _ in range(1000):
        params = PolicyParams.random(desc, rng, scale=0.5)
        n = int(rng.integers(1, 10))
        feats = rng.normal(size=(n, 11))
        perm = rng.permutation(n)
        base = attention_scores(feats, params)
        assert np.array_equal(base[perm], attention_scores(feats[perm], params))

    for _ in range(1000):
        probs = softmax(rng.normal(size=int(rng.integers(1, 30))) * 5)
        assert abs(probs.sum() - 1.0) <= 1e-9
        assert (probs >= 0).all()

    for _ in range(1000):
        params = PolicyParams.random(desc, rng, scale=0.5)
        n = int(rng.integers(2, 8))
        lot_ids = rng.choice(1000, size=n, replace=False)
        feats = rng.normal(size=(n, 11))
        order = np.argsort(lot_ids)
        winner = lot_ids[order][select_es(attention_scores(feats[order], params))]
        perm = rng.permutation(n)
        ids_p, feats_p = lot_ids[perm], feats[perm]
        order_p = np.argsort(ids_p)
        assert ids_p[order_p][select_es(attention_scores(feats_p[order_p], params))] == winner
    print("ACCEPTANCE 8: PASS — 3 x 1000 policy invariance cases")


def test_criterion_9_cost_and_reward_formulas():
    """The documented numeric examples hold exactly."""
    assert cost_es(make_episode()) == 1.0
    assert cost_es(make_episode(td_out=0.8, td_in=0.5)) == pytest.approx(0.8, rel=1e-12)
    ep = make_episode(td_out=0.8, td_in=1.1)
    assert cost_es(ep) == pytest.approx(8.8, rel=1e-12)
    assert cost_es_industry(make_episode()) == 1.0
    assert cost_es_industry(make_episode(tp=90, ref_tp=100)) == pytest.approx(
        (1 / 0.9) ** 2, rel=1e-12
    )
    assert cost_es_industry(
        make_episode(td_in=0.25, td_out=0.25, ref_td_in=0.5, ref_td_out=0.5)
    ) == pytest.approx(0.5, rel=1e-12)
    r = reward_ppo(window(tp=100, td_out=2.0, wip=400, td_in=10.0), "D")
    assert r == pytest.approx(100 / 2_100_000, rel=1e-12)
    w = window(tp=37, td_out=3.0, wip=210, td_in=8.0)
    assert reward_ppo(w, "C") == pytest.approx(
        reward_ppo(w, "D") * (210 + 37) ** 2, rel=1e-12
    )
    print("ACCEPTANCE 9: PASS — cost/reward worked examples exact")


def test_criterion_10_determinism_and_conservation():
    """Identical seeds give bit-identical results; lot conservation holds at
    every event on 500 fuzzed small models."""
    model = build_minifab(0)
    a = run_episode(model, HeuristicDispatcher("srpt"), 11, 600.0)
    b = run_episode(model, HeuristicDispatcher("srpt"), 11, 600.0)
    assert results_identical(a, b)

    for seed in range(500):
        m = random_model(np.random.default_rng(seed))
        run_episode(m, HeuristicDispatcher("fifo"), seed, m.horizon_hours, check_invariants=True)
    print("ACCEPTANCE 10: PASS — bit-identical rerun; 500 fuzzed models conserve lots")


@pytest.mark.slow
def test_criterion_11_timing_scaling():
    """ES wall-clock per iteration with 4 workers <= 0.35x the 1-worker
    time (population 16, all Minifab tools controlled).

    Note: requires at least 4 physical cores to be attainable; on a 2-core
    host the ratio is physically bounded near 0.5 and this test fails.
    """
    import os

    cfg = ExperimentConfig(
        model="builtin:minifab",
        controlled=("all",),
        horizon_hours=HORIZON_50D,
        train_seeds=(0,),
        popsize=16,
        n_best=8,
    )
    rows = cmd_timing(cfg, worker_counts=(1, 4), iterations=3)
    t1 = rows[0]["seconds_per_iteration"]
    t4 = rows[1]["seconds_per_iteration"]
    ratio = t4 / t1
    cores = os.cpu_count()
    print(
        f"ACCEPTANCE 11: measured {t1:.2f} s/iter (1 worker) vs {t4:.2f} s/iter"
        f" (4 workers), ratio {ratio:.3f} on {cores} cores"
    )
    assert ratio <= 0.35, (
        f"ratio {ratio:.3f} > 0.35 (host has {cores} cores; the criterion "
        "needs >= 4 physical cores to be attainable)"
    )
    print("ACCEPTANCE 11: PASS")
