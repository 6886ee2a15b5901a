import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabrl.dispatchers import HeuristicDispatcher, PolicyDispatcher
from fabrl.fabmodel import BatchRule, build_minifab
from fabrl.policy import (
    ArchDescriptor,
    MissingCriticError,
    NormalizerError,
    PolicyParams,
    RunningStats,
    attention_scores,
    featurize_lot,
    flatten_params,
    load_checkpoint,
    log_softmax,
    merged,
    save_checkpoint,
    select_es,
    select_ppo,
    softmax,
    unflatten_params,
    value_estimate,
)
from fabrl.simkernel import Simulation

from conftest import tiny_model

ES_DESC = ArchDescriptor()
PPO_DESC = ArchDescriptor(critic=True)


def random_params(rng, desc=ES_DESC, scale=0.5):
    return PolicyParams.random(desc, rng, scale=scale)


class TestFeaturize:
    def _sim(self, model, dispatcher=None):
        return Simulation(model, dispatcher or HeuristicDispatcher("fifo"), 0, model.horizon_hours)

    def test_dedicated_step_has_no_alternatives(self):
        m = tiny_model(n_tools=1, releases=((0.0, "regular"),))
        sim = self._sim(m)
        sim.run()
        lot = sim.lots[0]
        lot.current_step = 0
        lot.completion_time = None
        f = featurize_lot(lot, m.tool_groups[0].tools[0], sim)
        assert f[3] == 0.0  # alternatives
        assert f[4] == 0.0  # no faster tool

    def test_non_batch_tool_zeroes_batch_fields(self):
        m = build_minifab(0)
        feats = {}

        class Spy(HeuristicDispatcher):
            def decide(self, ctx):
                for lid in ctx.eligible:
                    feats.setdefault(ctx.group_id, featurize_lot(ctx.lots[lid], ctx.tool, ctx.sim))
                return super().decide(ctx)

        Simulation(m, Spy("fifo"), 0, 48.0).run()
        litho = feats["litho"]
        assert litho[9] == 0.0 and litho[10] == 0.0
        diff = feats["diffusion"]
        assert diff[9] == 1.0 and diff[10] > 0.0

    def test_pct_available_for_full_batch(self):
        rule = BatchRule(max_size=3, min_size=1, families={"f": (("P", 0),)})
        m = tiny_model(
            proc_hours=5.0,
            n_steps=1,
            batch=rule,
            releases=((0.0, "regular"), (0.0, "regular")),
            horizon=20.0,
        )
        seen = []

        class Spy:
            def decide(self, ctx):
                if len(ctx.eligible) == 2:
                    seen.append(featurize_lot(ctx.lots[ctx.eligible[0]], ctx.tool, ctx.sim))
                return None

        Simulation(m, Spy(), 0, 20.0).run()
        assert seen and seen[0][10] == pytest.approx(2 / 3)

    def test_faster_tool_flag(self):
        m = tiny_model(n_tools=2, releases=((0.0, "regular"),))
        steps = m.routes["P"].steps
        object.__setattr__(steps[0], "processing_time_hours", {"T0": 2.0, "T1": 1.5})
        sim = self._sim(m)
        lot_probe = {}

        class Spy:
            def decide(self, ctx):
                lot_probe[ctx.tool.id] = featurize_lot(ctx.lots[ctx.eligible[0]], ctx.tool, ctx.sim)
                return None

        Simulation(m, Spy(), 0, 5.0).run()
        assert lot_probe["T0"][4] == 1.0  # T1 is faster
        assert lot_probe["T0"][3] == 1.0  # one alternative
        assert lot_probe["T1"][4] == 0.0


class TestAttention:
    def test_single_lot_finite_deterministic(self, rng):
        params = random_params(rng)
        feats = rng.normal(size=(1, 11))
        s1 = attention_scores(feats, params)
        s2 = attention_scores(feats, params)
        assert s1.shape == (1,)
        assert np.isfinite(s1).all()
        assert s1[0] == s2[0]

    def test_identical_lots_identical_scores(self, rng):
        params = random_params(rng)
        row = rng.normal(size=11)
        feats = np.stack([row, row, row])
        scores = attention_scores(feats, params)
        assert scores[0] == scores[1] == scores[2]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 12))
    def test_permutation_equivariance_exact(self, seed, n):
        r = np.random.default_rng(seed)
        params = random_params(r)
        feats = r.normal(size=(n, 11))
        perm = r.permutation(n)
        base = attention_scores(feats, params)
        permuted = attention_scores(feats[perm], params)
        assert np.array_equal(base[perm], permuted)  # exact, bit for bit

    def test_zero_params_zero_scores(self):
        params = PolicyParams.zeros(ES_DESC)
        scores = attention_scores(np.ones((4, 11)), params)
        assert np.array_equal(scores, np.zeros(4))


class TestSelection:
    def test_select_es_argmax(self):
        assert select_es(np.array([0.1, 0.9, 0.3])) == 1

    def test_select_es_tie_lowest_index(self):
        assert select_es(np.array([0.5, 0.5])) == 0

    def test_select_es_single(self):
        assert select_es(np.array([1.23])) == 0

    def test_select_es_empty(self):
        with pytest.raises(ValueError):
            select_es(np.array([]))

    def test_argmax_lot_id_invariant_under_permutation(self, rng):
        params = random_params(rng)
        lot_ids = np.array([17, 3, 42, 8, 25])
        feats = rng.normal(size=(5, 11))
        order = np.argsort(lot_ids)
        canonical_scores = attention_scores(feats[order], params)
        winner = lot_ids[order][select_es(canonical_scores)]
        for _ in range(10):
            perm = rng.permutation(5)
            ids_p, feats_p = lot_ids[perm], feats[perm]
            order_p = np.argsort(ids_p)
            scores_p = attention_scores(feats_p[order_p], params)
            assert ids_p[order_p][select_es(scores_p)] == winner

    def test_softmax_normalization(self, rng):
        for _ in range(100):
            s = softmax(rng.normal(size=rng.integers(1, 20)) * 10)
            assert abs(s.sum() - 1.0) < 1e-9
            assert (s >= 0).all()

    def test_select_ppo_uniform_when_equal(self):
        probs = softmax(np.zeros(4))
        assert np.allclose(probs, 0.25)

    def test_select_ppo_extreme_scores(self, rng):
        idx, logp = select_ppo(np.array([100.0, -100.0]), rng)
        assert idx == 0
        assert logp == pytest.approx(0.0, abs=1e-12)

    def test_select_ppo_empirical_frequencies(self):
        # softmax([0, 0, ln 2]) = [0.25, 0.25, 0.5]
        rng = np.random.default_rng(123)
        scores = np.array([0.0, 0.0, np.log(2.0)])
        counts = np.zeros(3)
        for _ in range(10_000):
            idx, logp = select_ppo(scores, rng)
            counts[idx] += 1
            assert logp == pytest.approx(log_softmax(scores)[idx])
        freq = counts / 10_000
        assert np.allclose(freq, [0.25, 0.25, 0.5], atol=0.02)


class TestValueEstimate:
    def test_zero_params_zero_value(self):
        params = PolicyParams.zeros(PPO_DESC)
        v = value_estimate(np.ones((3, 11)), np.ones(8), params)
        assert v == 0.0

    def test_missing_critic_head(self, rng):
        params = random_params(rng, ES_DESC)
        with pytest.raises(MissingCriticError):
            value_estimate(np.ones((3, 11)), np.ones(8), params)

    def test_permutation_invariant(self, rng):
        params = random_params(rng, PPO_DESC)
        feats = rng.normal(size=(6, 11))
        fab = rng.normal(size=8)
        base = value_estimate(feats, fab, params)
        for _ in range(5):
            perm = rng.permutation(6)
            assert value_estimate(feats[perm], fab, params) == base

    def test_fuzz_finite(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            params = random_params(rng, PPO_DESC, scale=1.0)
            n = int(rng.integers(1, 8))
            v = value_estimate(rng.normal(size=(n, 11)) * 5, rng.normal(size=8) * 5, params)
            assert np.isfinite(v)


class TestNormalizer:
    def test_constant_stream_normalizes_to_zero(self):
        stats = RunningStats(dim=2)
        stats.update(np.full((50, 2), 3.5))  # dyadic: arithmetic stays exact
        out = stats.apply(np.array([3.5, 3.5]))
        assert np.array_equal(out, np.zeros(2))
        stats = RunningStats(dim=1)
        stats.update(np.full((50, 1), 3.7))  # non-dyadic leaves float dust
        out = stats.apply(np.array([3.7]))
        assert abs(out[0]) < 1e-8

    def test_two_point_stream(self):
        stats = RunningStats(dim=1)
        stats.update(np.array([[0.0], [2.0]]))
        assert stats.mean[0] == 1.0
        assert stats.std()[0] == pytest.approx(np.sqrt(2.0))
        assert stats.apply(np.array([2.0]))[0] == pytest.approx(1.0 / np.sqrt(2.0))

    def test_apply_requires_two_observations(self):
        stats = RunningStats(dim=1)
        stats.update(np.array([[1.0]]))
        with pytest.raises(NormalizerError):
            stats.apply(np.array([1.0]))
        frozen = stats.copy(frozen=True)
        frozen.apply(np.array([1.0]))  # frozen statistics are always usable

    def test_merge_equals_concatenated_exact(self):
        # dyadic values keep all arithmetic exact
        a_rows = np.array([[0.0], [2.0]])
        b_rows = np.array([[4.0], [6.0]])
        a = RunningStats(dim=1)
        a.update(a_rows)
        b = RunningStats(dim=1)
        b.update(b_rows)
        both = RunningStats(dim=1)
        both.update(np.vstack([a_rows, b_rows]))
        m = merged(a, b)
        assert m.count == both.count
        assert np.array_equal(m.mean, both.mean)
        assert np.array_equal(m.m2, both.m2)

    def test_frozen_ignores_updates(self):
        stats = RunningStats(dim=1)
        stats.update(np.array([[0.0], [2.0]]))
        frozen = stats.copy(frozen=True)
        frozen.update(np.array([[100.0]]))
        frozen.merge(stats)
        assert frozen.count == 2.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40), st.integers(1, 40))
    def test_merge_associative_commutative(self, seed, na, nb, nc):
        r = np.random.default_rng(seed)
        chunks = [r.normal(size=(n, 3)) * r.uniform(0.1, 10) for n in (na, nb, nc)]
        stats = [RunningStats(dim=3) for _ in chunks]
        for s, c in zip(stats, chunks):
            s.update(c)
        a, b, c = stats
        ab_c = merged(merged(a, b), c)
        a_bc = merged(a, merged(b, c))
        ba_c = merged(merged(b, a), c)
        for x in (a_bc, ba_c):
            assert np.allclose(ab_c.mean, x.mean, rtol=1e-9, atol=1e-12)
            assert np.allclose(ab_c.m2, x.m2, rtol=1e-9, atol=1e-9)
            assert ab_c.count == x.count


class TestFlatParams:
    def test_round_trip(self, rng):
        theta = rng.normal(size=ES_DESC.param_count)
        arrays = unflatten_params(theta, ES_DESC)
        assert np.array_equal(flatten_params(arrays, ES_DESC), theta)

    def test_wrong_length(self):
        with pytest.raises(ValueError, match="length"):
            unflatten_params(np.zeros(10), ES_DESC)

    def test_param_counts(self):
        # 11->16 embed, three 16x16 projections, 16->32->1 head
        expected = (11 * 16 + 16) + 3 * (16 * 16 + 16) + (16 * 32 + 32) + (32 + 1)
        assert ES_DESC.param_count == expected == 1585
        critic = (24 * 32 + 32) + (32 + 1)
        assert PPO_DESC.param_count == expected + critic == 2418

    def test_views_alias_theta(self, rng):
        params = random_params(rng)
        params["W_embed"][0, 0] = 123.0
        assert params.theta[0] == 123.0


class TestCheckpoints:
    def test_round_trip(self, tmp_path, rng):
        params = random_params(rng, PPO_DESC)
        lot_norm = RunningStats(dim=11)
        lot_norm.update(rng.normal(size=(20, 11)))
        fab_norm = RunningStats(dim=8)
        fab_norm.update(rng.normal(size=(5, 8)))
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params, lot_norm, fab_norm, extra={"iteration": 7})
        loaded, lot2, fab2, extra = load_checkpoint(path)
        assert np.array_equal(loaded.theta, params.theta)
        assert loaded.desc == PPO_DESC
        assert np.array_equal(lot2.mean, lot_norm.mean) and lot2.frozen
        assert np.array_equal(fab2.m2, fab_norm.m2)
        assert extra == {"iteration": 7}

    def test_descriptor_mismatch_rejected(self, tmp_path, rng):
        from fabrl.policy import DescriptorMismatch

        params = random_params(rng, ES_DESC)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params, RunningStats(dim=11))
        with pytest.raises(DescriptorMismatch):
            load_checkpoint(path, expected_desc=PPO_DESC)


class TestPolicyDispatcherEpisode:
    def test_es_policy_runs_episode(self, rng):
        m = build_minifab(0)
        base = RunningStats(dim=11)
        base.update(rng.normal(loc=5.0, scale=10.0, size=(50, 11)))
        disp = PolicyDispatcher(
            params=random_params(rng),
            controlled=frozenset({"litho", "implant", "diffusion"}),
            fallback_rule="srpt",
            base_norm=base,
            mode="es",
        )
        from fabrl.simkernel import run_episode

        res = run_episode(m, disp, 0, 120.0, check_invariants=True)
        assert res.final_tp > 0
        assert disp.local_norm.count > 0

    def test_ppo_mode_requires_critic(self, rng):
        with pytest.raises(MissingCriticError):
            PolicyDispatcher(
                params=random_params(rng, ES_DESC),
                controlled=frozenset({"litho"}),
                fallback_rule="srpt",
                base_norm=RunningStats(dim=11),
                mode="ppo",
            )

    def test_srpt_like_params_reproduce_srpt_exactly(self):
        # the baseline-equivalent initialization makes the scored policy's
        # episode bit-identical to the shortest-remaining heuristic's
        from fabrl.cmaes import EsTrainConfig, _featurize_reference
        from fabrl.policy import srpt_like_params
        from fabrl.simkernel import run_episode
        from test_simkernel import results_identical

        m = build_minifab(0)
        controlled = frozenset({"litho", "implant", "diffusion"})
        es_cfg = EsTrainConfig(
            controlled=controlled, baseline_rule="srpt", horizon=300.0,
            train_pairs=(("base", 0),),
        )
        stats = _featurize_reference({"base": m}, es_cfg, {})
        disp = PolicyDispatcher(
            params=srpt_like_params(ES_DESC),
            controlled=controlled,
            fallback_rule="srpt",
            base_norm=stats.copy(frozen=True),
            mode="es",
        )
        policy_res = run_episode(m, disp, 0, 300.0)
        heur_res = run_episode(m, HeuristicDispatcher("srpt"), 0, 300.0)
        assert results_identical(policy_res, heur_res)
