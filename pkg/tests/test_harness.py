import csv
import json

import pytest

from fabrl.cli import main as cli_main
from fabrl.dispatchers import HeuristicDispatcher
from fabrl.fabmodel import build_minifab, load_model
from fabrl.harness import (
    ExperimentConfig,
    ReferenceCache,
    cmd_baseline,
    cmd_eval,
    cmd_timing,
    cmd_train,
    controlled_groups,
    model_is_hierarchical,
    resolve_model,
    resume_es_training,
)
from fabrl.simkernel import run_episode


def small_cfg(**kw):
    defaults = dict(
        model="builtin:minifab",
        horizon_hours=96.0,
        train_seeds=(0,),
        test_seeds=(50, 51),
        workers=1,
        iterations=2,
        popsize=4,
        n_best=2,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestConfig:
    def test_seed_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            ExperimentConfig(train_seeds=(0, 1), test_seeds=(1, 2))

    def test_worker_count_validated(self):
        with pytest.raises(ValueError, match="worker"):
            ExperimentConfig(workers=0)

    def test_controlled_all_expands(self):
        m = build_minifab(0)
        cfg = small_cfg(controlled=("all",))
        assert controlled_groups(cfg, m) == {"implant", "litho", "diffusion"}

    def test_unknown_group_rejected(self):
        m = build_minifab(0)
        with pytest.raises(ValueError, match="unknown"):
            controlled_groups(small_cfg(controlled=("nope",)), m)

    def test_hierarchical_detection(self):
        assert not model_is_hierarchical(build_minifab(0))
        midifab = resolve_model(ExperimentConfig(model="builtin:midifab"))
        assert model_is_hierarchical(midifab)


class TestBaseline:
    def test_five_rules_and_normalization(self, tmp_path):
        cfg = small_cfg(test_seeds=(50, 51, 52), out_dir=str(tmp_path))
        rows = cmd_baseline(cfg)
        assert [r["rule"] for r in rows] == ["fifo", "cr", "srpt", "spt", "edd"]
        # best entry of each metric is 100 by construction
        assert max(r["completed_wafers_norm"] for r in rows) == pytest.approx(100.0)
        assert max(r["tardiness_norm"] for r in rows) == pytest.approx(100.0)
        assert (tmp_path / "baseline.csv").exists()
        assert (tmp_path / "config.json").exists()

    def test_single_rule_one_row(self):
        rows = cmd_baseline(small_cfg(test_seeds=(50,)), rules=("srpt",))
        assert len(rows) == 1 and rows[0]["rule"] == "srpt"

    def test_hier_rules_on_midifab(self):
        cfg = small_cfg(model="builtin:midifab", horizon_hours=48.0, test_seeds=(50,))
        rows = cmd_baseline(cfg)
        assert all(r["rule"].startswith("hier:") for r in rows)


class TestReferenceCache:
    def test_cached_equals_fresh_bit_exact(self):
        m = build_minifab(0)
        cache = ReferenceCache()
        ref = cache.get(m, "base", 3, "srpt", 200.0)
        again = cache.get(m, "base", 3, "srpt", 200.0)
        assert again is ref  # memoized
        fresh = run_episode(m, HeuristicDispatcher("srpt"), 3, 200.0)
        assert ref.final_td_in == fresh.final_td_in
        assert ref.final_td_out == fresh.final_td_out
        assert ref.final_tp == fresh.final_tp
        assert all(
            a.completed_wafers_cum == b.completed_wafers_cum
            and a.td_in_t == b.td_in_t
            for a, b in zip(ref.snapshots, fresh.snapshots)
        )


class TestTrainEvalRoundTrip:
    def test_es_train_then_eval(self, tmp_path):
        cfg = small_cfg(
            controlled=("litho",),
            out_dir=str(tmp_path / "train"),
            iterations=2,
            popsize=4,
            test_seeds=(50,),
        )
        result = cmd_train(cfg)
        assert len(result.log_rows) == 2
        log_path = tmp_path / "train" / "training_log.csv"
        assert log_path.exists()
        with open(log_path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert rows[0].keys() == {
            "iteration",
            "best_cost",
            "mean_cost",
            "tardiness_vs_ref_pct",
            "throughput_vs_ref_pct",
        }

        ckpt = tmp_path / "train" / "best_params.npz"
        assert ckpt.exists()
        eval_cfg = small_cfg(
            controlled=("litho",), test_seeds=(50,), out_dir=str(tmp_path / "eval")
        )
        report = cmd_eval(ckpt, eval_cfg)
        flags = {(r["seed"], r["in_training"]) for r in report}
        assert (50, False) in flags and (0, True) in flags
        assert (tmp_path / "eval" / "eval.csv").exists()

    def test_es_resume_continues_iterations(self, tmp_path):
        cfg = small_cfg(controlled=("litho",), out_dir=str(tmp_path), iterations=2)
        cmd_train(cfg)
        result = resume_es_training(cfg, tmp_path / "cmaes_state.npz")
        assert [row["iteration"] for row in result.log_rows] == [2, 3]

    def test_eval_empty_test_set_rejected(self, tmp_path):
        cfg = small_cfg(controlled=("litho",), out_dir=str(tmp_path), iterations=1)
        cmd_train(cfg)
        bad = small_cfg(controlled=("litho",), test_seeds=())
        with pytest.raises(ValueError, match="held-out"):
            cmd_eval(tmp_path / "best_params.npz", bad)

    def test_ppo_batch_control_rejected(self):
        cfg = small_cfg(optimizer="ppo", controlled=("diffusion",))
        with pytest.raises(ValueError, match="batch"):
            cmd_train(cfg)

    def test_ppo_train_smoke(self, tmp_path):
        cfg = small_cfg(
            optimizer="ppo",
            controlled=("litho",),
            out_dir=str(tmp_path),
            iterations=2,
            horizon_hours=72.0,
        )
        result = cmd_train(cfg)
        assert len(result.log_rows) == 2
        assert (tmp_path / "training_log.csv").exists()
        assert (tmp_path / "ppo_params.npz").exists()

    def test_no_control_rejected(self):
        with pytest.raises(ValueError, match="controlled"):
            cmd_train(small_cfg(controlled=()))


class TestTiming:
    def test_zero_iterations_empty(self):
        assert cmd_timing(small_cfg(controlled=("litho",)), iterations=0) == []

    def test_single_worker_row(self, tmp_path):
        cfg = small_cfg(controlled=("litho",), out_dir=str(tmp_path), horizon_hours=48.0)
        rows = cmd_timing(cfg, worker_counts=(1,), iterations=1)
        assert len(rows) == 1
        assert rows[0]["workers"] == 1
        assert rows[0]["seconds_per_iteration"] > 0
        assert (tmp_path / "timing.csv").exists()


class TestCli:
    def test_emit_model_cli(self, tmp_path):
        out = tmp_path / "mini.yaml"
        assert cli_main(["emit-model", "--model-seed", "0", str(out)]) == 0
        assert load_model(out) == build_minifab(0)

    def test_baseline_cli(self, tmp_path, capsys):
        rc = cli_main(
            [
                "baseline",
                "--horizon-hours",
                "48",
                "--seeds",
                "0",
                "--test-seeds",
                "50",
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "srpt" in out and "rule" in out

    def test_train_cli_smoke(self, tmp_path):
        rc = cli_main(
            [
                "train",
                "--horizon-hours",
                "48",
                "--control",
                "litho",
                "--iterations",
                "1",
                "--popsize",
                "4",
                "--n-best",
                "2",
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert cfg["controlled"] == ["litho"]
