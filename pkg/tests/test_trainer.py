import math

import numpy as np
import pytest

from rankloss import losses, trainer
from rankloss.dataset import generate_markov_dataset
from rankloss.losses import LossSpec
from rankloss.trainer import (RunRecord, TrainConfig, TrainingDiverged, build_examples,
                              convergence_epoch, converged, train)


@pytest.fixture(scope="module")
def small():
    return generate_markov_dataset(120, 40, seq_len_range=(5, 12), self_consistency=0.8, seed=1)


class TestConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_history_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(max_history=0)

    def test_default_epochs(self):
        assert TrainConfig(loss=LossSpec("CE")).epochs == 200
        assert TrainConfig(loss=LossSpec("SCE", K=5, alpha=100.0)).epochs == 300
        assert TrainConfig(loss=LossSpec("NCE", K=5, c=10.0)).epochs == 300

    def test_dict_round_trip(self):
        cfg = TrainConfig(loss=LossSpec("NCE", K=7, c=10.0), epochs=3, lr=0.01, tied=True)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})


class TestExamples:
    def test_every_prefix_position(self, small):
        ex = build_examples(small, max_history=50, decay=0.8, sliding_window=True)
        expected = sum(len(small.splits[u][0]) - 1 for u in small.users)
        assert len(ex) == expected

    def test_window_limits_positions(self):
        ds = generate_markov_dataset(3, 20, seq_len_range=(12, 12), seed=0)
        ex = build_examples(ds, max_history=3, decay=0.8, sliding_window=False)
        # 10-item prefixes: only the last 3 positions feed a full-length history
        assert len(ex) == 3 * 3
        ex_all = build_examples(ds, max_history=3, decay=0.8, sliding_window=True)
        assert len(ex_all) == 3 * 9
        assert ex_all.items.shape[1] == 3

    def test_right_aligned_weights(self, small):
        ex = build_examples(small, max_history=50, decay=0.8, sliding_window=True)
        np.testing.assert_allclose(ex.weights.sum(axis=1), 1.0, rtol=1e-12)
        assert np.all(ex.weights[:, -1] > 0)


class TestTrain:
    def test_one_epoch_one_entry(self, small):
        rec = train(TrainConfig(loss=LossSpec("CE"), epochs=1, dim=8), small)
        assert [e.epoch for e in rec.epochs] == [1]
        assert rec.epochs[0].validation is not None and rec.test is not None

    def test_epochs_contiguous_and_eval_every(self, small):
        rec = train(TrainConfig(loss=LossSpec("NEG", K=4), epochs=5, eval_every=2, dim=8), small)
        assert [e.epoch for e in rec.epochs] == [1, 2, 3, 4, 5]
        assert [e.epoch for e in rec.epochs if e.validation is not None] == [2, 4, 5]

    @pytest.mark.parametrize("spec", [LossSpec("CE"), LossSpec("SCE", K=5, alpha=10.0),
                                      LossSpec("NCE", K=5, c=10.0), LossSpec("BPR"),
                                      LossSpec("IS", K=5), LossSpec("CE_Eta", eta=0.7)],
                             ids=lambda s: s.kind)
    def test_deterministic(self, small, spec):
        cfg = TrainConfig(loss=spec, epochs=3, dim=8, seed=4)
        a, b = train(cfg, small), train(cfg, small)
        assert a.to_json() == b.to_json()
        assert a.to_csv() == b.to_csv()
        np.testing.assert_array_equal(a.params.embeddings, b.params.embeddings)

    def test_threads_do_not_change_record(self, small):
        cfg = TrainConfig(loss=LossSpec("SCE", K=4, alpha=5.0), epochs=2, dim=8)
        a = train(cfg, small).to_dict()
        b = train(TrainConfig(**{**cfg.__dict__, "threads": 3}), small).to_dict()
        assert b.pop("config")["threads"] == 3
        a.pop("config")
        assert a == b

    def test_sce_full_catalog_steps_equal_ce(self, small):
        N = small.item_count
        steps = {}
        for name, spec, extra in (("ce", LossSpec("CE"), {}),
                                  ("sce", LossSpec("SCE", K=N - 1, alpha=1.0), {"replacement": False})):
            trace = []
            train(TrainConfig(loss=spec, epochs=3, dim=8, seed=2, **extra), small,
                  on_step=lambda e, s, v: trace.append(v))
            steps[name] = np.array(trace)
        assert steps["ce"].size == steps["sce"].size
        np.testing.assert_allclose(steps["sce"], steps["ce"], rtol=0, atol=1e-9)

    def test_loss_decreases(self, small):
        rec = train(TrainConfig(loss=LossSpec("CE"), epochs=8, dim=16, lr=0.01), small)
        assert rec.epochs[-1].train_loss < rec.epochs[0].train_loss

    def test_test_metrics_from_best_epoch(self, small):
        rec = train(TrainConfig(loss=LossSpec("CE"), epochs=4, dim=8, lr=0.05), small)
        series = dict(rec.validation_series())
        assert series[rec.best_epoch] == max(series.values())

    def test_divergence_aborts(self, small, monkeypatch):
        monkeypatch.setattr(losses, "sce_loss", lambda *a, **k: np.full(np.shape(a[0]), np.nan))
        with pytest.raises(TrainingDiverged, match="epoch 1"):
            train(TrainConfig(loss=LossSpec("SCE", K=3, alpha=2.0), epochs=2, dim=4), small)

    def test_too_many_distinct_negatives(self, small):
        with pytest.raises(ValueError):
            train(TrainConfig(loss=LossSpec("NEG", K=small.item_count), epochs=1, replacement=False), small)

    def test_deterministic_chain_is_learned(self):
        ds = generate_markov_dataset(500, 100, self_consistency=1.0, seed=0)
        rec = train(TrainConfig(loss=LossSpec("CE"), epochs=50, eval_every=5), ds)
        assert rec.test.at(1, "hr") >= 0.9

    def test_tied_tables_cannot_learn_successor(self):
        # with shared tables the last history item always outscores its successor
        ds = generate_markov_dataset(300, 60, self_consistency=1.0, seed=0)
        rec = train(TrainConfig(loss=LossSpec("CE"), epochs=15, eval_every=5, tied=True, lr=0.01), ds)
        assert rec.test.at(1, "hr") == 0.0


class TestConvergence:
    def test_hand_series(self):
        assert convergence_epoch([(1, 0.10), (2, 0.20), (3, 0.30), (4, 0.31)]) == 4

    def test_constant(self):
        assert convergence_epoch([(e, 0.4) for e in range(1, 6)]) == 1

    def test_early_crossing(self):
        series = [(1, 0.5), (2, 0.9), (3, 0.995), (4, 0.998), (5, 1.0)]
        assert convergence_epoch(series) == 3

    def test_fraction(self):
        series = [(1, 0.5), (2, 0.8), (3, 1.0)]
        assert convergence_epoch(series, fraction=0.5) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            convergence_epoch(RunRecord())

    def test_flag(self, small):
        rec = RunRecord(epochs=[trainer.EpochRecord(e, 1.0, 0.0, _report(v)) for e, v in
                                enumerate([0.1, 0.2, 0.3], start=1)])
        assert convergence_epoch(rec) == 3 and not converged(rec)
        rec.epochs.append(trainer.EpochRecord(4, 1.0, 0.0, _report(0.3)))
        assert converged(rec)


def _report(ndcg):
    from rankloss.metrics import MetricReport
    return MetricReport(cutoffs={10: {"ndcg": ndcg, "hr": ndcg, "mrr": ndcg}}, user_count=1)


class TestOutputs:
    def test_csv_header_and_rows(self, small):
        rec = train(TrainConfig(loss=LossSpec("BCE"), epochs=3, eval_every=2, dim=4), small)
        lines = rec.to_csv().splitlines()
        assert lines[0] == "epoch,train_loss,ndcg@10,hr@10,mrr@10"
        assert len(lines) == 4
        assert lines[1].endswith(",,,")
        assert float(lines[2].split(",")[2]) == rec.epochs[1].validation.at(10, "ndcg")

    def test_rows_to_csv_union_of_keys(self):
        text = trainer.rows_to_csv([{"a": 1}, {"a": 2, "b": None}])
        assert text.splitlines() == ["a,b", "1,", "2,"]


class TestSweeps:
    def test_eta_sweep_rows(self, small):
        base = TrainConfig(epochs=2, dim=4)
        rows = trainer.run_eta_sweep(base, [0.1, 0.7, 5.0], small)
        assert [r["eta"] for r in rows] == [0.1, 0.7, 5.0, math.inf]
        assert rows[-1]["loss"] == "CE"

    def test_huge_eta_matches_ce(self, small):
        base = TrainConfig(epochs=2, dim=4)
        rows = trainer.run_eta_sweep(base, [1e9], small)
        assert rows[0]["test_ndcg@10"] == pytest.approx(rows[1]["test_ndcg@10"], abs=1e-12)

    def test_c_sweep_rows(self, small):
        rows = trainer.run_c_sweep(TrainConfig(loss=LossSpec("NCE", K=4, c=1.0), epochs=2, dim=4),
                                   [1, 5, 10, 50, 100], small)
        assert [r["c"] for r in rows] == [1, 5, 10, 50, 100]
        assert all(isinstance(r["converged"], bool) for r in rows)

    def test_alpha_k_grid(self, small):
        rows = trainer.run_alpha_k_grid(TrainConfig(epochs=1, dim=4), [1, 10, 100], [4, 16, 64], small)
        assert len(rows) == 10
        assert {(r["alpha"], r["K"]) for r in rows[:9]} == {(a, k) for a in (1.0, 10.0, 100.0) for k in (4, 16, 64)}
        assert rows[-1]["loss"] == "CE"

    def test_k_and_length_sweeps(self, small):
        rows = trainer.run_k_sweep(TrainConfig(loss=LossSpec("NEG", K=1), epochs=1, dim=4), [2, 8], small)
        assert [r["K"] for r in rows] == [2, 8]
        rows = trainer.run_length_sweep(TrainConfig(epochs=1, dim=4), [2, 10], small)
        assert [r["max_history"] for r in rows] == [2, 10]


class TestTiming:
    def test_step_time_grows_with_K(self):
        small_k = trainer.measure_step_time(LossSpec("NEG", K=8), catalog_size=2000)
        large_k = trainer.measure_step_time(LossSpec("NEG", K=1024), catalog_size=2000)
        assert large_k > small_k
