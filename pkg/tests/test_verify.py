import numpy as np
import pytest
from scipy.special import logsumexp

from rankloss import losses, verify

KEYS = {"suite", "check", "query", "analytic", "empirical", "ci", "verdict"}


class TestSuites:
    def test_identities(self):
        records = verify.identity_suite(200, seed=3)
        assert len(records) == 5
        assert all(r["verdict"] == "supported" for r in records)
        assert all(KEYS <= set(r) for r in records)
        assert max(r["max_rel_gap"] for r in records) <= verify.IDENTITY_RTOL

    def test_propositions(self):
        records = verify.proposition_suite(500, seed=1, ce_trials=5000)
        assert [r["verdict"] for r in records] == ["supported"] * 3
        assert all(r["violations"] == 0 and r["min_slack"] >= -1e-12 for r in records)

    def test_lemmas(self):
        records = verify.lemma_suite(5000, seed=2)
        assert {r["check"] for r in records} == {"NCE_floor", "NEG_floor", "SCE_floor", "IS_floor"}
        assert all(r["verdict"] == "supported" for r in records)

    def test_binomial(self):
        (rec,) = verify.binomial_suite()
        assert rec["verdict"] == "supported"
        assert rec["instances"] == 19 * sum(K + 1 for K in range(1, 21))

    def test_theorem_grid_shape(self):
        kinds = {(spec.kind, metric) for spec, _, metric, _ in verify.THEOREM_GRID}
        assert len(verify.THEOREM_GRID) == 20
        assert kinds == {(k, m) for k in ("NCE", "NEG", "SCE", "IS") for m in ("NDCG", "RR")}

    def test_theorem_cells_supported_small(self):
        records = verify.theorem_suite(trials=5000, seed=0)
        assert all(r["verdict"] == "supported" for r in records)
        assert all(r["analytic"] > 0 for r in records)
        worked = records[0]
        assert worked["query"]["m"] == 2
        assert worked["analytic"] == pytest.approx(1 - 0.96 ** 8)

    def test_grid_scores_rank(self):
        for i, r in [(0, 4), (5, 10), (19, 8)]:
            scores, t = verify.grid_scores(i, r)
            assert np.count_nonzero(scores >= scores[t]) == r

    def test_run_suite_names(self):
        with pytest.raises(ValueError):
            verify.run_suite("everything")
        assert len(verify.run_suite("binomial")) == 1


class TestMutation:
    def test_broken_sce_is_caught(self, monkeypatch):
        # drop the alpha scaling: the floor ln(1 + alpha xi) then fails
        def broken(s_pos, neg, alpha):
            return _plain_sampled_softmax(s_pos, neg)

        monkeypatch.setattr(losses, "sce_loss", broken)
        records = verify.lemma_suite(5000, seed=1)
        verdicts = {r["check"]: r["verdict"] for r in records}
        assert verdicts["SCE_floor"] == "violated"
        assert verdicts["NEG_floor"] == "supported"


def _plain_sampled_softmax(s_pos, neg):
    s_pos = np.asarray(s_pos, dtype=float)
    both = np.concatenate([s_pos[..., None], np.asarray(neg, dtype=float)], axis=-1)
    return logsumexp(both, axis=-1) - s_pos
