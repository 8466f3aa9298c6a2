import numpy as np
import pytest
import scipy.stats

from discover.evaluate import (delong_test, micro_average_roc, placement_values,
                               roc_auc, wilcoxon_signed_rank)


def brute_force_auc(scores, labels):
    """Exhaustive pair-counting oracle."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    credit = 0.0
    for p in pos:
        for n in neg:
            credit += 1.0 if p > n else (0.5 if p == n else 0.0)
    return credit / (pos.size * neg.size)


def brute_force_placements(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    psi = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    return psi.mean(axis=1), psi.mean(axis=0)


def _random_instance(rng, max_n=12, tie_prone=True):
    n = int(rng.integers(4, max_n + 1))
    while True:
        labels = rng.integers(0, 2, size=n)
        if 0 < labels.sum() < n:
            break
    pool = rng.integers(0, 6, size=n) / 5.0 if tie_prone else rng.normal(size=n)
    return pool, labels


class TestRocAuc:
    def test_perfect_and_inverted(self):
        assert roc_auc([0.2, 0.8], [0, 1]).auc == 1.0
        assert roc_auc([0.2, 0.8], [1, 0]).auc == 0.0

    def test_three_quarters_case(self):
        scores = [0.4, 0.3, 0.2, 0.8]
        labels = [0, 1, 0, 1]
        assert brute_force_auc(scores, labels) == 0.75
        assert roc_auc(scores, labels).auc == pytest.approx(0.75, abs=1e-12)

    def test_matches_brute_force_on_small_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            scores, labels = _random_instance(rng)
            assert roc_auc(scores, labels).auc == pytest.approx(
                brute_force_auc(scores, labels), abs=1e-12)

    def test_curve_invariants_and_trapezoid(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            scores, labels = _random_instance(rng, max_n=40)
            roc = roc_auc(scores, labels)
            assert roc.fpr[0] == 0.0 and roc.tpr[0] == 0.0
            assert roc.fpr[-1] == 1.0 and roc.tpr[-1] == 1.0
            assert (np.diff(roc.fpr) >= 0).all() and (np.diff(roc.tpr) >= 0).all()
            assert np.trapz(roc.tpr, roc.fpr) == pytest.approx(roc.auc, abs=1e-12)

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            scores, labels = _random_instance(rng, tie_prone=False)
            base = roc_auc(scores, labels).auc
            assert roc_auc(3.0 * scores + 1.0, labels).auc == pytest.approx(base, abs=1e-12)
            assert roc_auc(np.exp(scores), labels).auc == pytest.approx(base, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])


class TestMicroAverage:
    def test_single_cutoff_degenerates_to_roc_auc(self):
        scores = [0.1, 0.7, 0.4, 0.9]
        labels = [0, 1, 0, 1]
        assert micro_average_roc([scores], [labels]).auc == roc_auc(scores, labels).auc

    def test_duplicated_cutoff_invariant(self):
        scores = [0.1, 0.7, 0.4, 0.9]
        labels = [0, 1, 0, 1]
        single = micro_average_roc([scores], [labels]).auc
        double = micro_average_roc([scores, scores], [labels, labels]).auc
        assert double == pytest.approx(single, abs=1e-12)

    def test_pooled_interleaved_cutoffs_against_brute_force(self):
        # one perfect cutoff, one fully inverted cutoff, equal sizes
        s_a, l_a = [1.0, 2.0], [0, 1]
        s_b, l_b = [3.0, 4.0], [1, 0]
        pooled = micro_average_roc([s_a, s_b], [l_a, l_b]).auc
        assert pooled == pytest.approx(brute_force_auc(s_a + s_b, l_a + l_b), abs=1e-12)

    def test_single_class_cutoff_excluded_with_warning(self):
        with pytest.warns(UserWarning, match="single class"):
            result = micro_average_roc([[0.5, 0.6], [0.1, 0.9]], [[1, 1], [0, 1]])
        assert result.auc == 1.0
        with pytest.raises(ValueError):
            micro_average_roc([[0.5, 0.6]], [[1, 1]])


class TestDelong:
    def test_identical_scores_p_one(self):
        scores = [0.1, 0.9, 0.3, 0.7, 0.5, 0.2]
        labels = [0, 1, 0, 1, 1, 0]
        res = delong_test(scores, scores, labels)
        assert res.p == 1.0 and res.z == 0.0
        assert res.auc_a == res.auc_b

    def test_placements_match_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            while True:
                scores, labels = _random_instance(rng, max_n=10)
                if labels.sum() >= 2 and (1 - labels).sum() >= 2:
                    break
            v10, v01 = placement_values(scores, labels)
            b10, b01 = brute_force_placements(scores, labels)
            assert np.allclose(v10, b10, atol=1e-12)
            assert np.allclose(v01, b01, atol=1e-12)

    def test_auc_consistent_with_roc_auc(self):
        rng = np.random.default_rng(4)
        scores_a = rng.normal(size=30)
        scores_b = scores_a + rng.normal(scale=0.5, size=30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        res = delong_test(scores_a, scores_b, labels)
        assert res.auc_a == pytest.approx(roc_auc(scores_a, labels).auc, abs=1e-12)
        assert res.auc_b == pytest.approx(roc_auc(scores_b, labels).auc, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        scores_a = rng.normal(size=24)
        scores_b = rng.normal(size=24)
        labels = np.r_[np.ones(12, int), np.zeros(12, int)]
        ab = delong_test(scores_a, scores_b, labels)
        ba = delong_test(scores_b, scores_a, labels)
        assert ab.p == pytest.approx(ba.p, abs=1e-12)
        assert ab.z == pytest.approx(-ba.z, abs=1e-12)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            delong_test([0.1, 0.2], [0.1], [0, 1])
        with pytest.raises(ValueError):
            delong_test([0.1, 0.2], [0.2, 0.3], [1, 1])


class TestWilcoxon:
    def test_six_uniform_positives_exact(self):
        pairs = [(10 + d, 10.0) for d in (1, 2, 3, 4, 5, 6)]
        res = wilcoxon_signed_rank(pairs)
        assert res.w == 0.0
        assert res.p == 0.03125
        assert res.exact

    def test_antisymmetric(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=9)
        b = rng.normal(size=9)
        fwd = wilcoxon_signed_rank(list(zip(a, b)))
        rev = wilcoxon_signed_rank(list(zip(b, a)))
        assert fwd.p == pytest.approx(rev.p, abs=1e-12)
        assert fwd.w_plus == rev.w_minus and fwd.w_minus == rev.w_plus

    def test_matches_scipy_exact_without_ties(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(5, 13))
            diffs = rng.normal(size=n)
            res = wilcoxon_signed_rank([(d, 0.0) for d in diffs])
            ref = scipy.stats.wilcoxon(diffs, method="exact", alternative="two-sided")
            assert res.p == pytest.approx(ref.pvalue, abs=1e-12)
            assert res.w == pytest.approx(ref.statistic, abs=1e-12)

    def test_sixteen_pairs_exact_enumeration(self):
        rng = np.random.default_rng(8)
        pairs = [(float(a), float(b)) for a, b in rng.normal(size=(16, 2))]
        res = wilcoxon_signed_rank(pairs)
        assert res.exact and res.n_used == 16
        assert 0.0 < res.p <= 1.0

    def test_exact_close_to_normal_at_n20(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            pairs = [(d, 0.0) for d in rng.normal(loc=0.2, size=20)]
            exact = wilcoxon_signed_rank(pairs, method="exact")
            approx = wilcoxon_signed_rank(pairs, method="approx")
            assert exact.exact and not approx.exact
            assert abs(exact.p - approx.p) < 0.02

    def test_handles_ties_in_exact_mode(self):
        pairs = [(2.0, 1.0), (3.0, 2.0), (1.0, 2.0), (5.0, 1.0), (4.0, 1.0), (0.0, 1.0)]
        res = wilcoxon_signed_rank(pairs)      # |diffs| = 1,1,1,4,3,1 -> tied ranks
        assert res.exact and 0 < res.p <= 1.0

    def test_all_zero_differences(self):
        with pytest.warns(UserWarning):
            res = wilcoxon_signed_rank([(1.0, 1.0)] * 4)
        assert res.p == 1.0 and res.n_used == 0
