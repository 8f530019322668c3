import itertools

import numpy as np
import pytest

from fang.errors import InputError, NumericalError, ParameterError
from fang.grouping import NeuronGrouping
from fang.pruners import (
    fang_prune_ffn,
    flap_bias,
    flap_group_importance,
    flap_importance,
    flap_prune,
    hessian,
    obc_compensate,
    obc_importance,
    obc_traditional_prune,
    obc_variant_prune,
    prune_count,
    prune_heads,
    reweighted_hessian,
    split_count,
    weighted_error,
)

from conftest import random_spd


def lstsq_keep(w, h, keep):
    """Oracle: argmin over W' supported on ``keep`` of tr((W - W') H (W - W')^T)."""
    k = np.flatnonzero(keep)
    out = np.zeros_like(w)
    out[:, k] = np.linalg.solve(h[np.ix_(k, k)], (w @ h[:, k]).T).T
    return out


def damped(h, damping=0.01):
    return h + damping * np.mean(np.diag(h)) * np.eye(len(h))


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestOBC:
    def test_zero_sparsity_is_identity(self, rng):
        w = rng.standard_normal((4, 6))
        res = obc_variant_prune(w, random_spd(rng, 6), sp=0.0)
        np.testing.assert_array_equal(res.new_weights, w)
        assert res.n_pruned == 0

    def test_identity_hessian_drops_smallest_norm(self):
        w = np.array([[3.0, 0.1, 2.0, 0.2], [0.0, 0.1, 1.0, 0.0]])
        res = obc_variant_prune(w, np.eye(4), sp=0.5)
        np.testing.assert_array_equal(res.mask, [False, True, False, True])
        np.testing.assert_allclose(res.new_weights, [[3.0, 0, 2.0, 0], [0.0, 0, 1.0, 0]])

    def test_diagonal_hessian_no_cross_talk(self, rng):
        w = rng.standard_normal((5, 8))
        h = np.diag(rng.uniform(0.5, 2.0, 8))
        res = obc_variant_prune(w, h, n_prune=3)
        keep = ~res.mask
        np.testing.assert_allclose(res.new_weights[:, keep], w[:, keep], atol=1e-12)

    @pytest.mark.parametrize("damping", [0.0, 0.01])
    def test_compensation_matches_least_squares(self, rng, damping):
        for _ in range(10):
            w = rng.standard_normal((16, 32))
            h = random_spd(rng, 32, cond=100.0)
            res = obc_variant_prune(w, h, sp=0.4, damping=damping)
            ref = lstsq_keep(w, damped(h, damping), ~res.mask)
            assert rel_fro(res.new_weights, ref) <= 1e-9

    def test_importance_formula(self, rng):
        w = rng.standard_normal((3, 5))
        hinv = np.linalg.inv(random_spd(rng, 5))
        expected = [sum(w[i, j] ** 2 for i in range(3)) / hinv[j, j] for j in range(5)]
        np.testing.assert_allclose(obc_importance(w, hinv), expected, rtol=1e-13)

    def test_nonpositive_diagonal_rejected(self):
        with pytest.raises(NumericalError):
            obc_importance(np.ones((2, 2)), np.array([[1.0, 0], [0, -1.0]]))

    def test_dead_channels_scored_zero_and_pruned_first(self, rng):
        x = rng.standard_normal((6, 40))
        x[2] = 0.0
        w = rng.standard_normal((4, 6))
        res = obc_variant_prune(w, hessian(x), n_prune=1)
        assert np.flatnonzero(res.mask).tolist() == [2]
        # the dead column carried no signal, so nothing else needs to move
        np.testing.assert_allclose(np.delete(res.new_weights, 2, 1), np.delete(w, 2, 1), atol=1e-12)

    def test_errors_are_consistent(self, rng):
        x = rng.standard_normal((10, 60))
        w = rng.standard_normal((4, 10))
        res = obc_variant_prune(w, hessian(x), sp=0.5, damping=0.0)
        np.testing.assert_allclose(res.recon_error_before, np.sum((np.where(res.mask, w, 0) @ x) ** 2), rtol=1e-10)
        np.testing.assert_allclose(res.recon_error_after, np.sum(((w - res.new_weights) @ x) ** 2), rtol=1e-10)
        assert res.recon_error_after <= res.recon_error_before

    def test_prune_count_floor(self):
        assert prune_count(0.5, 7) == 3
        assert prune_count(0.3, 10) == 3  # 0.3*10 is 2.9999999999999996 in floating point
        with pytest.raises(ParameterError):
            prune_count(1.0, 4)
        with pytest.raises(ParameterError):
            prune_count(0.0, 4, n_prune=5)

    def test_compensate_empty_mask(self, rng):
        w = rng.standard_normal((2, 3))
        assert not obc_compensate(w, np.eye(3), np.zeros(3, bool)).any()


class TestTraditional:
    def test_each_step_is_least_squares_on_survivors(self, rng):
        """Rank-1 elimination must agree with re-solving from scratch after every step."""
        w = rng.standard_normal((6, 12))
        h = random_spd(rng, 12, cond=50.0)
        trace = []
        obc_traditional_prune(w, h, n_prune=6, damping=0.0, trace=trace)
        pruned = np.zeros(12, bool)
        for col, weights in trace:
            pruned[col] = True
            np.testing.assert_allclose(weights, lstsq_keep(w, h, ~pruned), atol=1e-10)

    def test_greedy_choice_is_local_optimum(self, rng):
        w = rng.standard_normal((4, 7))
        h = random_spd(rng, 7)
        trace = []
        obc_traditional_prune(w, h, n_prune=1, damping=0.0, trace=trace)
        errs = [weighted_error(w - lstsq_keep(w, h, np.arange(7) != j), h) for j in range(7)]
        assert trace[0][0] == int(np.argmin(errs))

    def test_identity_matches_variant(self, rng):
        for _ in range(5):
            w = rng.standard_normal((8, 16))
            a = obc_traditional_prune(w, np.eye(16), sp=0.5)
            b = obc_variant_prune(w, np.eye(16), sp=0.5)
            np.testing.assert_array_equal(a.mask, b.mask)
            assert np.abs(a.new_weights - b.new_weights).max() <= 1e-10


class TestFLAP:
    def test_constant_channel_scores_zero(self, rng):
        x = rng.standard_normal((5, 30))
        x[1] = 4.2
        assert flap_importance(rng.standard_normal((3, 5)), x)[1] == 0.0

    def test_importance_oracle(self, rng):
        x = rng.standard_normal((4, 25))
        w = rng.standard_normal((3, 4))
        expected = [np.var(x[i]) * x.shape[1] * np.sum(w[:, i] ** 2) for i in range(4)]
        np.testing.assert_allclose(flap_importance(w, x), expected, rtol=1e-12)

    def test_mean_substitution(self, rng):
        x = rng.standard_normal((8, 40)) + rng.standard_normal((8, 1))
        w = rng.standard_normal((5, 8))
        res = flap_prune(w, x, sp=0.5)
        xbar = x.mean(axis=1)
        np.testing.assert_allclose(res.new_weights @ xbar + res.bias, w @ xbar, atol=1e-12)

    def test_bias_recovers_constant_channels_exactly(self, rng):
        x = rng.standard_normal((6, 20))
        x[[0, 3]] = [[2.0], [-1.5]]
        w = rng.standard_normal((4, 6))
        res = flap_prune(w, x, n_prune=2)
        assert set(np.flatnonzero(res.mask)) == {0, 3}
        np.testing.assert_allclose(res.new_weights @ x + res.bias[:, None], w @ x, atol=1e-12)
        assert res.recon_error_after == pytest.approx(0.0, abs=1e-20)

    def test_bias_formula(self):
        w = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(flap_bias(w, [True, False, True], [10.0, 20.0, 30.0]), [100.0])

    def test_group_importance_uniform_alpha(self, rng):
        k = 4
        x = rng.standard_normal((12, 60))
        labels = rng.integers(0, k, 60)
        w = rng.standard_normal((5, 12))
        group = np.array([1, 4, 7, 9])
        got = flap_group_importance(w, x, labels, np.full(k, 1.0 / k), group)
        np.testing.assert_allclose(got, flap_importance(w, x)[group] / k, rtol=1e-12)


class TestReweighting:
    def test_weighted_hessian_loop_oracle(self, rng):
        x = rng.standard_normal((6, 30))
        labels = rng.integers(0, 3, 30)
        alpha = np.array([0.2, 0.5, 0.3])
        group = np.array([0, 2, 5])
        ref = np.zeros((3, 3))
        for t in range(30):
            v = x[group, t]
            ref += alpha[labels[t]] * np.outer(v, v)
        np.testing.assert_allclose(reweighted_hessian(x, labels, alpha, group), ref, rtol=1e-13, atol=1e-13)

    def test_alpha_row_must_sum_to_one(self, rng):
        with pytest.raises(ParameterError):
            reweighted_hessian(np.ones((2, 3)), np.zeros(3, int), np.array([0.5, 0.6]), [0])

    def test_negative_weights_rejected(self):
        with pytest.raises(InputError):
            hessian(np.ones((2, 2)), [1.0, -1.0])


class TestSplitCount:
    def test_proportional(self):
        assert split_count(6, [4, 4, 4]) == ([2, 2, 2], 0)

    def test_largest_remainder(self):
        counts, short = split_count(7, [4, 4, 4])
        assert counts == [3, 2, 2] and short == 0

    def test_cap_reports_shortfall(self):
        counts, short = split_count(10, [4, 4])
        assert counts == [3, 3] and short == 4

    def test_uneven_sizes(self):
        counts, short = split_count(5, [2, 8])
        assert sum(counts) == 5 and counts == [1, 4]


def make_grouping(n, k, shared, rng, t=50):
    perm = rng.permutation(n)
    m = (n - shared) // k
    groups = [np.sort(perm[i * m : (i + 1) * m]) for i in range(k)]
    labels = rng.integers(0, k, t)
    labels[:k] = np.arange(k)
    return NeuronGrouping(groups, np.sort(perm[k * m :]), alpha=np.full((k, k), 1.0 / k), labels=labels)


class TestFangFFN:
    def test_single_group_equals_plain_obc(self, rng):
        x = rng.standard_normal((12, 80))
        w = rng.standard_normal((6, 12))
        g = NeuronGrouping([np.arange(12)], np.zeros(0, np.int64), alpha=np.ones((1, 1)), labels=np.zeros(80, int))
        a = fang_prune_ffn(w, x, g, "obc", n_prune=5)
        b = obc_variant_prune(w, hessian(x), n_prune=5)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.new_weights, b.new_weights, atol=1e-12)

    def test_shared_group_untouched(self, rng):
        x = rng.standard_normal((16, 60))
        w = rng.standard_normal((4, 16))
        g = make_grouping(16, 3, 4, rng, t=60)
        for method in ("obc", "flap"):
            res = fang_prune_ffn(w, x, g, method, sp_layer=0.5)
            assert not res.mask[g.shared].any()
            np.testing.assert_array_equal(res.new_weights[:, g.shared], w[:, g.shared])
            assert res.n_pruned == 8

    def test_group_stats(self, rng):
        x = rng.standard_normal((16, 60))
        w = rng.standard_normal((4, 16))
        g = make_grouping(16, 3, 4, rng, t=60)
        res = fang_prune_ffn(w, x, g, "obc", n_prune=7)
        assert [s["pruned"] for s in res.groups] == [3, 2, 2]
        assert res.recon_error_before == pytest.approx(sum(s["error_before"] for s in res.groups))

    def test_flap_unified_bias(self, rng):
        x = rng.standard_normal((16, 60)) + 1.0
        w = rng.standard_normal((4, 16))
        g = make_grouping(16, 3, 4, rng, t=60)
        res = fang_prune_ffn(w, x, g, "flap", n_prune=6)
        xbar = x.mean(axis=1)
        np.testing.assert_allclose(res.new_weights @ xbar + res.bias, w @ xbar, atol=1e-12)

    def test_rejects_broken_partition(self, rng):
        g = NeuronGrouping([np.array([0, 1])], np.array([1]), alpha=np.ones((1, 1)), labels=np.zeros(5, int))
        with pytest.raises(NumericalError):
            fang_prune_ffn(np.ones((2, 3)), np.ones((3, 5)), g, "obc", n_prune=1)


class TestHeads:
    def test_obc_heads_compensation_optimal(self, rng):
        x = rng.standard_normal((16, 100))
        wo = rng.standard_normal((8, 16))
        res = prune_heads(wo, x, 4, "obc", n_prune=2, damping=0.0)
        cols = np.repeat(res.mask, 4)
        np.testing.assert_allclose(res.new_weights, lstsq_keep(wo, hessian(x), ~cols), atol=1e-9)

    def test_obc_head_score_is_block_error(self, rng):
        """With one head removed the chosen head must minimize the compensated error."""
        x = rng.standard_normal((12, 100))
        wo = rng.standard_normal((6, 12))
        h = hessian(x)
        res = prune_heads(wo, x, 4, "obc", n_prune=1, damping=0.0)
        errs = [weighted_error(wo - lstsq_keep(wo, h, np.repeat(np.arange(3) != i, 4)), h) for i in range(3)]
        assert int(np.flatnonzero(res.mask)[0]) == int(np.argmin(errs))

    def test_flap_heads_bias(self, rng):
        x = rng.standard_normal((12, 50)) + 2.0
        wo = rng.standard_normal((6, 12))
        res = prune_heads(wo, x, 4, "flap", n_prune=1)
        xbar = x.mean(axis=1)
        np.testing.assert_allclose(res.new_weights @ xbar + res.bias, wo @ xbar, atol=1e-12)

    def test_refuses_all_heads(self, rng):
        with pytest.raises(InputError):
            prune_heads(np.ones((2, 8)), np.ones((8, 5)), 4, "obc", n_prune=2)


def exhaustive_best_error(w, h, n_prune):
    best = np.inf
    for cols in itertools.combinations(range(w.shape[1]), n_prune):
        keep = np.ones(w.shape[1], bool)
        keep[list(cols)] = False
        best = min(best, weighted_error(w - lstsq_keep(w, h, keep), h))
    return best


def test_exhaustive_small_case_bounds(rng):
    w = rng.standard_normal((3, 6))
    h = random_spd(rng, 6)
    res = obc_variant_prune(w, h, n_prune=3, damping=0.0)
    assert res.recon_error_after >= exhaustive_best_error(w, h, 3) - 1e-10
