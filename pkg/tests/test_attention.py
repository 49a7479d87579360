"""The grouped attention operator against dense and per-group oracles."""

import math

import numpy as np
import pytest

from dgattn.attention import (
    DgAttentionConfig,
    complexity,
    dense_attention_oracle,
    dg_attention_backward,
    dg_attention_forward,
    grouped_attention_oracle,
    make_centroids,
    routing_margin,
)
from dgattn.grouping import assign_groups
from dgattn.selection import select_topk
from dgattn.tensors import make_rng, softmax_rows

from conftest import attention_instance


def _per_head(fn, xq, xk, xv, head_dim):
    cols = [fn(xq[:, s:s + head_dim], xk[:, s:s + head_dim],
               xv[:, s:s + head_dim])
            for s in range(0, xq.shape[1], head_dim)]
    return np.concatenate(cols, axis=1)


class TestForward:
    @pytest.mark.parametrize("seed", range(4))
    def test_degenerate_matches_dense(self, seed):
        rng = make_rng(300 + seed)
        tokens = int(rng.integers(4, 33))
        head_dim = int(rng.integers(2, 9))
        heads = int(rng.integers(1, 3))
        xq, xk, xv, cfg, cents = attention_instance(
            rng, tokens, head_dim, groups=1, top_k=tokens, heads=heads)
        y, _ = dg_attention_forward(xq, xk, xv, cfg, cents)
        want = _per_head(dense_attention_oracle, xq, xk, xv, head_dim)
        assert np.max(np.abs(y - want)) <= 1e-10

    def test_equal_values_collapse(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 14, 4, 3, 6)
        v = rng.standard_normal(4)
        xv = np.tile(v, (14, 1))
        y, _ = dg_attention_forward(xq, xk, xv, cfg, cents)
        assert np.max(np.abs(y - v)) <= 1e-12

    def test_matches_per_group_oracle(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 12, 5, 3, 4, heads=2)
        y, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
        cols = []
        for h in range(2):
            s = slice(5 * h, 5 * h + 5)
            hc = cache.heads[h]
            cols.append(grouped_attention_oracle(
                xq[:, s], xk[:, s], xv[:, s], hc.assign, hc.sel))
        want = np.concatenate(cols, axis=1)
        assert np.max(np.abs(y - want)) <= 1e-12

    def test_rows_sum_to_one(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 20, 4, 4, 7, heads=2)
        _, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
        for hc in cache.heads:
            assert np.max(np.abs(hc.p_hat.sum(axis=1) - 1)) <= 1e-12

    @pytest.mark.parametrize("permute_all", [True, False])
    def test_token_permutation_equivariance_bitwise(self, rng, permute_all):
        xq, xk, xv, cfg, cents = attention_instance(rng, 18, 3, 4, 6, heads=2)
        perm = rng.permutation(18)
        y, _ = dg_attention_forward(xq, xk, xv, cfg, cents)
        if permute_all:
            y2, _ = dg_attention_forward(xq[perm], xk[perm], xv[perm], cfg,
                                         cents)
            # Keys/values moved with the queries, so selection follows and the
            # outputs are exact row moves of each other.
            assert np.array_equal(y2, y[perm])
        else:
            y2, _ = dg_attention_forward(xq[perm], xk, xv, cfg, cents)
            assert np.array_equal(y2, y[perm])

    def test_train_mode_updates_centroids_only_in_cache(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(
            rng, 10, 4, 2, 5, train_mode=True, tau=0.9)
        before = [c.e.copy() for c in cents]
        _, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
        assert cache.new_centroids is not None
        for c, b in zip(cents, before):
            assert np.array_equal(c.e, b)
        assert any(not np.array_equal(n.e, b)
                   for n, b in zip(cache.new_centroids, before))

    def test_eval_mode_keeps_centroids(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 10, 4, 2, 5)
        _, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
        assert cache.new_centroids is None

    def test_top_k_larger_than_tokens_rejected(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 5, 4, 2, 9)
        with pytest.raises(ValueError):
            dg_attention_forward(xq, xk, xv, cfg, cents)

    def test_shape_mismatch_rejected(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 8, 4, 2, 4)
        with pytest.raises(ValueError):
            dg_attention_forward(xq, xk[:, :3], xv, cfg, cents)

    def test_centroid_head_count_rejected(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 8, 4, 2, 4, heads=2)
        with pytest.raises(ValueError):
            dg_attention_forward(xq, xk, xv, cfg, cents[:1])

    def test_literal_scaling_variant(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(
            rng, 9, 4, 1, 9, literal_appendix_scaling=True)
        y, _ = dg_attention_forward(xq, xk, xv, cfg, cents)
        sel = select_topk(cents[0], xk, 9)
        p = xq @ xk[sel.id[0]].T
        want = (softmax_rows(p) / math.sqrt(4)) @ xv[sel.id[0]]
        assert np.max(np.abs(y - want)) <= 1e-12


class TestBackwardBasics:
    def test_zero_upstream_gives_zero_grads(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 11, 4, 3, 5, heads=2)
        _, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
        g = dg_attention_backward(cache, np.zeros_like(xq))
        assert np.all(g.dxq == 0) and np.all(g.dxk == 0) and np.all(g.dxv == 0)

    def test_upstream_shape_checked(self, rng):
        xq, xk, xv, cfg, cents = attention_instance(rng, 8, 4, 2, 4)
        _, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
        with pytest.raises(ValueError):
            dg_attention_backward(cache, np.zeros((8, 5)))

    def test_value_gradient_is_exact_transpose_product(self, rng):
        # With routing frozen, dV is linear: compare against the per-group
        # hand computation.
        xq, xk, xv, cfg, cents = attention_instance(rng, 10, 3, 2, 4)
        _, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
        dy = rng.standard_normal(xq.shape)
        g = dg_attention_backward(cache, dy)
        hc = cache.heads[0]
        want = np.zeros_like(xv)
        for j in range(2):
            lo, hi = hc.layout.offsets[j], hc.layout.offsets[j + 1]
            rows = hc.assign.sort_perm[lo:hi]
            contrib = hc.p_hat[lo:hi].T @ dy[rows]
            for t, key_idx in enumerate(hc.sel.id[j]):
                want[key_idx] += contrib[t]
        assert np.max(np.abs(g.dxv - want)) <= 1e-12


class TestOracles:
    def test_dense_single_token(self, rng):
        xq = rng.standard_normal((1, 5))
        xk = rng.standard_normal((1, 5))
        xv = rng.standard_normal((1, 5))
        assert np.max(np.abs(dense_attention_oracle(xq, xk, xv) - xv)) \
            <= 1e-14

    def test_dense_outputs_in_value_hull(self, rng):
        xq = rng.standard_normal((6, 3))
        xk = rng.standard_normal((6, 3))
        xv = rng.standard_normal((6, 3))
        y = dense_attention_oracle(xq, xk, xv)
        assert np.all(y.min(axis=0) >= xv.min(axis=0) - 1e-12)
        assert np.all(y.max(axis=0) <= xv.max(axis=0) + 1e-12)

    def test_grouped_single_group_is_masked_dense(self, rng):
        xq = rng.standard_normal((7, 4))
        xk = rng.standard_normal((7, 4))
        xv = rng.standard_normal((7, 4))
        cents = make_centroids(
            DgAttentionConfig(heads=1, head_dim=4, groups=1, top_k=3),
            make_rng(5))[0]
        assign = assign_groups(xq, cents)
        sel = select_topk(cents, xk, 3)
        got = grouped_attention_oracle(xq, xk, xv, assign, sel)
        picked = sel.id[0]
        want = dense_attention_oracle(
            xq, xk[picked], xv[picked])
        assert np.max(np.abs(got - want)) <= 1e-12


class TestComplexity:
    @pytest.mark.parametrize("tokens,want",
                             [(3136, 0.05), (784, 0.19), (196, 0.75)])
    @pytest.mark.parametrize("channels", [32, 64, 128, 256])
    def test_published_stage_ratios(self, tokens, want, channels):
        rep = complexity(tokens, channels, 48, 98)
        assert round(rep.ratio, 2) == want

    def test_dense_cost_smallest_case(self):
        assert complexity(2, 1, 1, 1).omega_global == 8

    def test_term_breakdown(self):
        rep = complexity(100, 16, 4, 10)
        assert rep.term_attention == 2 * 10 * 100 * 16
        assert rep.term_routing == 2 * 100 * 4 * 16
        assert rep.term_sort == pytest.approx(10 * 4 * math.log(100))
        assert rep.omega_dg == pytest.approx(
            rep.term_attention + rep.term_routing + rep.term_sort)
        assert rep.ratio == pytest.approx(rep.omega_dg / rep.omega_global)

    def test_grouped_always_cheaper_when_small(self):
        # Random sweep with k and G comfortably under L; the sort term is
        # logarithmic so the linear savings dominate.
        rng = make_rng(11)
        for _ in range(1000):
            tokens = int(rng.integers(8, 5000))
            channels = int(rng.integers(1, 512))
            groups = int(rng.integers(1, max(2, tokens // 4)))
            top_k = int(rng.integers(1, max(2, tokens // 4)))
            rep = complexity(tokens, channels, groups, top_k)
            assert rep.omega_dg < rep.omega_global

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            complexity(0, 1, 1, 1)


class TestRoutingMargin:
    def test_degenerate_margin_infinite(self, rng):
        xq, xk, _, cfg, cents = attention_instance(rng, 6, 4, 1, 6)
        assert routing_margin(xq, xk, cents[0], 6) == math.inf

    def test_margin_positive_generic(self, rng):
        xq, xk, _, cfg, cents = attention_instance(rng, 12, 4, 3, 5)
        m = routing_margin(xq, xk, cents[0], 5)
        assert 0 < m < math.inf

    def test_margin_zero_on_exact_tie(self):
        cents = make_centroids(
            DgAttentionConfig(heads=1, head_dim=2, groups=1, top_k=1),
            make_rng(0))[0]
        keys = np.array([[1.0, 0.0], [1.0, 0.0]])
        queries = np.array([[1.0, 1.0]])
        assert routing_margin(queries, keys, cents, 1) == 0.0
