import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contextbank.attention import (AttentionConfigError, AttentionParams, AttentionWeights, ProposalBatch,
                                   attention_block, attention_grad, attention_timeline, attention_weights,
                                   context_feature, context_head, head_forward, masked_stage_forward,
                                   stage_forward)
from contextbank.membank import build_short_term
from contextbank.numkit import LinearMap, finite_diff_check, mean_pool_spatial, softmax_rows

from oracles import loop_attention


def random_params(rng, d_feat, d_ctx, d_attn=None, temperature=1.0):
    return AttentionParams.init(d_feat, d_ctx, rng, d_attn=d_attn, temperature=temperature)


def oracle(a_pool, b, p):
    m = p.maps()
    return loop_attention(a_pool.tolist(), b.tolist(),
                          m["k"].weight.tolist(), m["k"].bias.tolist(), m["q"].weight.tolist(), m["q"].bias.tolist(),
                          m["v"].weight.tolist(), m["v"].bias.tolist(), m["f"].weight.tolist(), m["f"].bias.tolist(),
                          p.temperature)


def identity_params(d, temperature=1.0):
    return AttentionParams(LinearMap.identity(d), LinearMap.identity(d), LinearMap.identity(d),
                           LinearMap.identity(d), temperature)


class TestWeights:
    def test_single_memory_row(self):
        rng = np.random.default_rng(0)
        p = random_params(rng, 4, 6)
        w = attention_weights(rng.normal(size=(3, 4)), rng.normal(size=(1, 6)), p)
        np.testing.assert_array_equal(w.w, np.ones((3, 1)))

    def test_orthogonal_rows_uniform(self):
        p = identity_params(4)
        a = np.array([[1.0, 0, 0, 0]])
        b = np.array([[0, 1.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 2.0]])
        np.testing.assert_allclose(attention_weights(a, b, p).w, np.full((1, 3), 1 / 3), atol=1e-15)

    def test_hand_case_matches_loop_oracle(self):
        k = LinearMap(np.array([[1.0, 0.5], [-0.5, 2.0]]), np.array([0.1, 0.0]))
        q = LinearMap(np.array([[0.3, 1.0, -1.0], [2.0, 0.0, 0.5]]), np.array([0.0, -0.2]))
        v = LinearMap(np.array([[1.0, 1.0, 0.0], [0.0, -1.0, 3.0]]), np.array([0.5, 0.5]))
        f = LinearMap(np.array([[1.0, -2.0], [0.5, 0.5]]), np.array([0.0, 1.0]))
        p = AttentionParams(k, q, v, f, temperature=1.0)
        a = np.array([[0.2, -1.0], [1.5, 0.3]])
        b = np.array([[1.0, 0.0, 2.0], [-1.0, 0.5, 0.0], [0.3, 0.3, 0.3]])
        w_ref, f_ref = oracle(a, b, p)
        w = attention_weights(a, b, p)
        np.testing.assert_allclose(w.w, w_ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(context_feature(w, b, p).f_context, f_ref, atol=1e-10, rtol=0)

    def test_empty_memory_signalled(self):
        p = random_params(np.random.default_rng(0), 3, 3)
        w = attention_weights(np.ones((2, 3)), np.zeros((0, 3)), p)
        assert w.empty and w.w.shape == (2, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
    def test_rows_stochastic(self, seed, n, m, d):
        rng = np.random.default_rng(seed)
        p = random_params(rng, d, d + 2, temperature=0.01)
        w = attention_weights(rng.normal(size=(n, d)), rng.normal(size=(m, d + 2)), p).w
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5), st.integers(2, 7))
    def test_permutation_equivariance(self, seed, n, m):
        rng = np.random.default_rng(seed)
        p = random_params(rng, 4, 5, temperature=0.5)
        a, b = rng.normal(size=(n, 4)), rng.normal(size=(m, 5))
        perm = rng.permutation(m)
        w = attention_weights(a, b, p)
        wp = attention_weights(a, b[perm], p)
        np.testing.assert_allclose(wp.w, w.w[:, perm], atol=1e-12)
        np.testing.assert_allclose(context_feature(wp, b[perm], p).f_context,
                                   context_feature(w, b, p).f_context, atol=1e-10)

    def test_temperature_limits(self):
        rng = np.random.default_rng(4)
        p = random_params(rng, 4, 4)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        hot = attention_weights(a, b, AttentionParams(*p.maps().values(), temperature=1e6)).w
        assert np.abs(hot - 1 / 5).max() < 1e-4
        cold = attention_weights(a, b, AttentionParams(*p.maps().values(), temperature=1e-6)).w
        logits = p.k_map(a) @ p.q_map(b).T
        np.testing.assert_array_equal(cold, np.eye(5)[np.argmax(logits, axis=1)])


class TestContextFeature:
    def test_single_row_passthrough(self):
        p = identity_params(3)
        b = np.array([[0.5, -1.0, 2.0]])
        out = context_feature(attention_weights(np.ones((2, 3)), b, p), b, p).f_context
        np.testing.assert_array_equal(out, np.repeat(b, 2, axis=0))

    def test_uniform_weights_give_mean(self):
        p = identity_params(3)
        b = np.random.default_rng(0).normal(size=(4, 3))
        w = AttentionWeights(np.full((2, 4), 0.25))
        np.testing.assert_allclose(context_feature(w, b, p).f_context, np.repeat(b.mean(0, keepdims=True), 2, 0),
                                   atol=1e-15)

    def test_random_matches_oracle(self):
        rng = np.random.default_rng(11)
        p = random_params(rng, 5, 7, d_attn=3, temperature=0.2)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(6, 7))
        w_ref, f_ref = oracle(a, b, p)
        np.testing.assert_allclose(context_feature(attention_weights(a, b, p), b, p).f_context, f_ref,
                                   atol=1e-10, rtol=0)

    def test_shape_mismatch(self):
        p = identity_params(3)
        with pytest.raises(ValueError):
            context_feature(AttentionWeights(np.ones((1, 2)) / 2), np.ones((3, 3)), p)


class TestBlock:
    def test_empty_memory_is_identity(self):
        a = ProposalBatch(np.random.default_rng(0).normal(size=(2, 2, 2, 3)))
        out = attention_block(a, np.zeros((0, 3)), identity_params(3))
        np.testing.assert_array_equal(out.features, a.features)

    def test_one_cell_is_vector_addition(self):
        rng = np.random.default_rng(1)
        p = random_params(rng, 3, 4)
        a = ProposalBatch(rng.normal(size=(2, 1, 1, 3)))
        b = rng.normal(size=(5, 4))
        bias = context_feature(attention_weights(a.pooled, b, p), b, p).f_context
        np.testing.assert_allclose(attention_block(a, b, p).features[:, 0, 0], a.features[:, 0, 0] + bias, atol=1e-15)

    def test_pooling_commutes_with_bias(self):
        rng = np.random.default_rng(2)
        p = random_params(rng, 3, 4)
        a = ProposalBatch(rng.normal(size=(3, 2, 3, 3)))
        b = rng.normal(size=(4, 4))
        out = attention_block(a, b, p)
        pooled, _ = stage_forward(a.pooled, b, p)
        np.testing.assert_allclose(mean_pool_spatial(out.features), pooled, atol=1e-12)

    def test_input_not_modified(self):
        rng = np.random.default_rng(3)
        a = ProposalBatch(rng.normal(size=(2, 2, 2, 3)))
        before = a.features.copy()
        attention_block(a, rng.normal(size=(3, 3)), identity_params(3))
        np.testing.assert_array_equal(a.features, before)


class TestHead:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.rng = rng
        self.a = ProposalBatch(rng.normal(size=(4, 2, 2, 6)), frame_id=7)
        self.ts = random_params(rng, 6, 6, temperature=0.3)
        self.tl = random_params(rng, 6, 15, temperature=0.3)
        self.long = rng.normal(size=(9, 15))

    def test_sf_equals_self_block(self):
        short = build_short_term([self.a.pooled], [7])
        out = context_head(self.a, short, None, self.ts, None, "sf")
        np.testing.assert_array_equal(out.features, attention_block(self.a, self.a.pooled, self.ts).features)

    def test_sf_rejects_wider_window(self):
        short = build_short_term([self.a.pooled] * 3, [6, 7, 8])
        with pytest.raises(AttentionConfigError):
            context_head(self.a, short, None, self.ts, None, "sf")

    def test_st_lt_with_empty_bank_equals_st(self):
        short = build_short_term([self.a.pooled] * 3, [6, 7, 8])
        st_out = context_head(self.a, short, None, self.ts, None, "st")
        both = context_head(self.a, short, np.zeros((0, 15)), self.ts, self.tl, "st+lt")
        np.testing.assert_array_equal(both.features, st_out.features)

    def test_lt_differs_from_sf(self):
        short = build_short_term([self.a.pooled], [7])
        sf = context_head(self.a, short, None, self.ts, None, "sf")
        lt = context_head(self.a, None, self.long, None, self.tl, "lt")
        assert np.abs(sf.features - lt.features).max() > 1e-3

    def test_short_runs_before_long(self):
        short = self.rng.normal(size=(8, 6))
        out = context_head(self.a, short, self.long, self.ts, self.tl, "st+lt")
        ref = attention_block(attention_block(self.a, short, self.ts), self.long, self.tl)
        np.testing.assert_allclose(out.features, ref.features, atol=1e-13)

    def test_missing_memory(self):
        with pytest.raises(AttentionConfigError):
            context_head(self.a, None, None, None, self.tl, "lt")
        with pytest.raises(AttentionConfigError):
            context_head(self.a, self.a.pooled, None, self.ts, None, "bogus")

    def test_zero_maps_are_identity(self):
        z_s, z_l = AttentionParams.zeros(6, 6), AttentionParams.zeros(6, 15)
        out = context_head(self.a, self.rng.normal(size=(8, 6)), self.long, z_s, z_l, "st+lt")
        np.testing.assert_array_equal(out.features, self.a.features)


class TestGrad:
    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        ts, tl = random_params(rng, 4, 4), random_params(rng, 4, 13)
        a = rng.normal(size=(3, 4))
        _, cache = head_forward(a, rng.normal(size=(6, 4)), rng.normal(size=(5, 13)), ts, tl, "st+lt")
        grads, g_a = attention_grad(np.zeros((3, 4)), cache, ts, tl)
        assert all(np.all(g == 0) for g in grads.values())
        assert np.all(g_a == 0)

    def test_no_memory_gradient(self):
        rng = np.random.default_rng(1)
        ts, tl = random_params(rng, 4, 4), random_params(rng, 4, 13)
        _, cache = head_forward(rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(5, 13)),
                                ts, tl, "st+lt")
        grads, _ = attention_grad(rng.normal(size=(3, 4)), cache, ts, tl)
        expected = set(ts.to_dict("short.")) | set(tl.to_dict("long."))
        assert set(grads) == expected

    @pytest.mark.parametrize("mode", ["sf", "st", "lt", "st+lt"])
    def test_finite_differences(self, mode):
        rng = np.random.default_rng(["sf", "st", "lt", "st+lt"].index(mode))
        ts, tl = random_params(rng, 4, 4, temperature=0.5), random_params(rng, 4, 13, temperature=0.5)
        a = rng.normal(size=(3, 4))
        short, long = rng.normal(size=(6, 4)), rng.normal(size=(5, 13))
        g_out = rng.normal(size=(3, 4))
        _, cache = head_forward(a, short, long, ts, tl, mode)
        grads, g_a = attention_grad(g_out, cache, ts, tl)
        params = {**ts.to_dict("short."), **tl.to_dict("long."), "a": a}

        def loss(p):
            s = AttentionParams.from_dict(p, "short.", 0.5)
            lo = AttentionParams.from_dict(p, "long.", 0.5)
            out, _ = head_forward(p["a"], short, long, s, lo, mode)
            return float(np.sum(out * g_out))

        assert finite_diff_check(loss, params, {**grads, "a": g_a}) < 1e-5


    def test_finite_differences_low_temperature(self):
        # small inputs keep T=0.01 logits moderate so central differences stay accurate
        rng = np.random.default_rng(7)
        ts, tl = random_params(rng, 4, 4, temperature=0.01), random_params(rng, 4, 13, temperature=0.01)
        a = 0.1 * rng.normal(size=(3, 4))
        short, long = 0.1 * rng.normal(size=(6, 4)), 0.1 * rng.normal(size=(5, 13))
        g_out = rng.normal(size=(3, 4))
        _, cache = head_forward(a, short, long, ts, tl, "st+lt")
        grads, g_a = attention_grad(g_out, cache, ts, tl)
        params = {**ts.to_dict("short."), **tl.to_dict("long."), "a": a}

        def loss(p):
            s = AttentionParams.from_dict(p, "short.", 0.01)
            lo = AttentionParams.from_dict(p, "long.", 0.01)
            out, _ = head_forward(p["a"], short, long, s, lo, "st+lt")
            return float(np.sum(out * g_out))

        assert finite_diff_check(loss, params, {**grads, "a": g_a}) < 1e-5


class TestMasked:
    def test_matches_per_row_attention(self):
        rng = np.random.default_rng(8)
        p = random_params(rng, 4, 7, temperature=0.1)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(6, 7))
        mask = rng.random((5, 6)) < 0.5
        mask[2] = False
        out, _ = masked_stage_forward(a, p.q_map(b), p.v_map(b), mask, p)
        for i in range(5):
            ref, _ = stage_forward(a[i:i + 1], b[mask[i]], p)
            np.testing.assert_allclose(out[i], ref[0], atol=1e-12)
        np.testing.assert_array_equal(out[2], a[2])


class TestInit:
    def test_identity_scheme(self):
        p = AttentionParams.init(4, 13, np.random.default_rng(0), scheme="identity")
        np.testing.assert_array_equal(p.q_map.weight, np.eye(4, 13))
        np.testing.assert_array_equal(p.k_map.weight, np.eye(4))

    def test_unknown_scheme(self):
        with pytest.raises(AttentionConfigError):
            AttentionParams.init(4, 4, np.random.default_rng(0), scheme="orthogonal")

    def test_bad_temperature(self):
        with pytest.raises(AttentionConfigError):
            AttentionParams.init(4, 4, np.random.default_rng(0), temperature=0.0)


class TestTimeline:
    def test_single_same_burst_entry(self):
        w = AttentionWeights(np.array([[0.0, 1.0, 0.0]]), np.array([0.0, 100.0, 500.0]))
        assert attention_timeline(w, 0, 100.5) == [pytest.approx(-0.5)]

    def test_uniform_at_threshold_boundary(self):
        w = AttentionWeights(softmax_rows(np.zeros((1, 100))), np.arange(100.0))
        assert len(attention_timeline(w, 0, 0.0, threshold=0.01)) == 100

    def test_empty(self):
        assert attention_timeline(AttentionWeights(np.zeros((1, 0))), 0, 0.0) == []
