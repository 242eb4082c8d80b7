import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from l2vit.attention import (
    AttentionConfig,
    WindowLayout,
    _direct_parts,
    crop_from_windows,
    feature_map,
    linear_attention_direct,
    linear_attention_factored,
    multi_head,
    order_macs,
    pad_to_windows,
    select_attention_order,
    softmax_attention,
    window_partition,
    window_reverse,
)
from l2vit.model import variant_config
from l2vit.numerics import DegenerateInputError, ShapeError


def softmax_attention_oracle(q, k, v, scale):
    """Scalar-loop reference of row-normalized exponential attention."""
    n, d = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        scores = np.array([scale * sum(q[i, t] * k[j, t] for t in range(d))
                           for j in range(k.shape[0])])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        out[i] = sum(weights[j] * v[j] for j in range(k.shape[0]))
    return out


def linear_attention_oracle(q, k, v, cfg):
    """Scalar evaluation of clamped kernel-similarity attention."""
    fq = feature_map(q, cfg.feature_map)
    fk = feature_map(k, cfg.feature_map)
    n = q.shape[0]
    out = np.zeros_like(v)
    for i in range(n):
        sims = np.array([float(fq[i] @ fk[j]) for j in range(n)])
        den = max(sims.sum(), cfg.clamp_floor)
        out[i] = sum(sims[j] * v[j] for j in range(n)) / den
    return out


class TestSoftmaxAttention:
    def test_single_token_returns_value(self):
        rng = np.random.default_rng(0)
        q, k, v = (rng.standard_normal((1, 8)) for _ in range(3))
        np.testing.assert_array_equal(softmax_attention(q, k, v), v)

    def test_zero_queries_mean_pool(self):
        rng = np.random.default_rng(1)
        k, v = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        out = softmax_attention(np.zeros((3, 4)), k, v)
        for i in range(3):
            np.testing.assert_allclose(out[i], v.mean(axis=0), rtol=1e-14)

    def test_random_against_scalar_oracle(self):
        rng = np.random.default_rng(0)
        q, k, v = (rng.standard_normal((4, 8)) for _ in range(3))
        scale = 1.0 / math.sqrt(8)
        np.testing.assert_allclose(softmax_attention(q, k, v, scale),
                                   softmax_attention_oracle(q, k, v, scale),
                                   rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            softmax_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))


class TestFeatureMap:
    def test_relu_identity_on_non_negative(self):
        x = np.abs(np.random.default_rng(0).standard_normal((3, 4)))
        np.testing.assert_array_equal(feature_map(x, "relu"), x)

    def test_l1_norm_definition(self):
        np.testing.assert_array_equal(feature_map([[2.0, -2.0]], "l1_norm"),
                                      [[0.5, -0.5]])

    def test_leaky(self):
        np.testing.assert_allclose(feature_map([[-1.0, 4.0]], "leaky_relu"),
                                   [[-0.01, 4.0]], rtol=0, atol=0)

    def test_l1_zero_row_degenerate(self):
        with pytest.raises(DegenerateInputError):
            feature_map([[0.0, 0.0], [1.0, 2.0]], "l1_norm")


class TestLinearAttentionDirect:
    def test_single_positive_token_self_normalizes(self):
        rng = np.random.default_rng(4)
        q = np.abs(rng.standard_normal((1, 6))) + 0.5
        k = np.abs(rng.standard_normal((1, 6))) + 0.5
        v = rng.standard_normal((1, 6))
        cfg = AttentionConfig(1, 6, "relu", clamp_floor=1e-6)
        assert float((q @ k.T).item()) >= cfg.clamp_floor
        np.testing.assert_allclose(linear_attention_direct(q, k, v, cfg), v,
                                   rtol=1e-15)

    def test_dead_query_row_gives_zero_output(self):
        rng = np.random.default_rng(5)
        q = np.abs(rng.standard_normal((3, 4))) + 0.1
        q[1] = -1.0  # relu kills the whole row
        k = np.abs(rng.standard_normal((3, 4))) + 0.1
        v = rng.standard_normal((3, 4))
        cfg = AttentionConfig(1, 4, "relu", clamp_floor=1e-6)
        out = linear_attention_direct(q, k, v, cfg)
        np.testing.assert_array_equal(out[1], np.zeros(4))

    def test_random_against_scalar_oracle(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.standard_normal((6, 4)) for _ in range(3))
        cfg = AttentionConfig(1, 4, "relu", clamp_floor=1e-6)
        np.testing.assert_allclose(linear_attention_direct(q, k, v, cfg),
                                   linear_attention_oracle(q, k, v, cfg),
                                   rtol=1e-12, atol=1e-14)

    def test_non_negativity_with_relu(self):
        rng = np.random.default_rng(6)
        cfg = AttentionConfig(1, 8, "relu")
        for _ in range(20):
            q, k, v = (rng.standard_normal((10, 8)) for _ in range(3))
            a = _direct_parts(q, k, v, cfg)[0]
            assert np.all(a >= 0.0)

    def test_row_stochastic_when_unclamped(self):
        rng = np.random.default_rng(7)
        cfg = AttentionConfig(1, 8, "relu", clamp_floor=1e-6)
        q, k, v = (np.abs(rng.standard_normal((12, 8))) + 0.1 for _ in range(3))
        a, row_sums, den, _ = _direct_parts(q, k, v, cfg)
        assert np.all(row_sums > cfg.clamp_floor)
        normalized = a / den[:, None]
        assert np.abs(normalized.sum(axis=1) - 1.0).max() <= 1e-9


class TestFactoredOrder:
    def test_matches_direct_on_spec_point(self):
        rng = np.random.default_rng(2)
        q, k, v = (rng.standard_normal((16, 8)) for _ in range(3))
        cfg = AttentionConfig(1, 8, "relu", clamp_floor=1e-6, scale_s=1.0)
        diff = np.abs(linear_attention_direct(q, k, v, cfg)
                      - linear_attention_factored(q, k, v, cfg)).max()
        assert diff <= 1e-9

    def test_single_token(self):
        rng = np.random.default_rng(3)
        q = np.abs(rng.standard_normal((1, 4))) + 0.5
        k = np.abs(rng.standard_normal((1, 4))) + 0.5
        v = rng.standard_normal((1, 4))
        cfg = AttentionConfig(1, 4, "relu", clamp_floor=1e-6, scale_s=2.0)
        np.testing.assert_allclose(linear_attention_factored(q, k, v, cfg), v,
                                   rtol=1e-14)

    def test_scale_invariance_under_consistent_clamp(self):
        # dividing both accumulators by s cancels exactly, clamped or not
        rng = np.random.default_rng(8)
        q, k, v = (rng.standard_normal((10, 8)) for _ in range(3))
        base = linear_attention_factored(
            q, k, v, AttentionConfig(1, 8, "relu", clamp_floor=5.0, scale_s=1.0))
        for s in (0.5, 8.0, 19.5959):
            out = linear_attention_factored(
                q, k, v, AttentionConfig(1, 8, "relu", clamp_floor=5.0, scale_s=s))
            np.testing.assert_allclose(out, base, rtol=1e-12, atol=1e-14)

    @given(st.integers(0, 2 ** 31), st.integers(2, 24), st.integers(2, 16),
           st.sampled_from(["relu", "leaky_relu"]))
    @settings(max_examples=40, deadline=None)
    def test_order_equivalence_property(self, seed, n, d, fm):
        rng = np.random.default_rng(seed)
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        cfg = AttentionConfig(1, d, fm, clamp_floor=1e-6, scale_s=1.0)
        diff = np.abs(linear_attention_direct(q, k, v, cfg)
                      - linear_attention_factored(q, k, v, cfg)).max()
        assert diff <= 1e-9

    @given(st.integers(0, 2 ** 31), st.integers(2, 16))
    @settings(max_examples=25, deadline=None)
    def test_permutation_equivariance(self, seed, n):
        rng = np.random.default_rng(seed)
        q, k, v = (rng.standard_normal((n, 6)) for _ in range(3))
        cfg = AttentionConfig(1, 6, "relu", clamp_floor=1e-3)
        perm = rng.permutation(n)
        out = linear_attention_factored(q, k, v, cfg)
        out_perm = linear_attention_factored(q[perm], k[perm], v[perm], cfg)
        np.testing.assert_allclose(out_perm, out[perm], rtol=1e-10, atol=1e-12)

    def test_batched_heads_match_loop(self):
        rng = np.random.default_rng(9)
        q, k, v = (rng.standard_normal((3, 10, 4)) for _ in range(3))
        cfg = AttentionConfig(1, 4, "relu", clamp_floor=1e-2, scale_s=1.5)
        batched = linear_attention_factored(q, k, v, cfg)
        for h in range(3):
            np.testing.assert_array_equal(
                batched[h], linear_attention_factored(q[h], k[h], v[h], cfg))


class TestSelectOrder:
    def test_large_sequence_prefers_factored(self):
        assert select_attention_order(3136, 32) == "factored"

    def test_wide_head_prefers_direct(self):
        assert select_attention_order(16, 64) == "direct"

    def test_tie_goes_factored(self):
        assert select_attention_order(48, 48) == "factored"

    def test_mac_formulas(self):
        assert order_macs(100, 8, "direct") == 2 * 100 * 100 * 8
        assert order_macs(100, 8, "factored") == 2 * 100 * 8 * 8
        with pytest.raises(ValueError):
            order_macs(0, 8, "direct")


def window_partition_oracle(x, layout):
    """Index-arithmetic reference."""
    w = layout.window
    per_row = layout.feature_w // w
    out = np.zeros((layout.num_windows, w * w, x.shape[1]))
    for n in range(layout.tokens):
        y, xcol = divmod(n, layout.feature_w)
        widx = (y // w) * per_row + (xcol // w)
        inner = (y % w) * w + (xcol % w)
        out[widx, inner] = x[n]
    return out


class TestWindows:
    def test_single_window_is_input(self):
        x = np.random.default_rng(0).standard_normal((49, 5))
        layout = WindowLayout(7, 7, 7)
        windows = window_partition(x, layout)
        assert windows.shape == (1, 49, 5)
        np.testing.assert_array_equal(windows[0], x)

    def test_fourteen_grid_against_index_oracle(self):
        x = np.random.default_rng(1).standard_normal((196, 3))
        layout = WindowLayout(14, 14, 7)
        windows = window_partition(x, layout)
        assert windows.shape == (4, 49, 3)
        np.testing.assert_array_equal(windows, window_partition_oracle(x, layout))
        np.testing.assert_array_equal(window_reverse(windows, layout), x)

    def test_variant_window_is_seven(self):
        for name in ("tiny", "small", "base"):
            assert variant_config(name).window == 7

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5),
           st.integers(1, 4), st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, gh, gw, w, c, seed):
        layout = WindowLayout(gh * w, gw * w, w)
        x = np.random.default_rng(seed).standard_normal((layout.tokens, c))
        np.testing.assert_array_equal(
            window_reverse(window_partition(x, layout), layout), x)

    def test_indivisible_layout_rejected(self):
        with pytest.raises(ShapeError):
            WindowLayout(15, 14, 7)

    def test_pad_and_crop_round_trip(self):
        x = np.random.default_rng(2).standard_normal((5 * 6, 3))
        padded, layout = pad_to_windows(x, (5, 6), 4)
        assert (layout.feature_h, layout.feature_w) == (8, 8)
        grid = padded.reshape(8, 8, 3)
        assert np.all(grid[5:] == 0.0) and np.all(grid[:, 6:] == 0.0)
        back = crop_from_windows(padded, (8, 8), (5, 6))
        np.testing.assert_array_equal(back, x)


class TestMultiHead:
    def test_one_head_equals_single_op(self):
        rng = np.random.default_rng(0)
        q, k, v = (rng.standard_normal((6, 8)) for _ in range(3))
        cfg = AttentionConfig(1, 8, "relu", clamp_floor=1e-3)
        op = lambda qi, ki, vi: linear_attention_factored(qi, ki, vi, cfg)
        np.testing.assert_array_equal(multi_head(op, q, k, v, cfg), op(q, k, v))

    def test_head_permutation_symmetry(self):
        rng = np.random.default_rng(1)
        cfg = AttentionConfig(2, 4, "relu", clamp_floor=1e-3)
        q, k, v = (rng.standard_normal((6, 8)) for _ in range(3))
        op = lambda qi, ki, vi: linear_attention_factored(qi, ki, vi, cfg)
        out = multi_head(op, q, k, v, cfg)
        swap = np.r_[4:8, 0:4]  # exchange the two head channel blocks
        out_swapped = multi_head(op, q[:, swap], k[:, swap], v[:, swap], cfg)
        np.testing.assert_array_equal(out_swapped[:, swap], out)

    def test_output_projection(self):
        rng = np.random.default_rng(2)
        cfg = AttentionConfig(2, 3, "relu", clamp_floor=1e-3)
        q, k, v = (rng.standard_normal((5, 6)) for _ in range(3))
        w_out = rng.standard_normal((6, 6))
        b_out = rng.standard_normal(6)
        op = lambda qi, ki, vi: linear_attention_factored(qi, ki, vi, cfg)
        expected = multi_head(op, q, k, v, cfg) @ w_out + b_out
        np.testing.assert_allclose(
            multi_head(op, q, k, v, cfg, w_out, b_out), expected, rtol=1e-14)

    def test_divisibility_enforced(self):
        cfg = AttentionConfig(3, 4, "relu")
        with pytest.raises(ShapeError):
            multi_head(lambda *a: a[0], np.ones((2, 8)), np.ones((2, 8)),
                       np.ones((2, 8)), cfg)

    def test_tiny_stage1_geometry(self):
        cfg = variant_config("tiny")
        assert cfg.stage_dims[0] == 96 and cfg.stage_heads[0] == 3


class TestConfigValidation:
    def test_clamp_floor_guard(self):
        with pytest.raises(ValueError):
            AttentionConfig(1, 8, "relu", clamp_floor=1e-9)

    def test_scale_positive(self):
        with pytest.raises(ValueError):
            AttentionConfig(1, 8, "relu", scale_s=0.0)

    def test_qk_scale_default(self):
        assert AttentionConfig(2, 16).qk_scale == pytest.approx(0.25)
