import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acesync.errors import ConfigurationError, ShapeError
from acesync.importance import (GradStats, ImportanceScore, TemporalAttentionParams,
                                calibrate_attention, fuse_importance, structural_attention,
                                temporal_attention, top_p_select, update_grad_stats)
from acesync.tensor import LayerMeta, ModelParams, partition_blocks


def model_with(*lengths):
    metas, off = [], 0
    for depth, n in enumerate(lengths, start=1):
        metas.append(LayerMeta(f"L{depth}", depth, off, n, (n,)))
        off += n
    return ModelParams(np.zeros(off), tuple(metas))


@pytest.fixture
def index():
    return partition_blocks(model_with(4, 4), 2)  # 4 blocks of 2


def stats_with(ema, var_rows=None, T=16):
    ema = np.asarray(ema, dtype=float)
    s = GradStats.empty(ema.size, T)
    rows = np.zeros((1, ema.size)) if var_rows is None else np.asarray(var_rows, dtype=float)
    window = np.zeros((T, ema.size))
    window[:rows.shape[0]] = rows
    return GradStats(ema, window, rows.shape[0], s.rho)


class TestGradStats:
    def test_first_observation_sets_ema(self, index):
        s = update_grad_stats(GradStats.empty(4), np.ones(8), index)
        assert s.ema_mag.tolist() == [1.0] * 4 and s.rounds_seen == 1

    def test_ema_arithmetic(self, index):
        s = update_grad_stats(GradStats.empty(4, rho=0.9), np.ones(8), index)
        s = update_grad_stats(s, np.full(8, -2.0), index)
        assert s.ema_mag == pytest.approx([1.1] * 4, abs=1e-15)

    def test_block_mean_of_abs(self, index):
        s = update_grad_stats(GradStats.empty(4), np.array([1, -3, 0, 0, 2, 2, -1, 0.]), index)
        assert s.ema_mag.tolist() == [2.0, 0.0, 2.0, 0.5]

    def test_constant_window_zero_variance(self, index):
        s = GradStats.empty(4, T=16)
        for _ in range(20):
            s = update_grad_stats(s, np.full(8, 0.1), index)
        assert not s.variance().any()

    def test_window_eviction(self, index):
        s = GradStats.empty(4, T=3)
        for v in [1.0, 2.0, 3.0, 4.0, 5.0]:
            s = update_grad_stats(s, np.full(8, v), index)
        assert s.filled()[:, 0].tolist() == [3.0, 4.0, 5.0]
        assert s.variance()[0] == pytest.approx(np.var([3, 4, 5]))

    def test_single_sample_variance_is_zero(self, index):
        s = update_grad_stats(GradStats.empty(4), np.arange(8.0), index)
        assert not s.variance().any()

    def test_shape_mismatch(self, index):
        with pytest.raises(ShapeError):
            update_grad_stats(GradStats.empty(4), np.ones(7), index)


class TestTemporal:
    def test_zero_weights_half(self):
        s = stats_with([0.3, 5.0])
        assert temporal_attention(s, TemporalAttentionParams(0, 0)).tolist() == [0.5, 0.5]

    def test_closed_form(self):
        s = stats_with([math.log(3)])
        assert temporal_attention(s, TemporalAttentionParams(1, 0))[0] == pytest.approx(0.75, abs=1e-15)

    def test_monotone_in_magnitude(self):
        s = stats_with([0.1, 0.2, 0.4])
        out = temporal_attention(s, TemporalAttentionParams(2.0, 1.0))
        assert out[0] < out[1] < out[2]


class TestStructural:
    def test_single_layer_depth_score(self):
        idx = partition_blocks(model_with(8), 4)
        assert structural_attention(idx, 1).tolist() == [0.5 + 0.5 * 0.5] * 2

    def test_depth_endpoints(self):
        idx = partition_blocks(model_with(1, 1, 1), 1)
        # density 1/3 for each block
        out = structural_attention(idx, 3)
        assert out == pytest.approx([0.5 + 0.5 * 2 / 3, 0.25 + 0.5 * 2 / 3, 0.5 * 2 / 3])

    def test_whole_model_block(self):
        idx = partition_blocks(model_with(6), 6)
        assert structural_attention(idx, 1).tolist() == [0.5]

    def test_bounds(self):
        idx = partition_blocks(model_with(7, 3, 9), 2)
        out = structural_attention(idx, 3)
        assert np.all((out >= 0) & (out <= 1))


class TestFuse:
    def test_alpha_extremes(self):
        t, s = np.array([0.2, 0.9]), np.array([0.6, 0.1])
        assert fuse_importance(t, s, 1.0).scores.tolist() == t.tolist()
        assert fuse_importance(t, s, 0.0).scores.tolist() == s.tolist()

    def test_half(self):
        assert fuse_importance([0.8], [0.2], 0.5).scores[0] == pytest.approx(0.5)

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ConfigurationError):
            fuse_importance([0.5], [0.5], alpha)

    @given(st.floats(0.01, 5), st.floats(0.01, 5), st.floats(0.01, 1.0), st.floats(0, 1))
    def test_monotone_fused(self, m, dm, w1, alpha):
        struct = np.array([0.3, 0.3])
        temp = temporal_attention(stats_with([m, m + dm]), TemporalAttentionParams(w1, 1.0))
        fused = fuse_importance(temp, struct, alpha).scores
        assert fused[1] >= fused[0]
        assert np.all((fused >= 0) & (fused <= 1))


def brute_top(scores, k):
    # full sort oracle: python's stable sort on (-score, id)
    return sorted(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k])


class TestTopP:
    def test_example(self):
        sel = top_p_select(ImportanceScore(np.array([0.9, 0.1, 0.5, 0.7]), 0.5), 0.5)
        assert sel.block_ids == tuple(brute_top([0.9, 0.1, 0.5, 0.7], 2)) == (0, 3)

    def test_all_and_none(self):
        imp = ImportanceScore(np.array([0.3, 0.2, 0.1]), 0.5)
        assert top_p_select(imp, 1.0).block_ids == (0, 1, 2)
        assert top_p_select(imp, 0.0).block_ids == ()

    def test_ties_lower_id(self):
        assert top_p_select(ImportanceScore(np.full(4, 0.4), 0.5), 0.5).block_ids == (0, 1)

    def test_float_product_does_not_overshoot(self):
        assert len(top_p_select(ImportanceScore(np.arange(10.0), 0.5), 0.3)) == 3

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0, 1), st.floats(0.1, 10))
    @settings(max_examples=300)
    def test_cardinality_and_scale_invariance(self, scores, p, scale):
        scores = np.array(scores)
        sel = top_p_select(ImportanceScore(scores, 0.5), p)
        k = math.ceil(round(p * len(scores), 9))
        assert len(sel) == k == len(set(sel.block_ids))
        assert sel.block_ids == tuple(brute_top(scores.tolist(), k))
        assert top_p_select(ImportanceScore(scores * scale, 0.5), p).block_ids == sel.block_ids or \
            len(np.unique(scores)) != len(np.unique(scores * scale))


class TestCalibration:
    def test_fixed_point(self):
        s = stats_with([1.0, 1.0], var_rows=[[1, 1], [1, 1]])
        params = TemporalAttentionParams(0.0, 0.0)
        assert calibrate_attention(params, s) == params

    def test_zero_gradients(self):
        s = stats_with([0.0, 0.0], var_rows=[[0, 0], [0, 0]])
        params = TemporalAttentionParams(4.0, 1.0)
        assert calibrate_attention(params, s) == params

    def test_needs_two_window_entries(self):
        s = stats_with([1.0, 2.0])
        params = TemporalAttentionParams(4.0, 1.0)
        assert calibrate_attention(params, s) == params

    def test_iterated_recurrence_converges(self):
        s = stats_with([0.5, 1.5, 1.0], var_rows=[[0.4, 1.2, 1.0], [0.6, 1.8, 1.0]])
        params = TemporalAttentionParams(4.0, 1.0)

        def z_bar(pr):
            return float(np.mean(pr.w1 * s.ema_mag + pr.w2 * s.variance()))

        history = [abs(z_bar(params))]
        while history[-1] >= 0.1:
            params = calibrate_attention(params, s)
            history.append(abs(z_bar(params)))
            assert len(history) < 200
        assert all(b < a for a, b in zip(history, history[1:]))
        # the recurrence is z <- z * (1 - eta * m / (m + eps)); check one step directly
        m = s.ema_mag.mean()
        expected = (4.0 * m + s.variance().mean()) * (1 - 0.1 * m / (m + 1e-8))
        assert z_bar(calibrate_attention(TemporalAttentionParams(4.0, 1.0), s)) == pytest.approx(expected)
