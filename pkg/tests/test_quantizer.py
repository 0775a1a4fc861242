"""Seed quantization, one-bit upscaling and full any-precision builds."""

import logging

import numpy as np
import pytest

from anyprec import (
    ChannelQuantization,
    ParameterError,
    SensitivityMap,
    ShapeError,
    build_any_precision,
    estimate_sensitivity_diag,
    quantize_seed,
    upscale,
)

from helpers import float_sse


def channel_sse(cq, row, sens):
    return float_sse(row, sens, cq.codes, cq.centroids)


class TestQuantizeSeed:
    def test_sign_pattern_collapses_to_two_centroids(self):
        w = np.array([[-1.0, -1.0, 1.0, 1.0]])
        cqs = quantize_seed(w, None, 2)
        cq = cqs[0]
        assert set(np.round(cq.centroids, 12).tolist()) == {-1.0, 1.0}
        assert channel_sse(cq, w[0], np.ones(4)) == 0.0

    def test_eight_distinct_values_at_three_bits_is_lossless(self):
        rng = np.random.default_rng(0)
        row = rng.permutation(np.linspace(-1, 1, 8))
        cq = quantize_seed(row[None, :], None, 3)[0]
        assert channel_sse(cq, row, np.ones(8)) == 0.0
        # codes are the rank order of the values
        assert np.array_equal(cq.codes, np.argsort(np.argsort(row)))

    def test_matches_single_channel_kmeans(self):
        from anyprec import kmeans_1d_weighted

        rng = np.random.default_rng(1)
        w = rng.normal(size=(6, 64))
        s = rng.uniform(0.1, 1.0, size=(6, 64))
        cqs = quantize_seed(w, SensitivityMap(s), 2)
        for r, cq in enumerate(cqs):
            ref = kmeans_1d_weighted(w[r], s[r], 4)
            assert float_sse(w[r], s[r], cq.codes, cq.centroids) == pytest.approx(
                float_sse(w[r], s[r], ref.assignments, ref.centroids), rel=1e-12, abs=1e-15
            )

    def test_zero_sensitivity_channel_falls_back_to_uniform(self, caplog):
        w = np.array([[0.0, 1.0, 2.0, 3.0], [4.0, 5.0, 6.0, 7.0]])
        s = np.array([[1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]])
        with caplog.at_level(logging.WARNING):
            cqs = quantize_seed(w, s, 2)
        assert "zero-sensitivity" in caplog.text
        assert channel_sse(cqs[1], w[1], np.ones(4)) == 0.0

    def test_fewer_values_than_clusters_pads(self):
        cqs = quantize_seed(np.array([[1.0], [2.0]]), None, 2)
        for cq, val in zip(cqs, (1.0, 2.0)):
            assert np.array_equal(cq.centroids, [val] * 4)
            assert cq.codes.tolist() == [0]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            quantize_seed(np.ones((2, 4)), np.ones((2, 5)), 2)

    def test_bad_bit_width_rejected(self):
        with pytest.raises(ParameterError):
            quantize_seed(np.ones((1, 4)), None, 1)


class TestUpscale:
    def test_identical_members_duplicate_centroid(self):
        cq = ChannelQuantization(2, np.array([0, 0, 3, 3]), np.array([2.0, 2.0, 2.0, 9.0]))
        row = np.array([2.0, 2.0, 9.0, 9.0])
        up = upscale(cq, row, np.ones(4))
        assert up.centroids[0] == up.centroids[1] == 2.0
        assert np.array_equal(up.codes[:2], [0, 0])
        assert channel_sse(up, row, np.ones(4)) == 0.0

    def test_three_member_cluster_splits_optimally(self):
        # members [0, 0, 3] with parent centroid 1: the optimal threshold
        # separates {0, 0} from {3}, dropping the SSE from 6 to 0.
        cq = ChannelQuantization(2, np.array([0, 0, 0, 1]), np.array([1.0, 50.0, 50.0, 50.0]))
        row = np.array([0.0, 0.0, 3.0, 50.0])
        sens = np.ones(4)
        assert channel_sse(cq, row, sens) == 6.0
        up = upscale(cq, row, sens)
        assert up.centroids[0] == 0.0
        assert up.centroids[1] == 3.0
        assert np.array_equal(up.codes[:3], [0, 0, 1])
        assert channel_sse(up, row, sens) == 0.0

    def test_singleton_cluster_keeps_even_code(self):
        cq = ChannelQuantization(2, np.array([0, 1, 2]), np.array([0.0, 5.0, 9.0, 9.0]))
        row = np.array([0.0, 5.0, 9.0])
        up = upscale(cq, row, np.ones(3))
        assert np.array_equal(up.codes, [0, 2, 4])  # every member in sub-cluster 2b
        for b, val in enumerate(row):
            assert up.centroids[2 * b] == val
            assert up.centroids[2 * b + 1] == val

    def test_weighted_pair_splits_into_singletons(self):
        cq = ChannelQuantization(2, np.array([0, 0]), np.array([1.0, 4.0, 4.0, 4.0]))
        row = np.array([0.0, 4.0])
        up = upscale(cq, row, np.array([3.0, 1.0]))
        assert up.centroids[0] == 0.0 and up.centroids[1] == 4.0
        assert np.array_equal(up.codes, [0, 1])

    def test_prefix_property_and_empty_cluster_duplication(self):
        rng = np.random.default_rng(4)
        row = rng.normal(size=100)
        sens = rng.uniform(0.1, 1.0, size=100)
        cq = quantize_seed(row[None, :], sens[None, :], 2)[0]
        up = upscale(cq, row, sens)
        assert up.bit_width == 3
        assert np.array_equal(up.codes >> 1, cq.codes)
        assert np.all(np.diff(up.centroids) >= 0)

    def test_parent_centroid_is_weighted_mean_of_children(self):
        rng = np.random.default_rng(8)
        row = rng.normal(size=200)
        sens = rng.uniform(0.05, 2.0, size=200)
        cq = quantize_seed(row[None, :], sens[None, :], 3)[0]
        up = upscale(cq, row, sens)
        for b in range(8):
            members_lo = up.codes == 2 * b
            members_hi = up.codes == 2 * b + 1
            w_lo, w_hi = sens[members_lo].sum(), sens[members_hi].sum()
            if w_lo + w_hi == 0:
                continue
            combined = (w_lo * up.centroids[2 * b] + w_hi * up.centroids[2 * b + 1]) / (
                w_lo + w_hi
            )
            assert combined == pytest.approx(cq.centroids[b], rel=1e-9)

    def test_sse_never_increases(self):
        rng = np.random.default_rng(9)
        row = rng.normal(size=150)
        sens = rng.uniform(0.1, 1.0, size=150)
        cq = quantize_seed(row[None, :], sens[None, :], 2)[0]
        prev = channel_sse(cq, row, sens)
        for _ in range(4):
            cq = upscale(cq, row, sens)
            cur = channel_sse(cq, row, sens)
            assert cur <= prev
            prev = cur

    def test_general_path_matches_interval_path(self):
        # Shuffling the code labels breaks value-contiguity, forcing the
        # per-cluster fallback; the refined SSE must match either way.
        rng = np.random.default_rng(10)
        row = rng.normal(size=80)
        sens = rng.uniform(0.1, 1.0, size=80)
        cq = quantize_seed(row[None, :], sens[None, :], 2)[0]
        up_fast = upscale(cq, row, sens)

        perm = np.array([2, 0, 3, 1])
        shuffled = ChannelQuantization(2, perm[cq.codes], cq.centroids[np.argsort(perm)])
        # not value-contiguous: exercises _upscale_general
        up_general = upscale(shuffled, row, sens)
        assert channel_sse(up_general, row, sens) == pytest.approx(
            channel_sse(up_fast, row, sens), rel=1e-12
        )

    def test_length_mismatch_rejected(self):
        cq = ChannelQuantization(2, np.array([0, 1]), np.array([0.0, 1.0, 1.0, 1.0]))
        with pytest.raises(ShapeError):
            upscale(cq, np.ones(3), np.ones(3))


class TestBuildAnyPrecision:
    def test_single_level_build_equals_seed(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(4, 32))
        s = rng.uniform(0.1, 1.0, size=(4, 32))
        layer = build_any_precision(w, s, 3, 3)
        cqs = quantize_seed(w, s, 3)
        for r in range(4):
            assert np.array_equal(layer.codes[r], cqs[r].codes)

    def test_prefix_property_all_levels(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(4, 8))
        s = rng.uniform(0.1, 1.0, size=(4, 8))
        layer = build_any_precision(w, s, 2, 4, record_levels=True)
        for k in range(2, 4):
            assert np.array_equal(layer.level_codes[k], layer.level_codes[k + 1] >> 1)
            assert np.array_equal(layer.level_codes[k], layer.codes >> (4 - k))

    def test_build_matches_repeated_upscale(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(3, 60))
        s = rng.uniform(0.1, 1.0, size=(3, 60))
        layer = build_any_precision(w, s, 2, 5)
        for r in range(3):
            cq = quantize_seed(w[r][None, :], s[r][None, :], 2)[0]
            for _ in range(3):
                cq = upscale(cq, w[r], s[r])
            assert np.array_equal(layer.codes[r], cq.codes)
            assert np.allclose(
                layer.centroid_tables[5][r].astype(np.float64),
                cq.centroids.astype(np.float16).astype(np.float64),
            )

    def test_sse_monotone_and_tables_sorted(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(8, 96))
        s = rng.uniform(0.05, 1.0, size=(8, 96))
        layer = build_any_precision(w, s, 2, 6)
        for k in range(2, 6):
            assert np.all(layer.channel_sse[k + 1] <= layer.channel_sse[k])
        for k in range(2, 7):
            t = layer.centroid_tables[k].astype(np.float64)
            assert np.all(np.diff(t, axis=1) >= 0)

    def test_row_blocks_and_threads_do_not_change_results(self):
        rng = np.random.default_rng(15)
        w = rng.normal(size=(10, 40))
        s = rng.uniform(0.1, 1.0, size=(10, 40))
        base = build_any_precision(w, s, 2, 4)
        blocked = build_any_precision(w, s, 2, 4, row_block=3)
        threaded = build_any_precision(w, s, 2, 4, row_block=3, threads=4)
        assert np.array_equal(base.codes, blocked.codes)
        assert np.array_equal(base.codes, threaded.codes)
        for k in range(2, 5):
            assert np.array_equal(base.centroid_tables[k], blocked.centroid_tables[k])
            assert np.array_equal(base.centroid_tables[k], threaded.centroid_tables[k])

    def test_deterministic(self):
        rng = np.random.default_rng(16)
        w = rng.normal(size=(5, 30))
        s = rng.uniform(0.1, 1.0, size=(5, 30))
        a = build_any_precision(w, s, 2, 5)
        b = build_any_precision(w.copy(), s.copy(), 2, 5)
        assert np.array_equal(a.codes, b.codes)
        for k in range(2, 6):
            assert np.array_equal(a.centroid_tables[k], b.centroid_tables[k])

    def test_bad_bit_range_rejected(self):
        with pytest.raises(ParameterError):
            build_any_precision(np.ones((1, 4)), None, 4, 3)
        with pytest.raises(ParameterError):
            build_any_precision(np.ones((1, 4)), None, 2, 9)


class TestContinueUpscale:
    def test_matches_direct_build_with_sensitivities(self):
        from anyprec import continue_upscale

        rng = np.random.default_rng(30)
        w = rng.normal(size=(5, 70))
        s = rng.uniform(0.1, 1.0, size=(5, 70))
        low = build_any_precision(w, s, 2, 4)
        extended = continue_upscale(w, s, low, 7)
        direct = build_any_precision(w, s, 2, 7)
        assert np.array_equal(extended.codes, direct.codes)
        for k in range(2, 8):
            assert np.array_equal(extended.centroid_tables[k], direct.centroid_tables[k])
        for k in range(2, 8):
            assert np.allclose(extended.channel_sse[k], direct.channel_sse[k], rtol=1e-12)

    def test_rejects_non_increasing_target(self):
        from anyprec import continue_upscale

        rng = np.random.default_rng(31)
        w = rng.normal(size=(2, 16))
        layer = build_any_precision(w, None, 2, 4)
        with pytest.raises(ParameterError):
            continue_upscale(w, None, layer, 4)
        with pytest.raises(ShapeError):
            continue_upscale(np.ones((2, 8)), None, layer, 6)


class TestEstimateSensitivity:
    def test_mean_of_squares(self):
        est = estimate_sensitivity_diag([np.array([[2.0]]), np.array([[4.0]])])
        assert est.values.tolist() == [[10.0]]
        assert not est.fallback

    def test_all_zero_sample_falls_back_uniform(self):
        est = estimate_sensitivity_diag([np.zeros((2, 3))])
        assert est.fallback
        assert np.array_equal(est.values, np.ones((2, 3)))

    def test_empty_list_with_shape_falls_back(self):
        est = estimate_sensitivity_diag([], shape=(2, 2))
        assert est.fallback
        assert np.array_equal(est.values, np.ones((2, 2)))

    def test_empty_list_without_shape_rejected(self):
        with pytest.raises(ParameterError):
            estimate_sensitivity_diag([])

    def test_matches_brute_force_mean(self):
        rng = np.random.default_rng(17)
        samples = [rng.normal(size=(3, 5)) for _ in range(7)]
        est = estimate_sensitivity_diag(samples)
        want = np.mean([g * g for g in samples], axis=0)
        assert np.allclose(est.values, want, rtol=1e-12)

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ShapeError):
            estimate_sensitivity_diag([np.ones((2, 2)), np.ones((2, 3))])
