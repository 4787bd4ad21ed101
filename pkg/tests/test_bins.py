"""Bin-width normalization, bin centers, and depth reconstruction."""

import numpy as np
import pytest
import torch

from depthalign.bins import (
    BinPartition,
    BinProbabilityMap,
    DepthMap,
    DepthRange,
    bin_centers,
    combine,
    normalize_bin_widths,
)
from depthalign.errors import ValidationError


class TestNormalizeBinWidths:
    def test_all_zero_raw_gives_uniform(self):
        out = normalize_bin_widths(np.zeros(4), tau=0.1)
        np.testing.assert_allclose(out.numpy(), [0.25, 0.25, 0.25, 0.25])

    def test_two_bin_arithmetic(self):
        # (1 + 0.5) / 5 and (3 + 0.5) / 5
        out = normalize_bin_widths(np.array([1.0, 3.0]), tau=0.5)
        np.testing.assert_allclose(out.numpy(), [0.3, 0.7])

    def test_single_bin_is_always_one(self):
        out = normalize_bin_widths(np.array([5.0]), tau=0.001)
        np.testing.assert_allclose(out.numpy(), [1.0])

    def test_negative_raw_is_rectified_to_zero(self):
        out = normalize_bin_widths(np.array([-1.0, 1.0]), tau=1e-3)
        np.testing.assert_allclose(out.numpy(), [0.001 / 1.002, 1.001 / 1.002])

    def test_sums_to_one_and_positive_fuzz(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            n = int(rng.integers(1, 65))
            raw = rng.uniform(0.0, 100.0, size=n)
            out = normalize_bin_widths(raw, tau=float(rng.uniform(1e-4, 1.0))).numpy()
            assert np.all(out > 0)
            np.testing.assert_allclose(out.sum(), 1.0, atol=1e-9)

    def test_scaling_raw_and_tau_together_is_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(1_000):
            raw = rng.uniform(0.0, 10.0, size=int(rng.integers(2, 33)))
            tau = float(rng.uniform(1e-3, 1.0))
            k = float(rng.uniform(0.1, 50.0))
            base = normalize_bin_widths(raw, tau=tau).numpy()
            scaled = normalize_bin_widths(k * raw, tau=k * tau).numpy()
            np.testing.assert_allclose(scaled, base, rtol=1e-10)

    def test_batched_last_axis(self):
        raw = torch.tensor([[1.0, 3.0], [0.0, 0.0]])
        out = normalize_bin_widths(raw, tau=0.5)
        np.testing.assert_allclose(out.numpy(), [[0.3, 0.7], [0.5, 0.5]], rtol=1e-6)

    def test_gradients_flow(self):
        raw = torch.tensor([0.5, 2.0], requires_grad=True)
        normalize_bin_widths(raw).sum().backward()
        assert raw.grad is not None and torch.isfinite(raw.grad).all()

    @pytest.mark.parametrize("bad", [np.array([np.nan, 1.0]), np.array([np.inf, 1.0])])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValidationError):
            normalize_bin_widths(bad)

    @pytest.mark.parametrize("tau", [0.0, -1.0, np.nan])
    def test_bad_tau_rejected(self, tau):
        with pytest.raises(ValidationError):
            normalize_bin_widths(np.array([1.0, 2.0]), tau=tau)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            normalize_bin_widths(np.zeros(0))


class TestBinCenters:
    def test_single_bin_is_range_midpoint(self):
        out = bin_centers(np.array([1.0]), DepthRange(0.0, 10.0))
        np.testing.assert_allclose(out.numpy(), [5.0])

    def test_two_equal_bins(self):
        out = bin_centers(np.array([0.5, 0.5]), DepthRange(0.0, 10.0))
        np.testing.assert_allclose(out.numpy(), [2.5, 7.5])

    def test_three_unequal_bins(self):
        out = bin_centers(np.array([0.2, 0.3, 0.5]), DepthRange(0.0, 10.0))
        np.testing.assert_allclose(out.numpy(), [1.0, 3.5, 7.5])

    def test_nonzero_range_floor(self):
        # same widths shifted into [2, 12]: centers translate by 2
        out = bin_centers(np.array([0.2, 0.3, 0.5]), DepthRange(2.0, 12.0))
        np.testing.assert_allclose(out.numpy(), [3.0, 5.5, 9.5])

    def test_matches_brute_force_prefix_sum(self):
        rng = np.random.default_rng(2)
        for _ in range(2_000):
            n = int(rng.integers(1, 65))
            w = rng.uniform(0.05, 1.0, size=n)
            w = w / w.sum()
            lo = float(rng.uniform(0.0, 5.0))
            hi = lo + float(rng.uniform(0.5, 20.0))
            got = bin_centers(w, DepthRange(lo, hi)).numpy()
            expected = np.empty(n)
            left = 0.0
            for i in range(n):
                expected[i] = lo + (hi - lo) * (w[i] / 2 + left)
                left += w[i]
            np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_composition_with_normalize_stays_inside_range(self):
        rng = np.random.default_rng(3)
        r = DepthRange(0.1, 10.0)
        for _ in range(10_000):
            raw = rng.uniform(-2.0, 100.0, size=int(rng.integers(1, 65)))
            c = bin_centers(normalize_bin_widths(raw), r).numpy()
            assert np.all(np.diff(c) > 0)
            assert r.d_min < c[0] and c[-1] < r.d_max

    def test_unnormalized_widths_rejected(self):
        with pytest.raises(ValidationError):
            bin_centers(np.array([0.5, 0.6]), DepthRange(0.0, 10.0))

    def test_nonpositive_widths_rejected(self):
        with pytest.raises(ValidationError):
            bin_centers(np.array([1.0, 0.0]), DepthRange(0.0, 10.0))


class TestCombine:
    def test_one_hot_reproduces_center(self):
        n, k = 5, 3
        c = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        probs = np.zeros((n, 4, 6))
        probs[k] = 1.0
        out = combine(probs, c)
        np.testing.assert_allclose(out.numpy(), np.full((4, 6), c[k]))

    def test_uniform_two_bins(self):
        probs = np.full((2, 3, 3), 0.5)
        out = combine(probs, np.array([2.0, 4.0]))
        np.testing.assert_allclose(out.numpy(), np.full((3, 3), 3.0))

    def test_weighted_pixel(self):
        probs = np.array([0.25, 0.75]).reshape(2, 1, 1)
        out = combine(probs, np.array([2.0, 4.0]))
        np.testing.assert_allclose(out.numpy(), [[3.5]])

    def test_convex_combination_bounds_fuzz(self):
        rng = np.random.default_rng(4)
        for _ in range(2_000):
            n = int(rng.integers(1, 33))
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            p = rng.uniform(0.0, 1.0, size=(n, h, w))
            p = p / p.sum(axis=0, keepdims=True)
            c = np.sort(rng.uniform(0.1, 10.0, size=n))
            out = combine(p, c).numpy()
            assert np.all(out >= c.min() - 1e-9)
            assert np.all(out <= c.max() + 1e-9)

    def test_batched_probs(self):
        probs = torch.rand(2, 3, 4, 5)
        probs = probs / probs.sum(dim=1, keepdim=True)
        c = torch.tensor([1.0, 5.0, 9.0])
        out = combine(probs, c)
        assert out.shape == (2, 4, 5)
        single = combine(probs[1], c)
        np.testing.assert_allclose(out[1].numpy(), single.numpy(), rtol=1e-6)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            combine(np.full((3, 2, 2), 1 / 3), np.array([1.0, 2.0]))


class TestDomainTypes:
    def test_depth_range_validation(self):
        r = DepthRange(0.0, 10.0)
        assert r.span == 10.0
        for lo, hi in [(-1.0, 5.0), (5.0, 5.0), (6.0, 5.0), (0.0, np.inf)]:
            with pytest.raises(ValidationError):
                DepthRange(lo, hi)

    def test_depth_map_accepts_positive_finite(self):
        dm = DepthMap(np.full((2, 3), 1.5))
        assert dm.height == 2 and dm.width == 3
        assert dm.valid_mask.all()
        np.testing.assert_allclose(dm.valid_values(), 1.5)

    def test_depth_map_masked_values_unconstrained(self):
        values = np.array([[1.0, -7.0], [np.nan, 2.0]])
        mask = np.array([[True, False], [False, True]])
        dm = DepthMap(values, mask)
        np.testing.assert_allclose(np.sort(dm.valid_values()), [1.0, 2.0])

    @pytest.mark.parametrize(
        "values",
        [np.zeros((2, 2)), np.full((2, 2), -1.0), np.full((2, 2), np.nan), np.ones(4)],
    )
    def test_depth_map_rejects_invalid(self, values):
        with pytest.raises(ValidationError):
            DepthMap(values)

    def test_depth_map_tensor_round_trip(self):
        dm = DepthMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
        back = DepthMap.from_tensor(dm.to_tensor(torch.float64), dm.mask_tensor())
        np.testing.assert_allclose(back.values, dm.values)

    def test_bin_partition_from_widths(self):
        part = BinPartition.from_widths([0.2, 0.3, 0.5], DepthRange(0.0, 10.0))
        np.testing.assert_allclose(part.centers, [1.0, 3.5, 7.5])
        assert part.num_bins == 3

    def test_bin_partition_uniform(self):
        part = BinPartition.uniform(4, DepthRange(0.0, 8.0))
        np.testing.assert_allclose(part.centers, [1.0, 3.0, 5.0, 7.0])

    def test_bin_partition_rejects_bad_widths(self):
        r = DepthRange(0.0, 10.0)
        with pytest.raises(ValidationError):
            BinPartition(np.array([0.5, 0.6]), np.array([2.5, 7.5]), r)
        with pytest.raises(ValidationError):
            BinPartition(np.array([0.5, 0.5]), np.array([7.5, 2.5]), r)
        with pytest.raises(ValidationError):
            BinPartition(np.array([0.5, 0.5]), np.array([2.5, 10.5]), r)

    def test_probability_map_validation(self):
        good = np.full((2, 2, 4), 0.25)
        assert BinProbabilityMap(good).num_bins == 4
        with pytest.raises(ValidationError):
            BinProbabilityMap(np.full((2, 2, 4), 0.3))
        bad = good.copy()
        bad[0, 0] = [1.2, -0.2, 0.0, 0.0]
        with pytest.raises(ValidationError):
            BinProbabilityMap(bad)

    def test_probability_map_from_float32_softmax(self):
        torch.manual_seed(0)
        logits = torch.randn(8, 5, 7)
        pm = BinProbabilityMap.from_tensor(torch.softmax(logits, dim=0))
        assert pm.probs.shape == (5, 7, 8)
        np.testing.assert_allclose(pm.probs.sum(axis=-1), 1.0, atol=1e-12)
