"""Feature metrics and the spectral suite, against direct oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dft2_direct
from ueforge import diagnostics as dg
from ueforge.autodiff import Tensor
from ueforge.errors import DimensionError, InputError
from ueforge.model import STAGE_NAMES, StagedNet


@pytest.fixture
def net():
    return StagedNet(seed=0)


@pytest.fixture
def batch(rng):
    return rng.uniform(0.1, 0.9, (4, 1, 16, 16))


class TestCosineSimilarity:
    def test_zero_delta_gives_exact_one(self, net, batch):
        curve = dg.cosine_similarity(net, batch, np.zeros_like(batch))
        assert curve.stages == STAGE_NAMES
        for value in curve.values:
            assert value == pytest.approx(1.0, abs=1e-12)
        assert not any(curve.degenerate)

    def test_hand_vectors(self):
        # cos([1,0],[1,1]) = 1/sqrt(2)
        assert dg.vector_cosine([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1.0 / math.sqrt(2.0))

    def test_opposite_vectors(self):
        assert dg.vector_cosine([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0)

    def test_zero_vector_degenerate(self):
        assert dg.vector_cosine([0.0, 0.0], [1.0, 1.0]) == 0.0

    def test_values_bounded(self, net, batch, rng):
        delta = rng.uniform(-0.3, 0.3, batch.shape)
        curve = dg.cosine_similarity(net, batch, delta)
        for value in curve.values:
            assert -1.0 - 1e-12 <= value <= 1.0 + 1e-12

    def test_shape_mismatch_rejected(self, net, batch):
        with pytest.raises(DimensionError):
            dg.cosine_similarity(net, batch, np.zeros((4, 1, 8, 8)))

    def test_accepts_tensors(self, net, batch):
        curve = dg.cosine_similarity(net, Tensor(batch), Tensor(np.zeros_like(batch)))
        assert curve["S1"] == pytest.approx(1.0, abs=1e-12)


class TestPtr:
    def test_zero_delta_gives_zero(self, net, batch):
        for stage in STAGE_NAMES:
            assert dg.ptr(net, batch, np.zeros_like(batch), stage) == 0.0

    def test_identity_example(self):
        # identity features: x=[3,4], x+delta=[3,9] -> ||[0,5]||/||[3,4]|| = 1
        assert dg.vector_ptr([3.0, 4.0], [3.0, 9.0]) == pytest.approx(1.0)

    def test_zero_clean_feature_is_inf(self):
        assert math.isinf(dg.vector_ptr([0.0, 0.0], [1.0, 0.0]))

    def test_unknown_stage_rejected(self, net, batch):
        with pytest.raises(InputError):
            dg.ptr(net, batch, np.zeros_like(batch), "S9")

    def test_homogeneity_on_linear_tap(self, rng):
        """On a bias-free conv tap with no activation, ptr(ax, ad) = ptr(x, d)."""
        k = rng.normal(0.0, 0.5, (3, 1, 3, 3))

        def tap(z):
            from conftest import conv2d_loops
            return conv2d_loops(z, k, 1, 1)

        x = rng.uniform(0.2, 0.8, (2, 1, 8, 8))
        delta = rng.uniform(-0.1, 0.1, x.shape)
        base = dg.vector_ptr(tap(x), tap(x + delta))
        for a in (2.0, 7.5):
            scaled = dg.vector_ptr(tap(a * x), tap(a * (x + delta)))
            assert scaled == pytest.approx(base, rel=1e-9)


class TestFeatureResidual:
    def test_zero_delta_zero_residual(self, net, batch):
        res = dg.feature_residual(net, batch, np.zeros_like(batch), "S1")
        assert res.shape == (4, 8, 16, 16)
        np.testing.assert_array_equal(res, 0.0)

    def test_residual_norm_matches_ptr_identity(self, net, batch, rng):
        # ||residual||_2 at a stage equals ptr * ||clean feature||_2 per example
        delta = rng.uniform(-0.05, 0.05, batch.shape)
        one = batch[:1]
        d_one = delta[:1]
        res = dg.feature_residual(net, one, d_one, "S1")
        from ueforge.autodiff import no_grad
        from ueforge.model import forward
        with no_grad():
            _, taps = forward(net, Tensor(one), capture=True)
        clean_norm = np.linalg.norm(taps["S1"].data)
        p = dg.ptr(net, one, d_one, "S1")
        assert np.linalg.norm(res) == pytest.approx(p * clean_norm, rel=1e-12)

    def test_linearity_on_conv_only_net(self, rng):
        """Residual equals the delta's own contribution when the map is linear."""
        from conftest import conv2d_loops
        k = rng.normal(0.0, 0.5, (2, 1, 3, 3))
        x = rng.uniform(0.0, 1.0, (1, 1, 8, 8))
        delta = rng.uniform(-0.1, 0.1, x.shape)
        residual = conv2d_loops(x + delta, k, 1, 1) - conv2d_loops(x, k, 1, 1)
        np.testing.assert_allclose(residual, conv2d_loops(delta, k, 1, 1),
                                   rtol=1e-9, atol=1e-12)


class TestPowerSpectrum:
    def test_constant_image_dc_only(self):
        c = 0.7
        z = np.full((4, 4), c)
        p = dg.power_spectrum_2d(z)
        assert p[0, 0] == pytest.approx((c * 16.0) ** 2, rel=1e-12)
        off_dc = p.copy()
        off_dc[0, 0] = 0.0
        assert np.abs(off_dc).max() <= 1e-9

    def test_cosine_concentrates_at_u0(self):
        w = 16
        u0 = 3
        x = np.arange(w)
        z = np.tile(np.cos(2.0 * np.pi * u0 * x / w), (w, 1))
        p = dg.power_spectrum_2d(z)
        mask = np.zeros_like(p, dtype=bool)
        mask[0, u0] = mask[0, w - u0] = True
        assert p[mask].min() > 1e3
        assert np.abs(p[~mask]).max() < 1e-16 * p[mask].max() + 1e-9

    @pytest.mark.parametrize("size", [8, 16])
    def test_matches_direct_dft(self, size, rng):
        z = rng.normal(0.0, 1.0, (size, size))
        fast = dg.power_spectrum_2d(z)
        direct = np.abs(dft2_direct(z)) ** 2
        np.testing.assert_allclose(fast, direct, rtol=1e-8, atol=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([4, 8, 16, 32]))
    def test_parseval(self, seed, size):
        z = np.random.default_rng(seed).normal(0.0, 1.0, (size, size))
        total_power = dg.power_spectrum_2d(z).sum()
        want = size * size * (z ** 2).sum()
        assert total_power == pytest.approx(want, rel=1e-8)

    def test_channel_mean_rule(self, rng):
        z = rng.normal(0.0, 1.0, (3, 8, 8))
        np.testing.assert_allclose(dg.power_spectrum_2d(z),
                                   dg.power_spectrum_2d(z.mean(axis=0)), rtol=1e-12)

    def test_too_small_rejected(self):
        with pytest.raises(InputError):
            dg.power_spectrum_2d(np.zeros((1, 5)))

    def test_mean_power_spectrum_averages(self, rng):
        batch = rng.normal(0.0, 1.0, (3, 1, 8, 8))
        got = dg.mean_power_spectrum(batch)
        want = np.mean([dg.power_spectrum_2d(b) for b in batch], axis=0)
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestRadialPsd:
    def test_bin_count_rule(self):
        for h, w in [(8, 8), (16, 16), (16, 24), (9, 9)]:
            profile = dg.radial_psd(np.random.default_rng(0).normal(size=(h, w)))
            assert len(profile) == min(h, w) // 2 + 1

    def test_constant_image_all_energy_in_dc_bin(self):
        profile = dg.radial_psd(np.full((16, 16), 0.3))
        assert profile.power[0] > 0.0
        np.testing.assert_allclose(profile.power[1:], 0.0, atol=1e-18)

    def test_sinusoid_peak_bin(self):
        w = 16
        x = np.arange(w)
        for u0 in (2, 3, 5, 7):
            z = np.tile(np.cos(2.0 * np.pi * u0 * x / w), (w, 1))
            assert dg.radial_psd(z).peak_bin() == u0

    def test_partition_covers_every_entry(self):
        profile = dg.radial_psd(np.random.default_rng(1).normal(size=(16, 16)))
        assert int(profile.counts.sum()) == 16 * 16

    def test_binning_input_independent(self, rng):
        a = dg.radial_psd(rng.normal(size=(12, 12)))
        b = dg.radial_psd(rng.normal(size=(12, 12)))
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_nonnegative_power(self, rng):
        profile = dg.radial_psd(rng.normal(size=(16, 16)))
        assert (profile.power >= 0.0).all()

    def test_white_noise_flat_midband(self):
        """Ring means of white noise stay within +-10% of their grand mean."""
        r = np.random.default_rng(1234)
        acc = np.zeros((64, 64))
        for _ in range(256):
            acc += dg.power_spectrum_2d(r.normal(0.0, 1.0, (64, 64)))
        profile = dg.radial_profile(acc / 256.0)
        mid = profile.power[2:25]
        grand = mid.mean()
        assert np.abs(mid - grand).max() <= 0.10 * grand


class TestRelativeSpectralDensity:
    def test_equal_profiles_zero(self):
        p = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(dg.relative_spectral_density(p, p), 0.0)

    def test_double_is_plus_one(self):
        p = np.array([1.0, 2.0, 4.0])
        np.testing.assert_array_equal(dg.relative_spectral_density(2.0 * p, p), 1.0)

    def test_quarter_is_minus_two(self):
        p = np.array([1.0, 2.0, 4.0])
        np.testing.assert_array_equal(dg.relative_spectral_density(0.25 * p, p), -2.0)

    def test_trivial_cases_exact_to_1e12(self):
        p = np.linspace(0.5, 9.5, 9)
        for factor, want in [(1.0, 0.0), (2.0, 1.0), (0.25, -2.0)]:
            r = dg.relative_spectral_density(factor * p, p)
            assert np.abs(r - want).max() <= 1e-12

    def test_zero_bins_masked_nan(self):
        pd = np.array([1.0, 0.0, 2.0])
        px = np.array([1.0, 1.0, 0.0])
        r = dg.relative_spectral_density(pd, px)
        assert r[0] == 0.0
        assert math.isnan(r[1]) and math.isnan(r[2])

    def test_bin_count_mismatch_rejected(self):
        with pytest.raises(InputError):
            dg.relative_spectral_density(np.ones(5), np.ones(6))

    def test_accepts_profile_objects(self, rng):
        z = rng.normal(size=(16, 16))
        p = dg.radial_psd(z)
        r = dg.relative_spectral_density(p, p)
        finite = r[np.isfinite(r)]
        np.testing.assert_array_equal(finite, 0.0)


class TestMetricCsv:
    def test_header_and_rows(self, tmp_path):
        rows = dg.metric_rows("abc123", "cossim", [("S1", 0.95), ("S2", 0.5)])
        path = str(tmp_path / "m.csv")
        dg.write_metric_rows(path, rows)
        lines = open(path).read().splitlines()
        assert lines[0] == "run_id,metric,stage_or_bin,value"
        assert lines[1].startswith("abc123,cossim,S1,")

    def test_nan_and_inf_rendering(self):
        rows = dg.metric_rows("x", "rsd", [(0, float("nan")), (1, float("inf"))])
        assert rows[0][3] == "nan"
        assert rows[1][3] == "inf"
