import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg as scipy_linalg

from hvg.config import preset
from hvg.evaluation import (
    GaussianStats,
    VideoFeatureExtractor,
    activation_accounting,
    frechet_distance,
    generator_activation_elements,
    inception_score,
    psd_band_coverage,
    radial_power_spectrum,
    radial_psd,
    scaling_crossover,
    train_feature_extractor,
)


class TestFrechetDistance:
    def test_identical_stats_zero(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(64, 4))
        a = GaussianStats.from_features(f)
        assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)

    def test_mean_shift_closed_form(self):
        mu = np.array([1.0, -2.0, 0.5])
        a = GaussianStats(np.zeros(3), np.eye(3), 100)
        b = GaussianStats(mu, np.eye(3), 100)
        assert frechet_distance(a, b) == pytest.approx(float(mu @ mu), abs=1e-8)

    def test_diagonal_closed_form(self):
        # For commuting covariances: ||dmu||^2 + sum (sqrt(a_i) - sqrt(b_i))^2
        da = np.array([1.0, 4.0, 9.0])
        db = np.array([2.0, 2.0, 1.0])
        a = GaussianStats(np.zeros(3), np.diag(da), 100)
        b = GaussianStats(np.ones(3), np.diag(db), 100)
        expected = 3.0 + float(((np.sqrt(da) - np.sqrt(db)) ** 2).sum())
        assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-8)

    def test_matches_scipy_sqrtm_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            fa = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 4)) + rng.normal(size=4)
            fb = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 4))
            a = GaussianStats.from_features(fa)
            b = GaussianStats.from_features(fb)
            covmean = scipy_linalg.sqrtm(a.cov @ b.cov)
            if np.iscomplexobj(covmean):
                covmean = covmean.real
            diff = a.mean - b.mean
            oracle = float(
                diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(covmean)
            )
            assert frechet_distance(a, b) == pytest.approx(oracle, abs=1e-8)

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(2)
        a = GaussianStats.from_features(rng.normal(size=(50, 3)))
        b = GaussianStats.from_features(rng.normal(size=(50, 3)) * 2 + 1)
        d1, d2 = frechet_distance(a, b), frechet_distance(b, a)
        assert d1 >= 0 and d1 == pytest.approx(d2, rel=1e-6)

    def test_dim_mismatch(self):
        a = GaussianStats(np.zeros(3), np.eye(3), 10)
        b = GaussianStats(np.zeros(4), np.eye(4), 10)
        with pytest.raises(ValueError, match="mismatch"):
            frechet_distance(a, b)


class TestInceptionScore:
    def test_uniform_rows_one(self):
        p = np.full((10, 4), 0.25)
        assert inception_score(p) == pytest.approx(1.0, abs=1e-12)

    def test_one_hot_per_class_equals_c(self):
        assert inception_score(np.eye(4)) == pytest.approx(4.0, rel=1e-12)

    def test_mixed_rows_match_scalar_oracle(self):
        p = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]])
        m = p.mean(axis=0)
        kls = [sum(pi * (np.log(pi) - np.log(mi)) for pi, mi in zip(row, m)) for row in p]
        assert inception_score(p) == pytest.approx(float(np.exp(np.mean(kls))), rel=1e-10)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError, match="probability"):
            inception_score(np.array([[0.5, 0.6]]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(2, 20), st.integers(0, 10_000))
    def test_bounds(self, c, n, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(c) * rng.uniform(0.2, 3.0), size=n)
        score = inception_score(p)
        assert 1.0 - 1e-9 <= score <= c + 1e-9


class TestRadialPSD:
    def test_constant_frame_all_dc(self):
        spec = radial_power_spectrum(np.full((16, 16), 0.5))
        assert spec[0] == pytest.approx((0.5 * 256) ** 2, rel=1e-12)
        assert np.abs(spec[1:]).max() < 1e-12

    def test_pure_sinusoid_lands_in_its_bin(self):
        n = 32
        x = np.arange(n)
        for (u, v) in [(3, 0), (0, 5), (3, 4)]:
            frame = np.cos(2 * np.pi * (u * x[None, :] + v * x[:, None]) / n)
            spec = radial_power_spectrum(frame)
            r = int(np.floor(np.hypot(u, v) + 0.5))
            assert spec[r] == pytest.approx(spec.sum(), rel=1e-9)

    def test_energy_conservation(self):
        rng = np.random.default_rng(3)
        frame = rng.normal(size=(24, 24))
        spec = radial_power_spectrum(frame)
        total = (np.abs(np.fft.fft2(frame)) ** 2).sum()
        assert spec.sum() == pytest.approx(total, rel=1e-6)

    def test_white_noise_flat_within_bands(self):
        # For iid N(0, s^2) pixels, E|F(k)|^2 = N^2 s^2 at every frequency, so
        # each bin's expected sum is (lattice points in bin) * N^2 s^2, with
        # sampling std ~ N^2 s^2 sqrt(n_r / V) over V averaged frames.
        rng = np.random.default_rng(4)
        n, v_count = 16, 120
        videos = torch.from_numpy(rng.normal(size=(v_count, 2, 3, n, n)).astype(np.float32))
        curves = radial_psd(videos, [0], groups=3)[0]
        sigma2 = 1.0 / 3.0  # grayscale = mean of 3 unit-variance channels
        freqs = np.fft.fftfreq(n, d=1.0 / n)
        r = np.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)
        counts = np.bincount(np.floor(r + 0.5).astype(int).ravel())
        expect = counts * (n * n * sigma2)
        band = 3.0 * (n * n * sigma2) * np.sqrt(counts / v_count)
        inside = np.abs(curves["mean"][1:] - expect[1:]) <= band[1:]
        assert inside.all(), f"bins outside 3-sigma band: {np.where(~inside)}"

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            radial_power_spectrum(np.zeros((8, 4)))

    def test_band_coverage_helper(self):
        d = {0: {"bins": np.arange(4), "mean": np.ones(4), "std": np.full(4, 0.1)}}
        g = {0: {"bins": np.arange(4), "mean": np.array([1.0, 1.2, 2.0, 1.05]), "std": np.zeros(4)}}
        assert psd_band_coverage(d, g, 0) == pytest.approx(0.75)

    def test_frame_index_validation(self):
        videos = torch.zeros(6, 2, 3, 8, 8)
        with pytest.raises(ValueError, match="frame index"):
            radial_psd(videos, [5], groups=3)


class TestActivationAccounting:
    def test_level1_doubling_is_exact(self):
        exp = preset("desk3")
        a = generator_activation_elements(exp.hierarchy[0], 24)
        b = generator_activation_elements(exp.hierarchy[0], 48)
        assert b == 2 * a

    def test_level1_exactly_linear_zero_residual(self):
        exp = preset("desk3")
        f = lambda t: generator_activation_elements(exp.hierarchy[0], t)
        # two-point fit from T=24, 48 must predict T=96 with zero residual
        slope = (f(48) - f(24)) / 24
        intercept = f(24) - slope * 24
        assert f(96) == pytest.approx(slope * 96 + intercept, abs=0)

    def test_upsampler_constant_across_horizons(self):
        exp = preset("desk3")
        rows = activation_accounting(exp, [24, 48, 96])
        ups = [tuple(r["levels"][1:]) for r in rows]
        assert ups[0] == ups[1] == ups[2]

    def test_hierarchy_beats_end_to_end_at_96(self):
        exp = preset("desk3")
        rows = activation_accounting(exp, [96])
        assert rows[0]["ratio"] >= 2.0

    def test_ratio_monotone_in_t(self):
        exp = preset("desk3")
        rows = activation_accounting(exp, [24, 48, 96, 192])
        ratios = [r["ratio"] for r in rows]
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_crossover_reported(self):
        exp = preset("desk3")
        t = scaling_crossover(exp)
        assert t is not None
        row_before = activation_accounting(exp, [t - 4])[0] if t > 4 else None
        row_at = activation_accounting(exp, [t])[0]
        assert row_at["hierarchy_total"] < row_at["end_to_end"]
        if row_before is not None:
            assert row_before["hierarchy_total"] >= row_before["end_to_end"]

    def test_indivisible_t_rejected(self):
        exp = preset("desk3")
        with pytest.raises(ValueError, match="divisible"):
            activation_accounting(exp, [25])


class TestFeatureExtractor:
    def test_features_shapes_and_variable_length(self):
        torch.manual_seed(0)
        m = VideoFeatureExtractor(num_classes=4, input_hw=16)
        feat, logits = m.features(torch.randn(3, 8, 3, 16, 16))
        assert feat.shape == (3, 64) and logits.shape == (3, 4)
        feat2, _ = m.features(torch.randn(3, 16, 3, 16, 16))
        assert feat2.shape == (3, 64)

    def test_downsamples_larger_inputs(self):
        torch.manual_seed(1)
        m = VideoFeatureExtractor(num_classes=4, input_hw=16)
        _, logits = m.features(torch.randn(2, 4, 3, 32, 32))
        assert logits.shape == (2, 4)
        with pytest.raises(ValueError, match="reduce"):
            m.features(torch.randn(2, 4, 3, 24, 24))

    def test_trains_to_gate_on_synthetic_data(self, desk_dataset):
        from hvg.data import TrainingSampler

        exp = preset("desk2")
        sampler = TrainingSampler(desk_dataset, exp.pyramid_factors(), exp.data_reduce)
        model, acc = train_feature_extractor(
            sampler.pyramid.views[-1], sampler.labels, 4, seed=0, steps=800
        )
        assert acc > 0.95
