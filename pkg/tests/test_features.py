import math
import os
import sys
import tempfile
import time
import unittest

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from bands import BandId, SPECTRAL_BANDS
from features import (
    FeatureImputer, HarmonicFitError, MONTH_T, amplitude_phase, build_vector, design_matrix,
    feature_matrix, feature_names, fit_harmonic, harmonic_features, read_feature_matrix,
    seasonal_medians, write_feature_matrix,
)
from models import PixelTimeSeries


def make_series(spectral, plot_id="P1"):
    return PixelTimeSeries(plot_id=plot_id, spectral=spectral, climate=np.full((12, 2), 280.0),
                           dw=np.ones(12, dtype=np.int64), lat=52.0, lon=5.0)


def harmonic_signal(beta, t=MONTH_T):
    return design_matrix(t) @ np.asarray(beta, dtype=np.float64)


class TestHarmonicFit(unittest.TestCase):
    def test_recovers_coefficients(self):
        fit = fit_harmonic(harmonic_signal([0.5, 0.01, 0.3, -0.2]), BandId.NDVI)
        np.testing.assert_allclose([fit.beta0, fit.beta1, fit.beta2, fit.beta3], [0.5, 0.01, 0.3, -0.2],
                                   atol=1e-9)
        self.assertLessEqual(fit.rmse, 1e-9)
        self.assertEqual(fit.n_points, 12)

    def test_random_recovery_against_normal_equations(self):
        rng = np.random.default_rng(0)
        design = design_matrix(MONTH_T)
        start = time.perf_counter()
        for _ in range(1000):
            beta = rng.normal(0.0, 1.0, 4)
            fit = fit_harmonic(design @ beta, BandId.B4)
            got = np.array([fit.beta0, fit.beta1, fit.beta2, fit.beta3])
            np.testing.assert_allclose(got, beta, atol=1e-9)
            self.assertLessEqual(fit.rmse, 1e-9)
        self.assertLess(time.perf_counter() - start, 5.0)

    def test_residual_orthogonal_to_design(self):
        rng = np.random.default_rng(1)
        design = design_matrix(MONTH_T)
        for _ in range(50):
            y = rng.normal(0.0, 1.0, 12)
            fit = fit_harmonic(y, BandId.VV)
            beta = np.array([fit.beta0, fit.beta1, fit.beta2, fit.beta3])
            oracle = np.linalg.solve(design.T @ design, design.T @ y)
            np.testing.assert_allclose(beta, oracle, atol=1e-9)
            residual = y - design @ beta
            np.testing.assert_allclose(design.T @ residual, 0.0, atol=1e-8)

    def test_constant_signal(self):
        fit = fit_harmonic(np.full(12, 0.42), BandId.NDVI)
        np.testing.assert_allclose([fit.beta0, fit.beta1, fit.beta2, fit.beta3], [0.42, 0, 0, 0], atol=1e-12)
        self.assertLess(fit.rmse, 1e-12)

    def test_adding_constant_shifts_only_intercept(self):
        y = np.random.default_rng(2).normal(0.0, 1.0, 12)
        a = fit_harmonic(y, BandId.B8)
        b = fit_harmonic(y + 3.0, BandId.B8)
        self.assertAlmostEqual(b.beta0 - a.beta0, 3.0, places=9)
        for name in ("beta1", "beta2", "beta3", "rmse"):
            self.assertAlmostEqual(getattr(a, name), getattr(b, name), places=9)

    def test_amplitude_and_phase(self):
        self.assertAlmostEqual(amplitude_phase(3.0, 4.0)[0], 5.0)
        self.assertAlmostEqual(amplitude_phase(0.0, 1.0)[1], math.pi / 2)
        self.assertEqual(amplitude_phase(-1.0, -0.0)[1], math.pi)

    def test_circular_shift_moves_phase(self):
        y = harmonic_signal([0.0, 0.0, 0.6, 0.25])
        base = fit_harmonic(y, BandId.NDVI)
        for k in range(1, 12):
            shifted = fit_harmonic(np.roll(y, -k), BandId.NDVI)
            self.assertAlmostEqual(shifted.amplitude, base.amplitude, delta=1e-9)
            diff = base.phase - shifted.phase - 2 * math.pi * k / 12
            self.assertAlmostEqual(math.cos(diff), 1.0, delta=1e-9)
            self.assertAlmostEqual(math.sin(diff), 0.0, delta=1e-9)

    def test_missing_months_use_actual_times(self):
        y = harmonic_signal([0.3, 0.1, -0.2, 0.4])
        y[[1, 4, 9]] = np.nan
        fit = fit_harmonic(y, BandId.NDVI)
        self.assertEqual(fit.n_points, 9)
        self.assertAlmostEqual(fit.beta2, -0.2, places=9)

    def test_too_few_months(self):
        y = np.full(12, np.nan)
        y[[0, 1, 2]] = [0.1, 0.2, 0.3]
        with self.assertRaises(HarmonicFitError) as ctx:
            fit_harmonic(y, BandId.B11)
        self.assertEqual(ctx.exception.n_points, 3)

    def test_iterative_matches_closed_form(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            y = harmonic_signal(rng.normal(0.0, 1.0, 4)) + rng.normal(0.0, 0.1, 12)
            a = fit_harmonic(y, BandId.NDVI).params()
            b = fit_harmonic(y, BandId.NDVI, iterative=True).params()
            np.testing.assert_allclose(a, b, atol=1e-6)


class TestHandcraftedVectors(unittest.TestCase):
    def random_series(self, seed=0, plot_id="P1"):
        return make_series(np.random.default_rng(seed).uniform(0.0, 1.0, (12, 19)), plot_id)

    def test_feature_counts(self):
        self.assertEqual(len(feature_names("s1s2", "all")), 209)
        self.assertEqual(len(feature_names("s1s2", "seasonal")), 76)
        self.assertEqual(len(feature_names("s1s2", "harmonic")), 133)
        self.assertEqual(len(feature_names("s1", "all")), 22)
        self.assertEqual(len(feature_names("s2", "seasonal")), 68)
        self.assertEqual(len(feature_names("s1", "harmonic")), 14)

    def test_names_are_band_feature_pairs(self):
        names = feature_names("s1", "all")
        self.assertEqual(names[:4], ["VV_winter", "VV_spring", "VV_summer", "VV_autumn"])
        self.assertEqual(names[8], "VV_beta0")
        self.assertEqual(names[-1], "VH_rmse")

    def test_seasonal_medians(self):
        spectral = np.full((12, 19), 0.5)
        spectral[[0, 1, 11], 0] = [0.2, 0.4, 0.9]
        medians = seasonal_medians(make_series(spectral)).reshape(19, 4)
        self.assertAlmostEqual(medians[0, 0], 0.4)
        np.testing.assert_allclose(medians[1:], 0.5)

    def test_build_vector_matches_parts(self):
        series = self.random_series()
        vector = build_vector(series, "s1s2", "all")
        self.assertEqual(len(vector.values), 209)
        np.testing.assert_allclose(vector.values[:76], seasonal_medians(series))
        np.testing.assert_allclose(vector.values[76:], harmonic_features(series)[0], atol=1e-12)
        self.assertEqual(vector.missing, [])

    def test_batch_matches_single_pixel(self):
        series = [self.random_series(seed, f"P{seed}") for seed in range(5)]
        gappy = series[2].spectral.copy()
        gappy[[3, 4], :] = np.nan
        series[2] = series[2].copy_with(spectral=gappy)
        matrix, names = feature_matrix(series, "s2", "all")
        self.assertEqual(matrix.shape, (5, 17 * 11))
        for i, s in enumerate(series):
            np.testing.assert_allclose(matrix[i], build_vector(s, "s2", "all").values, atol=1e-10)

    def test_unfittable_band_leaves_nan(self):
        spectral = np.random.default_rng(4).uniform(0.0, 1.0, (12, 19))
        spectral[3:, 2:] = np.nan
        matrix, _ = feature_matrix([make_series(spectral)], "s1s2", "harmonic")
        block = matrix.reshape(19, 7)
        self.assertFalse(np.isnan(block[0]).any())
        self.assertTrue(np.isnan(block[5]).all())

    def test_unknown_tags(self):
        with self.assertRaises(ValueError):
            feature_names("s3", "all")
        with self.assertRaises(ValueError):
            feature_names("s1", "medoid")


class TestImputer(unittest.TestCase):
    def test_train_means_only(self):
        train = np.array([[1.0, np.nan], [3.0, np.nan]])
        test = np.array([[np.nan, np.nan], [10.0, 5.0]])
        imputer = FeatureImputer().fit(train)
        np.testing.assert_allclose(imputer.transform(test), [[2.0, 0.0], [10.0, 5.0]])

    def test_transform_before_fit(self):
        with self.assertRaises(RuntimeError):
            FeatureImputer().transform(np.zeros((1, 1)))


class TestFeatureFiles(unittest.TestCase):
    def test_csv_layout(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "features.csv")
            matrix = np.array([[0.1, np.nan], [1.5, 2.25]])
            write_feature_matrix(["P1", "P2"], matrix, ["VV_winter", "VV_spring"], path)
            plot_ids, read, names = read_feature_matrix(path)
        self.assertEqual(plot_ids, ["P1", "P2"])
        self.assertEqual(names, ["VV_winter", "VV_spring"])
        np.testing.assert_array_equal(np.isnan(read), np.isnan(matrix))


if __name__ == "__main__":
    unittest.main()
