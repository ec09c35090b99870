import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import default_run_config
from forest import (
    ForestConfig, ForestError, _grow_tree, best_split, dump_forest, gini, load_forest, load_forest_text,
    max_features_for, rf_fit, rf_predict, save_forest,
)


def brute_force_split(X, y, n_classes):
    """Every (feature, midpoint) pair in feature-then-threshold order"""
    n, p = X.shape
    candidates = []
    for f in range(p):
        values = np.unique(X[:, f])
        for lo, hi in zip(values[:-1], values[1:]):
            t = (lo + hi) / 2.0
            left = X[:, f] <= t
            impurity = (left.sum() * gini(np.bincount(y[left], minlength=n_classes))
                        + (~left).sum() * gini(np.bincount(y[~left], minlength=n_classes))) / n
            candidates.append((f, t, impurity))
    if not candidates:
        return None
    lowest = min(c[2] for c in candidates)
    return next(c for c in candidates if c[2] <= lowest + 1e-12)


def two_clusters(n_per_class=20, p=4, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(0.0, 1.0, (n_per_class, p)), rng.normal(50.0, 1.0, (n_per_class, p))])
    return X, np.repeat([0, 1], n_per_class)


class TestBestSplit(unittest.TestCase):
    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(2, 15))
            p = int(rng.integers(1, 5))
            k = int(rng.integers(2, 4))
            # small integer grid so ties are common
            X = rng.integers(0, 4, (n, p)).astype(np.float64)
            y = rng.integers(0, k, n)
            expected = brute_force_split(X, y, k)
            got = best_split(X, y, range(p), k)
            if expected is None:
                self.assertIsNone(got)
                continue
            self.assertEqual(got[0], expected[0], msg=(X.tolist(), y.tolist()))
            self.assertEqual(got[1], expected[1])
            self.assertAlmostEqual(got[2], expected[2], places=12)

    def test_constant_features(self):
        self.assertIsNone(best_split(np.ones((5, 2)), np.array([0, 1, 0, 1, 0]), [0, 1], 2))

    def test_gini(self):
        self.assertEqual(gini([4, 0]), 0.0)
        self.assertAlmostEqual(gini([1, 1]), 0.5)
        self.assertEqual(gini([0, 0]), 0.0)

    def test_max_features(self):
        self.assertEqual(max_features_for(209), 14)
        self.assertEqual(max_features_for(22), 4)
        self.assertEqual(max_features_for(1), 1)


class TestTree(unittest.TestCase):
    def test_xor(self):
        X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        y = np.array([0, 1, 1, 0])
        tree = _grow_tree(X, y, 2, max_features=1, min_samples_split=2, tree_seed=3, bootstrap=False)
        self.assertLessEqual(tree.depth(), 2)
        np.testing.assert_array_equal(tree.predict_proba(X).argmax(axis=1), y)

    def test_pure_node_is_leaf(self):
        X = np.arange(6, dtype=np.float64).reshape(-1, 1)
        y = np.array([0, 0, 0, 1, 1, 1])
        tree = _grow_tree(X, y, 2, max_features=1, min_samples_split=2, tree_seed=0, bootstrap=False)
        self.assertEqual(tree.n_nodes, 3)
        self.assertEqual(tree.threshold[0], 2.5)
        leaves = tree.counts[tree.feature == -1]
        self.assertTrue(all(np.count_nonzero(row) == 1 for row in leaves))

    def test_min_samples_split(self):
        X = np.arange(6, dtype=np.float64).reshape(-1, 1)
        y = np.array([0, 1, 0, 1, 0, 1])
        tree = _grow_tree(X, y, 2, max_features=1, min_samples_split=7, tree_seed=0, bootstrap=False)
        self.assertEqual(tree.n_nodes, 1)
        np.testing.assert_allclose(tree.predict_proba(X), 0.5)


class TestForest(unittest.TestCase):
    def test_default_tree_count(self):
        self.assertEqual(ForestConfig().n_trees, 500)
        self.assertEqual(ForestConfig.from_config(default_run_config()).n_trees, 500)

    def test_unanimous_forest(self):
        X, y = two_clusters()
        model = rf_fit(X, y, ForestConfig(n_trees=25, seed=1), n_jobs=1)
        labels, probs = rf_predict(model, X)
        np.testing.assert_array_equal(labels, y)
        np.testing.assert_array_equal(probs, np.eye(2)[y])

    def test_single_tree_forest(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(60, 5))
        y = rng.integers(0, 3, 60)
        model = rf_fit(X, y, ForestConfig(n_trees=1, seed=4), n_classes=3, n_jobs=1)
        _, probs = rf_predict(model, X)
        np.testing.assert_array_equal(probs, model.trees[0].predict_proba(X))

    def test_probabilities_are_distributions(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(80, 6))
        y = rng.integers(0, 4, 80)
        model = rf_fit(X, y, ForestConfig(n_trees=15, seed=0), n_classes=4, n_jobs=1)
        _, probs = rf_predict(model, rng.normal(size=(30, 6)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        self.assertEqual(probs.shape, (30, 4))

    def test_seed_determinism(self):
        X, y = two_clusters(seed=5)
        a = rf_fit(X, y, ForestConfig(n_trees=10, seed=7), n_jobs=1)
        b = rf_fit(X, y, ForestConfig(n_trees=10, seed=7), n_jobs=1)
        self.assertEqual(dump_forest(a), dump_forest(b))

    def test_worker_count_does_not_matter(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(50, 9))
        y = rng.integers(0, 3, 50)
        serial = rf_fit(X, y, ForestConfig(n_trees=8, seed=2), n_jobs=1)
        parallel = rf_fit(X, y, ForestConfig(n_trees=8, seed=2), n_jobs=3)
        self.assertEqual(dump_forest(serial), dump_forest(parallel))

    def test_dump_round_trip(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(40, 4))
        y = rng.integers(0, 2, 40)
        model = rf_fit(X, y, ForestConfig(n_trees=5, seed=3), n_jobs=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_forest(model, os.path.join(tmp, "forest.txt"))
            loaded = load_forest(path)
        self.assertEqual(dump_forest(loaded), dump_forest(model))
        np.testing.assert_array_equal(rf_predict(loaded, X)[1], rf_predict(model, X)[1])

    def test_errors(self):
        X, y = two_clusters()
        with self.assertRaises(ForestError):
            rf_fit(X, np.zeros(len(y), dtype=int), ForestConfig(n_trees=2), n_jobs=1)
        bad = X.copy()
        bad[0, 0] = np.nan
        with self.assertRaises(ForestError):
            rf_fit(bad, y, ForestConfig(n_trees=2), n_jobs=1)
        with self.assertRaises(ForestError):
            rf_fit(X, y[:-1], ForestConfig(n_trees=2), n_jobs=1)
        model = rf_fit(X, y, ForestConfig(n_trees=2), n_jobs=1)
        with self.assertRaises(ForestError):
            rf_predict(model, X[:, :3])
        with self.assertRaises(ForestError):
            load_forest_text("n_trees 1\nn_classes 2\ntree 0 seed 1 nodes 2\n0 -1 0.0 -1 -1 1,1\n")
        with self.assertRaises(ForestError):
            load_forest(os.path.join(tempfile.gettempdir(), "no-such-forest.txt"))


class TestRescalingInvariance(unittest.TestCase):
    """Trees only see the order of each feature, so rescaling a column cannot change a fit"""

    def setUp(self):
        rng = np.random.default_rng(4)
        # integer values keep 4x - 3 and its midpoints exact
        self.X = rng.integers(0, 40, (90, 5)).astype(np.float64)
        self.y = (self.X[:, 0] + self.X[:, 2] > 40).astype(np.int64) + (self.X[:, 4] > 30)
        self.fresh = rng.integers(0, 40, (60, 5)).astype(np.float64)
        self.config = ForestConfig(n_trees=15, seed=3)
        self.model = rf_fit(self.X, self.y, self.config, n_classes=3)

    def assert_same_partitions(self, other):
        for a, b in zip(self.model.trees, other.trees):
            np.testing.assert_array_equal(a.feature, b.feature)
            np.testing.assert_array_equal(a.left, b.left)
            np.testing.assert_array_equal(a.counts, b.counts)

    def test_affine_rescaling(self):
        scaled = self.X.copy()
        scaled[:, 2] = 4.0 * scaled[:, 2] - 3.0
        fresh = self.fresh.copy()
        fresh[:, 2] = 4.0 * fresh[:, 2] - 3.0
        other = rf_fit(scaled, self.y, self.config, n_classes=3)
        self.assert_same_partitions(other)
        np.testing.assert_array_equal(rf_predict(other, scaled)[0], rf_predict(self.model, self.X)[0])
        np.testing.assert_array_equal(rf_predict(other, fresh)[0], rf_predict(self.model, self.fresh)[0])

    def test_monotone_rescaling(self):
        warped = self.X.copy()
        warped[:, 0] = np.exp(warped[:, 0] / 8.0)
        warped[:, 4] = warped[:, 4] ** 3
        other = rf_fit(warped, self.y, self.config, n_classes=3)
        self.assert_same_partitions(other)
        np.testing.assert_array_equal(rf_predict(other, warped)[1], rf_predict(self.model, self.X)[1])


if __name__ == "__main__":
    unittest.main()
