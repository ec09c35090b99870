import math
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from evaluation import MultiSeedReport, SeedResult, confusion, metrics
from report import (
    REPORT_COLUMNS, SUMMARY_COLUMNS, confusion_frame, load_reports, plot_confusion, report_frame,
    summary_frame, write_reports,
)

NAMES = ["Beech", "Larix", "Pinus"]


def seed_result(seed):
    rng = np.random.default_rng(seed)
    y_true = np.repeat(np.arange(3), 6)
    y_pred = np.where(rng.random(18) < 0.8, y_true, rng.integers(0, 3, 18))
    conf = confusion(y_true, y_pred, 3, NAMES)
    return SeedResult(seed=seed, confusion=conf, report=metrics(conf))


def sample_reports():
    return {
        "rf-hand": MultiSeedReport(pipeline="rf-hand", seeds=[1, 2],
                                   results={1: seed_result(1), 2: seed_result(2)}),
        "mlp-deep": MultiSeedReport(pipeline="mlp-deep", seeds=[1, 2], results={1: seed_result(3)},
                                    failures={2: "TrainingError: non-finite loss"}),
    }


class TestFrames(unittest.TestCase):
    def test_report_frame(self):
        frame = report_frame(sample_reports())
        self.assertEqual(list(frame.columns), REPORT_COLUMNS)
        # 3 scalar metrics plus 4 per-class metrics for 3 classes, per stored seed
        self.assertEqual(len(frame), 3 * (3 + 4 * 3))

    def test_summary_frame(self):
        frame = summary_frame(sample_reports())
        self.assertEqual(list(frame.columns), SUMMARY_COLUMNS)
        self.assertEqual(len(frame), 6)
        self.assertEqual(frame.iloc[0]["metric"], "macro_f1")
        mlp = frame[frame["pipeline"] == "mlp-deep"].iloc[0]
        self.assertFalse(mlp["complete"])
        self.assertEqual(mlp["n_seeds"], 1)
        self.assertTrue(math.isnan(mlp["std"]))

    def test_confusion_frame(self):
        frame = confusion_frame(seed_result(1).confusion)
        self.assertEqual(list(frame.index), NAMES)
        self.assertEqual(list(frame.columns), NAMES)
        self.assertEqual(int(frame.to_numpy().sum()), 18)


class TestFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.out = Path(self.tmp.name)

    def test_write_reports(self):
        written = write_reports(sample_reports(), self.out)
        names = {p.name for p in written}
        self.assertIn("report.csv", names)
        self.assertIn("summary.csv", names)
        self.assertIn("confusion_rf-hand_2.csv", names)
        self.assertIn("confusion_rf-hand_2.svg", names)
        self.assertNotIn("confusion_mlp-deep_2.csv", names)
        self.assertEqual(list(pd.read_csv(self.out / "summary.csv").columns), SUMMARY_COLUMNS)

    def test_without_heatmaps(self):
        written = write_reports(sample_reports(), self.out, heatmaps=False)
        self.assertFalse(any(p.suffix == ".svg" for p in written))

    def test_heatmap_is_reproducible(self):
        conf = seed_result(4).confusion
        a = plot_confusion(conf, self.out / "a.svg", title="rf-hand, seed 4")
        b = plot_confusion(conf, self.out / "b.svg", title="rf-hand, seed 4")
        self.assertTrue(a.read_text().lstrip().startswith(("<?xml", "<svg")))
        self.assertEqual(a.read_bytes(), b.read_bytes())

    def test_load_reports(self):
        reports = sample_reports()
        write_reports(reports, self.out, heatmaps=False)
        loaded = load_reports(self.out)
        self.assertEqual(set(loaded), {"rf-hand", "mlp-deep"})
        self.assertEqual(loaded["rf-hand"].seeds, [1, 2])
        self.assertEqual(loaded["mlp-deep"].seeds, [1])
        for seed in (1, 2):
            original = reports["rf-hand"].results[seed]
            copy = loaded["rf-hand"].results[seed]
            np.testing.assert_array_equal(copy.confusion.counts, original.confusion.counts)
            self.assertEqual(copy.confusion.class_names, NAMES)
            self.assertAlmostEqual(copy.report.macro_f1, original.report.macro_f1)

    def test_load_reports_empty_dir(self):
        with self.assertRaises(FileNotFoundError):
            load_reports(self.out)


if __name__ == "__main__":
    unittest.main()
