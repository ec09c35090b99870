import os
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from bands import BandId, ChannelGroup
from ingest import (
    AssemblyError, IngestError, assemble_pixel, ingest_csv, load_dataset, read_labels, read_static,
    write_labels, write_observations, write_static,
)
from models import StaticRecord
from preprocess import cloud_filter, monthly_median_frame


class TestIngestCsv(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, name, text):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_valid_row_maps_fields(self):
        path = self.write("obs.csv", "plot_id,date,band,value,cloud_prob\nP001,2020-03-14,B4,1532,12.5\n")
        result = ingest_csv(path)
        observation = result.observations()[0]
        self.assertEqual(observation.plot_id, "P001")
        self.assertEqual(observation.date.isoformat(), "2020-03-14")
        self.assertEqual(observation.band, BandId.B4)
        self.assertEqual(observation.value, 1532.0)
        self.assertEqual(observation.cloud_prob, 12.5)

    def test_three_rows_one_bad(self):
        path = self.write("obs.csv", "plot_id,date,band,value,cloud_prob\n"
                                     "P001,2020-03-14,B4,1532,12.5\n"
                                     "P001,2020-03-15,B99,10,\n"
                                     "P001,2020-04-02,VV,-11.2,\n")
        result = ingest_csv(path)
        self.assertEqual(len(result), 2)
        self.assertEqual(len(result.rejections), 1)
        rejection = result.rejections[0]
        self.assertEqual(rejection.row, 2)
        self.assertIn("B99", rejection.reasons[0])

    def test_byte_order_mark(self):
        path = self.write("obs.csv", "\ufeffplot_id,date,band,value,cloud_prob\nP001,2020-03-14,B4,1532,12.5\n")
        result = ingest_csv(path)
        self.assertEqual(len(result), 1)
        self.assertEqual(result.observations()[0].plot_id, "P001")

    def test_malformed_header(self):
        path = self.write("obs.csv", "plot,date,band,value\nP001,2020-03-14,B4,1\n")
        with self.assertRaises(IngestError):
            ingest_csv(path)

    def test_missing_file(self):
        with self.assertRaises(IngestError):
            ingest_csv(os.path.join(self.tmp.name, "absent.csv"))

    def test_reserialization_is_lossless(self):
        path = self.write("obs.csv", "plot_id,date,band,value,cloud_prob\n"
                                     "P001,2020-03-14,B4,1532.25,12.5\n"
                                     "P002,2020-07-01,temperature_2m,291.4,\n")
        first = ingest_csv(path)
        out = write_observations(first.frame, os.path.join(self.tmp.name, "again.csv"))
        second = ingest_csv(out)
        pd.testing.assert_frame_equal(first.frame, second.frame)

    def test_static_and_labels_round_trip(self):
        statics = [StaticRecord(plot_id="P1", lat=52.1, lon=5.2, elevation_m=3.0, slope_deg=0.5),
                   StaticRecord(plot_id="P2", lat=51.0, lon=6.0)]
        static_path = write_static(statics, os.path.join(self.tmp.name, "static.csv"))
        read = read_static(static_path)
        self.assertEqual(read["P1"].elevation_m, 3.0)
        self.assertIsNone(read["P2"].slope_deg)
        label_path = write_labels({"P1": "Pinus", "P2": "Larix"}, os.path.join(self.tmp.name, "labels.csv"))
        self.assertEqual(read_labels(label_path), {"P1": "Pinus", "P2": "Larix"})


def plot_frame(plot_id="P001", months=range(12)):
    rows = []
    for month in months:
        day = f"2020-{month + 1:02d}-10"
        for band, value in (("VV", -11.0), ("VH", -17.0), ("temperature_2m", 285.0),
                            ("total_precipitation", 0.002)):
            rows.append((plot_id, day, band, value, np.nan))
        for i, band in enumerate(("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12")):
            rows.append((plot_id, day, band, 300.0 + 100.0 * i, 5.0))
    frame = pd.DataFrame(rows, columns=["plot_id", "date", "band", "value", "cloud_prob"])
    frame["date"] = pd.to_datetime(frame["date"])
    return frame


class TestAssembly(unittest.TestCase):
    def test_full_year(self):
        static = StaticRecord(plot_id="P001", lat=52.0, lon=5.0, elevation_m=4.0, slope_deg=1.0)
        series = assemble_pixel(plot_frame(), static)
        self.assertTrue(series.group_presence().all())
        self.assertEqual(series.band(BandId.B4)[0], 500.0)
        self.assertTrue((series.dw == 1).all())

    def test_absent_months_flagged_not_filled(self):
        static = StaticRecord(plot_id="P001", lat=52.0, lon=5.0)
        series = assemble_pixel(plot_frame(months=[0, 5, 6]), static)
        presence = series.group_presence()
        self.assertEqual(presence[:, 0].tolist(), [m in (0, 5, 6) for m in range(12)])
        self.assertTrue(np.isnan(series.band(BandId.VV)[3]))
        self.assertEqual(series.static_presence().tolist(), [False, True])

    def test_cloudy_month_drops_s2_groups_only(self):
        frame = plot_frame()
        frame.loc[(frame["date"].dt.month == 2) & frame["cloud_prob"].notna(), "cloud_prob"] = 90.0
        series = assemble_pixel(cloud_filter(frame, 65.0), StaticRecord(plot_id="P001", lat=52.0, lon=5.0))
        presence = series.group_presence()
        self.assertFalse(presence[1, 1])
        self.assertTrue(presence[1, 0])
        self.assertTrue(np.isnan(series.band(BandId.NDVI)[1]))

    def test_mixed_plots_rejected(self):
        frame = pd.concat([plot_frame("P001"), plot_frame("P002")])
        with self.assertRaises(AssemblyError):
            assemble_pixel(frame, StaticRecord(plot_id="P001", lat=52.0, lon=5.0))

    def test_values_traceable_to_observations(self):
        frame = plot_frame(months=[2, 3])
        series = assemble_pixel(frame, StaticRecord(plot_id="P001", lat=52.0, lon=5.0))
        observed = set(frame["value"].round(9))
        for band in (BandId.VV, BandId.B8, BandId.TEMPERATURE_2M):
            values = series.band(band)
            for v in values[~np.isnan(values)]:
                self.assertIn(round(float(v), 9), observed)

    def test_load_dataset(self):
        frame = pd.concat([plot_frame("P001"), plot_frame("P002"), plot_frame("P003")])
        statics = {p: StaticRecord(plot_id=p, lat=52.0, lon=5.0) for p in ("P001", "P002", "P003")}
        labels = {"P001": "Quercus", "P002": "Pinus", "P003": "Pinus", "P004": "Larix"}
        dataset = load_dataset(monthly_median_frame(frame), statics, labels)
        self.assertEqual(dataset.class_names, ["Pinus", "Quercus"])
        self.assertEqual(dataset.labels.tolist(), [1, 0, 0])
        self.assertEqual(dataset.series[0].channels(ChannelGroup.S1).shape, (12, 2))


if __name__ == "__main__":
    unittest.main()
