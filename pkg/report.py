# Report tables and confusion heatmaps
import logging
import re
from pathlib import Path
from typing import Dict, List, Union

import matplotlib as mpl
mpl.use("Agg")
# Stable element ids so reruns produce identical files
mpl.rcParams["svg.hashsalt"] = "phenoclass"
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from evaluation import ConfusionMatrix, MultiSeedReport, SeedResult, metrics

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["pipeline", "seed", "metric", "class", "value"]
SUMMARY_COLUMNS = ["pipeline", "metric", "mean", "std", "n_seeds", "complete"]


def report_frame(reports: Dict[str, MultiSeedReport]) -> pd.DataFrame:
    rows = [row for report in reports.values() for row in report.long_rows()]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def summary_frame(reports: Dict[str, MultiSeedReport]) -> pd.DataFrame:
    """One row per pipeline and scalar metric, macro-F1 first"""
    rows = []
    for name, report in reports.items():
        summary = report.summary()
        for metric in ("macro_f1", "overall_accuracy", "weighted_f1"):
            mean, std = summary[metric]
            rows.append({"pipeline": name, "metric": metric, "mean": mean, "std": std,
                         "n_seeds": len(report.results), "complete": report.complete})
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def confusion_frame(conf: ConfusionMatrix) -> pd.DataFrame:
    frame = pd.DataFrame(conf.counts, index=conf.class_names, columns=conf.class_names)
    frame.index.name = "reference"
    return frame


def plot_confusion(conf: ConfusionMatrix, path: Union[str, Path], title: str = "") -> Path:
    """
    Row-normalized heatmap annotated with counts and per-class precision

    Cells are shaded by recall share; the precision of each predicted class
    is printed under its column.
    """
    path = Path(path)
    counts = conf.counts
    k = len(conf.class_names)
    rows = counts.sum(axis=1, keepdims=True)
    share = np.divide(counts, rows, out=np.zeros(counts.shape, dtype=np.float64), where=rows > 0)
    precision = metrics(conf).precision

    size = max(4.0, 0.6 * k + 2.0)
    fig, ax = plt.subplots(figsize=(size, size))
    ax.imshow(share, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(k):
        for j in range(k):
            color = "white" if share[i, j] > 0.5 else "black"
            ax.text(j, i, str(counts[i, j]), ha="center", va="center", color=color, fontsize=8)
    ax.set_xticks(range(k))
    ax.set_xticklabels([f"{name}\nP={p:.2f}" for name, p in zip(conf.class_names, precision)],
                       rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(k))
    ax.set_yticklabels(conf.class_names, fontsize=7)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Reference")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_reports(reports: Dict[str, MultiSeedReport], out_dir: Union[str, Path],
                  heatmaps: bool = True) -> List[Path]:
    """
    Write report.csv, summary.csv and one confusion CSV (and SVG) per pipeline and seed

    Returns:
        Paths written
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    report_path = out_dir / "report.csv"
    report_frame(reports).to_csv(report_path, index=False)
    written.append(report_path)
    summary_path = out_dir / "summary.csv"
    summary_frame(reports).to_csv(summary_path, index=False)
    written.append(summary_path)

    for name, report in reports.items():
        for seed in report.seeds:
            if seed not in report.results:
                continue
            conf = report.results[seed].confusion
            csv_path = out_dir / f"confusion_{name}_{seed}.csv"
            confusion_frame(conf).to_csv(csv_path)
            written.append(csv_path)
            if heatmaps:
                written.append(plot_confusion(conf, out_dir / f"confusion_{name}_{seed}.svg",
                                              title=f"{name}, seed {seed}"))
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


_CONFUSION_FILE = re.compile(r"^confusion_(?P<pipeline>.+)_(?P<seed>-?\d+)\.csv$")


def load_reports(out_dir: Union[str, Path]) -> Dict[str, MultiSeedReport]:
    """Rebuild per-pipeline reports from the confusion CSVs of an earlier run"""
    out_dir = Path(out_dir)
    found: Dict[str, Dict[int, ConfusionMatrix]] = {}
    for path in sorted(out_dir.glob("confusion_*.csv")):
        match = _CONFUSION_FILE.match(path.name)
        if match is None:
            continue
        frame = pd.read_csv(path, index_col=0)
        conf = ConfusionMatrix(counts=frame.to_numpy(dtype=np.int64), class_names=[str(c) for c in frame.index])
        found.setdefault(match["pipeline"], {})[int(match["seed"])] = conf
    if not found:
        raise FileNotFoundError(f"no confusion_<pipeline>_<seed>.csv files in {out_dir}")

    reports = {}
    for name, by_seed in found.items():
        seeds = sorted(by_seed)
        report = MultiSeedReport(pipeline=name, seeds=seeds)
        for seed in seeds:
            report.results[seed] = SeedResult(seed=seed, confusion=by_seed[seed], report=metrics(by_seed[seed]))
        reports[name] = report
    return reports
