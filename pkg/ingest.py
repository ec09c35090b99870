import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from bands import BandId, CLIMATE_BANDS, GROUP_BANDS, OBSERVABLE_BANDS, REAL_DYNAMIC_GROUPS, SPECTRAL_BANDS, S2_BANDS
from models import (
    Dataset, DW_TREE_CLASS, MonthlyComposite, N_MONTHS, Observation, PixelTimeSeries,
    Sample, SpeciesLabel, StaticRecord, class_index,
)
from preprocess import (
    IndexCoefficients, OBSERVATION_COLUMNS, ObservationsLike, composites_from_frame,
    compute_indices, frame_to_observations, monthly_median_frame, _as_frame,
)

logger = logging.getLogger(__name__)

STATIC_COLUMNS = ["plot_id", "lat", "lon", "elevation_m", "slope_deg"]
LABEL_COLUMNS = ["plot_id", "class_name"]


class IngestError(ValueError):
    """A CSV that cannot be ingested at all"""


class AssemblyError(ValueError):
    """Observations that cannot form one pixel time series"""


class IngestionSchema(BaseModel):
    """Expected layout of an observation CSV"""
    columns: List[str] = OBSERVATION_COLUMNS
    year: int = 2020
    bands: List[BandId] = OBSERVABLE_BANDS


class IngestRejection(BaseModel):
    """A data row that failed validation; row is 1-based, header excluded"""
    row: int
    plot_id: str
    reasons: List[str]


class IngestResult(BaseModel):
    model_config = {"arbitrary_types_allowed": True}

    path: str
    frame: pd.DataFrame
    rejections: List[IngestRejection] = []

    def __len__(self) -> int:
        return len(self.frame)

    def observations(self) -> List[Observation]:
        return frame_to_observations(self.frame)


def _read_raw(path: Union[str, Path], expected: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"missing file: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8-sig")
    except pd.errors.EmptyDataError:
        raise IngestError(f"malformed header in {path}: file is empty")
    except pd.errors.ParserError as e:
        raise IngestError(f"malformed CSV {path}: {e}")
    header = [c.strip() for c in raw.columns]
    if header != list(expected):
        raise IngestError(f"malformed header in {path}: expected {','.join(expected)}, got {','.join(header)}")
    raw.columns = header
    return raw


def ingest_csv(path: Union[str, Path], schema: Optional[IngestionSchema] = None) -> IngestResult:
    """
    Read an observation CSV, rejecting invalid rows with their row numbers

    Args:
        path: CSV with header plot_id,date,band,value,cloud_prob
        schema: Expected columns, year and accepted bands

    Returns:
        IngestResult holding the typed frame of valid rows and the rejections
    """
    schema = schema or IngestionSchema()
    raw = _read_raw(path, schema.columns)
    logger.info(f"Read {len(raw)} observation rows from {path}")

    plot_id = raw["plot_id"].str.strip()
    dates = pd.to_datetime(raw["date"].str.strip(), format="%Y-%m-%d", errors="coerce")
    band = raw["band"].str.strip()
    value = pd.to_numeric(raw["value"].str.strip(), errors="coerce")
    cloud_text = raw["cloud_prob"].str.strip()
    cloud = pd.to_numeric(cloud_text.where(cloud_text != ""), errors="coerce")

    allowed = {b.value for b in schema.bands}
    s2_names = {b.value for b in S2_BANDS}
    problems = {
        "empty plot_id": plot_id == "",
        "unparseable date": dates.isna(),
        f"date outside {schema.year}": dates.notna() & (dates.dt.year != schema.year),
        "unknown band": ~band.isin(allowed),
        "non-numeric value": value.isna() | ~np.isfinite(value.fillna(0.0)),
        "negative S2 value": band.isin(s2_names) & (value < 0),
        "non-numeric cloud_prob": (cloud_text != "") & cloud.isna(),
        "cloud_prob outside [0, 100]": cloud.notna() & ((cloud < 0) | (cloud > 100)),
    }
    bad = pd.Series(False, index=raw.index)
    for mask in problems.values():
        bad |= mask

    rejections = []
    for idx in np.flatnonzero(bad.to_numpy()):
        reasons = []
        for reason, mask in problems.items():
            if mask.iat[idx]:
                if reason == "unknown band":
                    reasons.append(f"unknown band '{band.iat[idx]}'")
                elif reason == "non-numeric value":
                    reasons.append(f"non-numeric value '{raw['value'].iat[idx]}'")
                else:
                    reasons.append(reason)
        rejections.append(IngestRejection(row=int(idx) + 1, plot_id=plot_id.iat[idx], reasons=reasons))
    for rejection in rejections[:20]:
        logger.warning(f"Rejected row {rejection.row} ({rejection.plot_id}): {'; '.join(rejection.reasons)}")
    if len(rejections) > 20:
        logger.warning(f"... {len(rejections) - 20} more rejected rows")

    good = ~bad
    frame = pd.DataFrame({
        "plot_id": plot_id[good],
        "date": dates[good],
        "band": band[good],
        "value": value[good].astype(np.float64),
        "cloud_prob": cloud[good].astype(np.float64),
    }).reset_index(drop=True)
    return IngestResult(path=str(path), frame=frame, rejections=rejections)


def write_observations(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write observations in the ingestion schema"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = frame[OBSERVATION_COLUMNS].copy()
    out["date"] = pd.to_datetime(out["date"]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False)
    logger.info(f"Wrote {len(out)} observations to {path}")
    return path


def read_static(path: Union[str, Path]) -> Dict[str, StaticRecord]:
    """Static attributes keyed by plot id; any invalid row is an error"""
    raw = _read_raw(path, STATIC_COLUMNS)
    records = {}
    errors = []
    for i, row in enumerate(raw.itertuples(index=False), start=1):
        try:
            records[row.plot_id] = StaticRecord(
                plot_id=row.plot_id,
                lat=float(row.lat),
                lon=float(row.lon),
                elevation_m=float(row.elevation_m) if row.elevation_m != "" else None,
                slope_deg=float(row.slope_deg) if row.slope_deg != "" else None,
            )
        except ValueError as e:
            errors.append(f"row {i}: {e}")
    if errors:
        raise IngestError(f"invalid static rows in {path}: {' | '.join(errors)}")
    return records


def write_static(records: Iterable[StaticRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [(r.plot_id, r.lat, r.lon, r.elevation_m, r.slope_deg) for r in records],
        columns=STATIC_COLUMNS,
    )
    frame.to_csv(path, index=False)
    return path


def read_labels(path: Union[str, Path]) -> Dict[str, str]:
    raw = _read_raw(path, LABEL_COLUMNS)
    empty = raw.index[(raw["plot_id"] == "") | (raw["class_name"] == "")]
    if len(empty):
        raise IngestError(f"empty label fields in {path} at rows {[int(i) + 1 for i in empty]}")
    return dict(zip(raw["plot_id"], raw["class_name"]))


def write_labels(labels: Dict[str, str], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(labels.items()), columns=LABEL_COLUMNS).to_csv(path, index=False)
    return path


def assemble_from_composites(composites: Sequence[MonthlyComposite], static: StaticRecord,
                             coefficients: Optional[IndexCoefficients] = None) -> PixelTimeSeries:
    """
    Build a pixel time series from one plot's monthly composites

    A group with any missing band in a month is flagged missing as a whole;
    no value is ever filled in.
    """
    if not -90.0 <= static.lat <= 90.0:
        raise AssemblyError(f"latitude {static.lat} outside [-90, 90]")
    spectral = np.full((N_MONTHS, len(SPECTRAL_BANDS)), np.nan)
    climate = np.full((N_MONTHS, len(CLIMATE_BANDS)), np.nan)
    for composite in composites:
        if composite.plot_id != static.plot_id:
            raise AssemblyError(f"composite for {composite.plot_id} mixed into {static.plot_id}")
        record = compute_indices(composite, coefficients)
        spectral[composite.month] = record.as_array()
        climate[composite.month] = [composite.values.get(b, np.nan) for b in CLIMATE_BANDS]

    spectral, climate = _drop_partial_groups(spectral, climate, static.plot_id)

    return PixelTimeSeries(
        plot_id=static.plot_id,
        spectral=spectral,
        climate=climate,
        dw=np.full(N_MONTHS, DW_TREE_CLASS, dtype=np.int64),
        elevation=np.nan if static.elevation_m is None else static.elevation_m,
        slope=np.nan if static.slope_deg is None else static.slope_deg,
        lat=static.lat,
        lon=static.lon,
    )


def _drop_partial_groups(spectral: np.ndarray, climate: np.ndarray, plot_id: str):
    for group in REAL_DYNAMIC_GROUPS:
        for month in range(N_MONTHS):
            cells = []
            for band in GROUP_BANDS[group]:
                if band in CLIMATE_BANDS:
                    cells.append((climate, CLIMATE_BANDS.index(band)))
                else:
                    cells.append((spectral, SPECTRAL_BANDS.index(band)))
            missing = [np.isnan(arr[month, col]) for arr, col in cells]
            if any(missing) and not all(missing):
                logger.debug(f"{plot_id}: group {group.value} partially observed in month {month}, flagged missing")
                for arr, col in cells:
                    arr[month, col] = np.nan
    return spectral, climate


def assemble_pixel(observations: ObservationsLike, static: StaticRecord,
                   coefficients: Optional[IndexCoefficients] = None) -> PixelTimeSeries:
    """
    Composite one plot's cloud-filtered observations into a pixel time series

    Args:
        observations: Observations of a single plot
        static: Terrain and location record of the same plot
        coefficients: Index constants for compute_indices

    Returns:
        PixelTimeSeries with absent months flagged missing per group
    """
    frame = _as_frame(observations)
    plot_ids = set(frame["plot_id"].unique()) if not frame.empty else set()
    if len(plot_ids) > 1:
        raise AssemblyError(f"mixed plot ids: {sorted(plot_ids)}")
    if plot_ids and plot_ids != {static.plot_id}:
        raise AssemblyError(f"observations for {plot_ids.pop()} paired with static record {static.plot_id}")
    if not -90.0 <= static.lat <= 90.0:
        raise AssemblyError(f"latitude {static.lat} outside [-90, 90]")
    composites = composites_from_frame(monthly_median_frame(frame), plot_ids=[static.plot_id])
    return assemble_from_composites(composites, static, coefficients)


def load_dataset(composite: pd.DataFrame, statics: Dict[str, StaticRecord], labels: Dict[str, str],
                 schema_tag: str = "synthetic",
                 coefficients: Optional[IndexCoefficients] = None) -> Dataset:
    """
    Join composites, static attributes and labels into a Dataset

    Plots lacking a static record or a label are skipped with a warning.
    """
    plot_ids = sorted(set(composite["plot_id"].unique()) | set(labels))
    usable = [p for p in plot_ids if p in statics and p in labels]
    skipped = len(plot_ids) - len(usable)
    if skipped:
        logger.warning(f"Skipping {skipped} plots without both a static record and a label")
    if not usable:
        raise IngestError("no plot has composites, a static record and a label")

    ids = class_index([labels[p] for p in usable])
    grouped = {}
    for plot_id, part in composite.groupby("plot_id", sort=False):
        grouped[plot_id] = part
    empty = composite.iloc[0:0]

    samples = []
    for plot_id in usable:
        composites = composites_from_frame(grouped.get(plot_id, empty), plot_ids=[plot_id])
        series = assemble_from_composites(composites, statics[plot_id], coefficients)
        name = labels[plot_id]
        samples.append(Sample(series=series, label=SpeciesLabel(class_id=ids[name], class_name=name)))
    logger.info(f"Assembled {len(samples)} pixel time series over {len(ids)} classes")
    return Dataset(samples=samples, schema_tag=schema_tag, class_names=sorted(ids))
