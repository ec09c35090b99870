import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from bands import BandId, INDEX_BANDS, OBSERVABLE_BANDS, RAW_BANDS, S2_BANDS, SPECTRAL_BANDS
from models import MonthlyComposite, N_MONTHS, Observation

logger = logging.getLogger(__name__)

DEFAULT_CLOUD_THRESHOLD = 65.0
OBSERVATION_COLUMNS = ["plot_id", "date", "band", "value", "cloud_prob"]
COMPOSITE_COLUMNS = ["plot_id", "month", "band", "value", "count"]

ObservationsLike = Union[pd.DataFrame, Sequence[Observation]]


def observations_to_frame(observations: Sequence[Observation]) -> pd.DataFrame:
    """Typed observation frame from Observation records"""
    rows = [
        (o.plot_id, pd.Timestamp(o.date), o.band.value, o.value,
         np.nan if o.cloud_prob is None else o.cloud_prob)
        for o in observations
    ]
    frame = pd.DataFrame(rows, columns=OBSERVATION_COLUMNS)
    frame["date"] = pd.to_datetime(frame["date"])
    frame["value"] = frame["value"].astype(np.float64)
    frame["cloud_prob"] = frame["cloud_prob"].astype(np.float64)
    return frame


def frame_to_observations(frame: pd.DataFrame) -> List[Observation]:
    return [
        Observation(
            plot_id=row.plot_id,
            date=row.date.date(),
            band=BandId(row.band),
            value=row.value,
            cloud_prob=None if pd.isna(row.cloud_prob) else row.cloud_prob,
        )
        for row in frame.itertuples(index=False)
    ]


def _as_frame(observations: ObservationsLike) -> pd.DataFrame:
    if isinstance(observations, pd.DataFrame):
        return observations
    return observations_to_frame(list(observations))


def cloud_filter(observations: ObservationsLike,
                 threshold: float = DEFAULT_CLOUD_THRESHOLD) -> ObservationsLike:
    """
    Drop S2 observations whose cloud probability exceeds the threshold

    The comparison is strict: a row at exactly the threshold survives. S1 and
    climate rows pass through whatever their cloud field holds.

    Args:
        observations: Observation records or an observation frame
        threshold: Cloud probability in percent

    Returns:
        Surviving observations, in the same form as the input
    """
    if not 0.0 <= threshold <= 100.0:
        raise ValueError(f"cloud threshold {threshold} outside [0, 100]")
    s2_names = {b.value for b in S2_BANDS}

    if not isinstance(observations, pd.DataFrame):
        return [
            o for o in observations
            if not (o.band.value in s2_names and o.cloud_prob is not None and o.cloud_prob > threshold)
        ]

    cloudy = observations["band"].isin(s2_names) & (observations["cloud_prob"] > threshold)
    kept = observations.loc[~cloudy].reset_index(drop=True)
    logger.debug(f"Cloud filter kept {len(kept)}/{len(observations)} observations at {threshold}%")
    return kept


def monthly_median_frame(observations: ObservationsLike) -> pd.DataFrame:
    """
    Long composite frame (plot_id, month, band, value, count)

    Only plot/month/band cells with at least one observation appear.
    """
    frame = _as_frame(observations)
    if frame.empty:
        return pd.DataFrame(columns=COMPOSITE_COLUMNS)
    work = frame.assign(month=frame["date"].dt.month - 1)
    grouped = work.groupby(["plot_id", "month", "band"], sort=True)["value"]
    # pandas median takes the mean of the two middle values for even counts
    composite = grouped.agg(value="median", count="size").reset_index()
    composite["month"] = composite["month"].astype(np.int64)
    composite["count"] = composite["count"].astype(np.int64)
    return composite[COMPOSITE_COLUMNS]


def monthly_median(observations: ObservationsLike) -> List[MonthlyComposite]:
    """
    Per plot, month and band median of already cloud-filtered observations

    Every plot present in the input gets twelve composites; bands without a
    surviving observation in a month are flagged missing (NaN, count 0).
    """
    composite = monthly_median_frame(observations)
    return composites_from_frame(composite, plot_ids=_plot_ids(observations))


def _plot_ids(observations: ObservationsLike) -> List[str]:
    frame = _as_frame(observations)
    return sorted(frame["plot_id"].unique().tolist()) if not frame.empty else []


def composites_from_frame(composite: pd.DataFrame,
                          plot_ids: Optional[Sequence[str]] = None) -> List[MonthlyComposite]:
    """Expand a long composite frame into twelve MonthlyComposite per plot"""
    if plot_ids is None:
        plot_ids = sorted(composite["plot_id"].unique().tolist())
    cells: Dict[Tuple[str, int], Dict[str, Tuple[float, int]]] = {}
    for row in composite.itertuples(index=False):
        cells.setdefault((row.plot_id, int(row.month)), {})[row.band] = (float(row.value), int(row.count))

    result = []
    for plot_id in plot_ids:
        for month in range(N_MONTHS):
            cell = cells.get((plot_id, month), {})
            values = {}
            counts = {}
            for band in OBSERVABLE_BANDS:
                value, count = cell.get(band.value, (np.nan, 0))
                values[band] = value
                counts[band] = count
            result.append(MonthlyComposite(plot_id=plot_id, month=month, values=values, counts=counts))
    return result


def write_composites(composite: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write the composite cache CSV"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    composite[COMPOSITE_COLUMNS].to_csv(path, index=False)
    logger.info(f"Wrote {len(composite)} composite cells to {path}")
    return path


def read_composites(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"plot_id": str, "band": str})
    missing = [c for c in COMPOSITE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"composite cache {path} lacks columns {missing}")
    return frame[COMPOSITE_COLUMNS]


class IndexCoefficients(BaseModel):
    """Tasseled Cap rows over the ten S2 bands plus EVI constants"""
    brightness: List[float]
    greenness: List[float]
    wetness: List[float]
    evi_gain: float = 2.5
    evi_c1: float = 6.0
    evi_c2: float = 7.5
    evi_l: float = 1.0
    reflectance_scale: float = 10000.0

    @classmethod
    def from_config(cls, run_config) -> "IndexCoefficients":
        tc = run_config.tasseled_cap
        evi = run_config.preprocess.evi
        return cls(
            brightness=tc.brightness, greenness=tc.greenness, wetness=tc.wetness,
            evi_gain=evi.gain, evi_c1=evi.c1, evi_c2=evi.c2, evi_l=evi.l,
            reflectance_scale=run_config.preprocess.reflectance_scale,
        )

    def matrix(self) -> np.ndarray:
        """(3, 10) rows: brightness, greenness, wetness"""
        return np.array([self.brightness, self.greenness, self.wetness], dtype=np.float64)


@lru_cache(maxsize=1)
def default_coefficients() -> IndexCoefficients:
    from config import default_run_config
    return IndexCoefficients.from_config(default_run_config())


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """num/den with 0 where den == 0; second array flags those cells"""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    out = np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=~zero)
    return out, zero


def compute_ndvi(b8, b4):
    """(B8 - B4) / (B8 + B4); 0 when the denominator vanishes"""
    ndvi, _ = _safe_ratio(np.subtract(b8, b4), np.add(b8, b4))
    return float(ndvi) if np.ndim(ndvi) == 0 else ndvi


def indices_from_s2(s2: np.ndarray,
                    coefficients: Optional[IndexCoefficients] = None) -> Tuple[np.ndarray, Dict[BandId, np.ndarray]]:
    """
    Seven indices from S2 digital numbers

    Args:
        s2: (..., 10) array over S2_BANDS; NaN rows yield NaN indices
        coefficients: Index constants, defaults from configs/default.yaml

    Returns:
        ((..., 7) array over INDEX_BANDS, per-index zero-denominator flags)
    """
    coefficients = coefficients or default_coefficients()
    s2 = np.asarray(s2, dtype=np.float64)
    col = {band: s2[..., i] for i, band in enumerate(S2_BANDS)}
    refl = s2 / coefficients.reflectance_scale
    rcol = {band: refl[..., i] for i, band in enumerate(S2_BANDS)}

    ndvi, ndvi_zero = _safe_ratio(col[BandId.B8] - col[BandId.B4], col[BandId.B8] + col[BandId.B4])
    nbr, nbr_zero = _safe_ratio(col[BandId.B8] - col[BandId.B12], col[BandId.B8] + col[BandId.B12])
    evi_den = (rcol[BandId.B8] + coefficients.evi_c1 * rcol[BandId.B4]
               - coefficients.evi_c2 * rcol[BandId.B2] + coefficients.evi_l)
    evi, evi_zero = _safe_ratio(coefficients.evi_gain * (rcol[BandId.B8] - rcol[BandId.B4]), evi_den)
    tc = refl @ coefficients.matrix().T
    tcb, tcg, tcw = tc[..., 0], tc[..., 1], tc[..., 2]
    ratio, tca_zero = _safe_ratio(tcg, tcb)
    tca = np.arctan(ratio)

    stacked = np.stack([ndvi, nbr, evi, tcb, tcw, tcg, tca], axis=-1)
    missing = np.isnan(s2).any(axis=-1)
    stacked[missing] = np.nan
    flags = {
        BandId.NDVI: ndvi_zero & ~missing,
        BandId.NBR: nbr_zero & ~missing,
        BandId.EVI: evi_zero & ~missing,
        BandId.TCA: tca_zero & ~missing,
    }
    return stacked, flags


class IndexRecord(BaseModel):
    """One month of the 19-band record with diagnostics"""
    plot_id: str
    month: int
    values: Dict[BandId, float]
    flags: List[str] = []

    def as_array(self) -> np.ndarray:
        return np.array([self.values[b] for b in SPECTRAL_BANDS], dtype=np.float64)


def compute_indices(composite: MonthlyComposite,
                    coefficients: Optional[IndexCoefficients] = None) -> IndexRecord:
    """
    Append NDVI, NBR, EVI, TCB, TCW, TCG and TCA to the 12 raw bands

    All seven indices are missing when any of the ten S2 bands is missing.
    A vanishing denominator yields 0 and a diagnostic flag.
    """
    raw = np.array([composite.values.get(b, np.nan) for b in RAW_BANDS], dtype=np.float64)
    s2 = np.array([composite.values.get(b, np.nan) for b in S2_BANDS], dtype=np.float64)
    indices, zero = indices_from_s2(s2, coefficients)

    values = {band: float(v) for band, v in zip(RAW_BANDS, raw)}
    values.update({band: float(v) for band, v in zip(INDEX_BANDS, indices)})
    flags = [f"{band.value}: zero denominator" for band, hit in zero.items() if bool(hit)]
    if flags:
        logger.debug(f"Index diagnostics for {composite.plot_id} month {composite.month}: {flags}")
    return IndexRecord(plot_id=composite.plot_id, month=composite.month, values=values, flags=flags)
