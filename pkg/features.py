import logging
import math
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import curve_fit

from bands import BandId, SEASONS, SPECTRAL_BANDS, Subset, bands_for_subset
from models import HandcraftedVector, HarmonicFit, N_MONTHS, PixelTimeSeries

logger = logging.getLogger(__name__)

# Months expressed in years, January 2020 = 0
MONTHS_PER_YEAR = 12.0
MONTH_T = np.arange(N_MONTHS) / MONTHS_PER_YEAR
OMEGA = 1.0
HARMONIC_PARAMS = ["beta0", "beta1", "beta2", "beta3", "amplitude", "phase", "rmse"]
FEATURE_SETS = ("seasonal", "harmonic", "all")
# Starting point of the iterative fit
ITERATIVE_P0 = (0.1, 0.1, 0.4, 0.4)


class HarmonicFitError(ValueError):
    """Design matrix without full column rank for a band"""

    def __init__(self, band: BandId, n_points: int, rank: int):
        self.band = band
        self.n_points = n_points
        self.rank = rank
        super().__init__(f"band {BandId(band).value}: rank-deficient harmonic design "
                         f"(rank {rank} from {n_points} points)")


class FeatureName(NamedTuple):
    band: BandId
    feature: str

    @property
    def name(self) -> str:
        return f"{self.band.value}_{self.feature}"


def design_matrix(t: np.ndarray, omega: float = OMEGA) -> np.ndarray:
    """Columns [1, t, cos(2 pi w t), sin(2 pi w t)]"""
    t = np.asarray(t, dtype=np.float64)
    angle = 2.0 * np.pi * omega * t
    return np.stack([np.ones_like(t), t, np.cos(angle), np.sin(angle)], axis=-1)


def harmonic_model(t, b0, b1, b2, b3):
    angle = 2.0 * np.pi * OMEGA * np.asarray(t)
    return b0 + b1 * t + b2 * np.cos(angle) + b3 * np.sin(angle)


def amplitude_phase(beta2: float, beta3: float) -> Tuple[float, float]:
    """Amplitude and phase in (-pi, pi] of the cosine/sine pair"""
    amplitude = math.hypot(beta2, beta3)
    phase = math.atan2(beta3, beta2)
    if phase == -math.pi:
        phase = math.pi
    return amplitude, phase


def _solve_qr(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(design)
    return np.linalg.solve(r, q.T @ y)


def fit_harmonic(signal: Sequence[float], band: BandId, iterative: bool = False) -> HarmonicFit:
    """
    Fit b0 + b1 t + b2 cos(2 pi t) + b3 sin(2 pi t) to twelve monthly values

    NaN entries are treated as missing months. The closed-form solve uses a
    QR factorization; iterative=True refines from ITERATIVE_P0 with
    scipy's curve_fit instead (both agree to 1e-6).

    Args:
        signal: 12 monthly values, NaN where missing
        band: Band being fitted, used in diagnostics

    Returns:
        HarmonicFit with amplitude, phase and RMSE derived from the coefficients

    Raises:
        HarmonicFitError: Fewer than four usable months or a rank-deficient design
    """
    y_all = np.asarray(signal, dtype=np.float64)
    if y_all.shape != (N_MONTHS,):
        raise ValueError(f"expected {N_MONTHS} monthly values, got shape {y_all.shape}")
    present = ~np.isnan(y_all)
    t = MONTH_T[present]
    y = y_all[present]
    design = design_matrix(t)
    rank = int(np.linalg.matrix_rank(design)) if len(t) else 0
    if rank < 4:
        raise HarmonicFitError(band, len(t), rank)

    if iterative:
        beta, _ = curve_fit(harmonic_model, t, y, p0=ITERATIVE_P0, method="lm",
                            ftol=1e-14, xtol=1e-14, gtol=1e-14, maxfev=10000)
    else:
        beta = _solve_qr(design, y)

    residual = design @ beta - y
    rmse = float(np.sqrt(np.mean(residual ** 2)))
    amplitude, phase = amplitude_phase(float(beta[2]), float(beta[3]))
    return HarmonicFit(
        band=band, beta0=float(beta[0]), beta1=float(beta[1]),
        beta2=float(beta[2]), beta3=float(beta[3]),
        amplitude=amplitude, phase=phase, rmse=rmse, omega=OMEGA,
        n_points=int(len(t)), t_values=t.tolist(),
    )


def seasonal_medians_array(values: np.ndarray) -> np.ndarray:
    """(..., 12, bands) monthly values -> (..., bands, 4) seasonal medians, NaN if a season is empty"""
    values = np.asarray(values, dtype=np.float64)
    out = []
    for months in SEASONS.values():
        block = values[..., months, :]
        empty = np.isnan(block).all(axis=-2)
        # nanmedian warns on all-NaN slices; those cells are masked below
        with np.errstate(all="ignore"):
            med = np.nanmedian(np.where(empty[..., None, :], 0.0, block), axis=-2)
        med[empty] = np.nan
        out.append(med)
    return np.stack(out, axis=-1)


def seasonal_medians(series: PixelTimeSeries, bands: Optional[Sequence[BandId]] = None) -> np.ndarray:
    """Per band: winter, spring, summer and autumn medians (bands x 4 flattened)"""
    bands = list(bands) if bands is not None else list(SPECTRAL_BANDS)
    values = np.stack([series.band(b) for b in bands], axis=1)
    return seasonal_medians_array(values).reshape(-1)


def harmonic_features(series: PixelTimeSeries, bands: Optional[Sequence[BandId]] = None,
                      iterative: bool = False) -> Tuple[np.ndarray, List[str]]:
    """
    Seven harmonic parameters per band in registry order

    A band whose fit fails contributes NaN parameters; the failure is returned
    as a diagnostic so the caller can impute.
    """
    bands = list(bands) if bands is not None else list(SPECTRAL_BANDS)
    out = np.full((len(bands), len(HARMONIC_PARAMS)), np.nan)
    diagnostics = []
    for i, band in enumerate(bands):
        try:
            out[i] = fit_harmonic(series.band(band), band, iterative=iterative).params()
        except HarmonicFitError as e:
            diagnostics.append(str(e))
    return out.reshape(-1), diagnostics


def _check_feature_set(feature_set: str) -> str:
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set '{feature_set}' (expected one of {FEATURE_SETS})")
    return feature_set


def _subset(subset) -> Subset:
    try:
        return Subset(subset)
    except ValueError:
        raise ValueError(f"unknown subset tag '{subset}' (expected s1, s2 or s1s2)") from None


def feature_registry(subset: Union[Subset, str] = Subset.S1S2, feature_set: str = "all") -> List[FeatureName]:
    """Index -> (band, feature); seasonal block first, then the harmonic block"""
    bands = bands_for_subset(_subset(subset))
    feature_set = _check_feature_set(feature_set)
    names: List[FeatureName] = []
    if feature_set in ("seasonal", "all"):
        names += [FeatureName(b, season) for b in bands for season in SEASONS]
    if feature_set in ("harmonic", "all"):
        names += [FeatureName(b, p) for b in bands for p in HARMONIC_PARAMS]
    return names


def feature_names(subset: Union[Subset, str] = Subset.S1S2, feature_set: str = "all") -> List[str]:
    return [f.name for f in feature_registry(subset, feature_set)]


def build_vector(series: PixelTimeSeries, subset: Union[Subset, str] = Subset.S1S2,
                 feature_set: str = "all", iterative: bool = False) -> HandcraftedVector:
    """
    Hand-crafted vector restricted to a sensor subset and feature set

    Missing entries stay NaN and are listed in `missing`; impute them with a
    FeatureImputer fitted on the training split.
    """
    subset = _subset(subset)
    feature_set = _check_feature_set(feature_set)
    bands = bands_for_subset(subset)
    parts = []
    if feature_set in ("seasonal", "all"):
        parts.append(seasonal_medians(series, bands))
    if feature_set in ("harmonic", "all"):
        harmonic, diagnostics = harmonic_features(series, bands, iterative=iterative)
        for message in diagnostics:
            logger.debug(f"{series.plot_id}: {message}")
        parts.append(harmonic)
    values = np.concatenate(parts)
    names = feature_names(subset, feature_set)
    missing = [n for n, v in zip(names, values) if np.isnan(v)]
    return HandcraftedVector(plot_id=series.plot_id, values=values, names=names,
                             subset=subset.value, feature_set=feature_set, missing=missing)


def _harmonic_block(values: np.ndarray, bands: Sequence[BandId], iterative: bool) -> np.ndarray:
    """(N, 12, bands) -> (N, bands, 7); complete series are solved in one shot"""
    n, _, n_bands = values.shape
    out = np.full((n, n_bands, len(HARMONIC_PARAMS)), np.nan)
    complete = ~np.isnan(values).any(axis=1)
    design = design_matrix(MONTH_T)

    if not iterative and complete.any():
        rows, cols = np.nonzero(complete)
        y = values[rows, :, cols]
        beta = _solve_qr(design, y.T).T
        residual = beta @ design.T - y
        out[rows, cols, :4] = beta
        out[rows, cols, 4] = np.hypot(beta[:, 2], beta[:, 3])
        phase = np.arctan2(beta[:, 3], beta[:, 2])
        out[rows, cols, 5] = np.where(phase == -np.pi, np.pi, phase)
        out[rows, cols, 6] = np.sqrt(np.mean(residual ** 2, axis=1))
        todo = np.argwhere(~complete)
    else:
        todo = np.argwhere(np.ones_like(complete))

    failures = 0
    for i, j in todo:
        try:
            out[i, j] = fit_harmonic(values[i, :, j], bands[j], iterative=iterative).params()
        except HarmonicFitError:
            failures += 1
    if failures:
        logger.warning(f"{failures} band fits lacked four usable months; parameters left for imputation")
    return out


def feature_matrix(series: Sequence[PixelTimeSeries], subset: Union[Subset, str] = Subset.S1S2,
                   feature_set: str = "all", iterative: bool = False) -> Tuple[np.ndarray, List[str]]:
    """
    Hand-crafted features of many pixels at once

    Returns:
        ((N, F) matrix with NaN for missing entries, registry names)
    """
    subset = _subset(subset)
    feature_set = _check_feature_set(feature_set)
    bands = bands_for_subset(subset)
    idx = [SPECTRAL_BANDS.index(b) for b in bands]
    values = np.stack([s.spectral[:, idx] for s in series]) if series else np.empty((0, N_MONTHS, len(idx)))
    parts = []
    if feature_set in ("seasonal", "all"):
        parts.append(seasonal_medians_array(values).reshape(len(values), -1))
    if feature_set in ("harmonic", "all"):
        parts.append(_harmonic_block(values, bands, iterative).reshape(len(values), -1))
    matrix = np.concatenate(parts, axis=1)
    logger.info(f"Built {matrix.shape[1]} {feature_set} features ({subset.value}) for {len(matrix)} pixels")
    return matrix, feature_names(subset, feature_set)


class FeatureImputer:
    """Column means of the training split; columns with no training value fall back to 0"""

    def __init__(self):
        self.means: Optional[np.ndarray] = None

    def fit(self, train: np.ndarray) -> "FeatureImputer":
        train = np.asarray(train, dtype=np.float64)
        with np.errstate(all="ignore"):
            counts = (~np.isnan(train)).sum(axis=0)
            sums = np.nansum(train, axis=0)
            self.means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        return self

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        if self.means is None:
            raise RuntimeError("FeatureImputer.transform called before fit")
        matrix = np.array(matrix, dtype=np.float64, copy=True)
        if matrix.shape[1] != len(self.means):
            raise ValueError(f"imputer fitted on {len(self.means)} columns, got {matrix.shape[1]}")
        holes = np.isnan(matrix)
        if holes.any():
            logger.warning(f"Imputing {int(holes.sum())} missing feature values from training means")
            matrix[holes] = np.broadcast_to(self.means, matrix.shape)[holes]
        return matrix

    def fit_transform(self, train: np.ndarray) -> np.ndarray:
        return self.fit(train).transform(train)


def write_feature_matrix(plot_ids: Sequence[str], matrix: np.ndarray, names: Sequence[str],
                         path: Union[str, Path]) -> Path:
    """CSV with plot_id first, then one column per registry name"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(np.asarray(matrix, dtype=np.float64), columns=list(names))
    frame.insert(0, "plot_id", list(plot_ids))
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {frame.shape[0]}x{len(names)} feature matrix to {path}")
    return path


def read_feature_matrix(path: Union[str, Path]) -> Tuple[List[str], np.ndarray, List[str]]:
    frame = pd.read_csv(path, dtype={"plot_id": str})
    if frame.columns[0] != "plot_id":
        raise ValueError(f"feature matrix {path} must start with a plot_id column")
    names = list(frame.columns[1:])
    return frame["plot_id"].tolist(), frame[names].to_numpy(dtype=np.float64), names

