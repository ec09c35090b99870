# Synthetic phenology datasets standing in for the confidential inventory plots
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from bands import S1_BANDS, S2_BANDS, CLIMATE_BANDS, SPECTRAL_BANDS, INDEX_BANDS
from models import (
    Dataset, DW_TREE_CLASS, N_MONTHS, PixelTimeSeries, Sample, SpeciesLabel, StaticRecord, class_index,
)
from preprocess import DEFAULT_CLOUD_THRESHOLD, OBSERVATION_COLUMNS, indices_from_s2

logger = logging.getLogger(__name__)

# Relative S2 band levels between red and NIR (red edge) and below red (visible)
_RED_EDGE_MIX = {"B5": 0.3, "B6": 0.7, "B7": 0.9}
MONTH_T = np.arange(N_MONTHS) / N_MONTHS
FLUSH_WIDTH = 0.35


class SynthConfigError(ValueError):
    """A phenology configuration that cannot produce valid reflectances"""


class ClassPhenology(BaseModel):
    """Seasonal signal of one class; months are 0-based, fractional allowed"""
    name: str
    count: int
    ndvi_base: float
    ndvi_amp: float
    peak_month: float
    # Second harmonic (two cycles per year) makes the signal double-peaked
    second_amp: float = 0.0
    second_peak: float = 0.0
    # One-month NDVI pulse (leaf flush); invisible to seasonal medians when it sits at a season's top
    flush_amp: float = 0.0
    flush_month: float = 0.0
    nir_base: float = 0.30
    swir_base: float = 0.15
    swir_ratio: float = 0.55
    vv_db: float = -8.5
    vh_db: float = -14.5
    s1_amp: float = 0.5
    noise: float = 0.02
    base_jitter: float = 0.03
    phase_jitter: float = 0.4


class SynthConfig(BaseModel):
    classes: List[ClassPhenology]
    s2_gap_rate: float = Field(default=0.08, ge=0.0, lt=1.0)
    reflectance_noise: float = Field(default=0.02, ge=0.0)
    s1_noise_db: float = Field(default=0.6, ge=0.0)
    plot_prefix: str = "P"

    def check(self) -> "SynthConfig":
        """Raise SynthConfigError for duplicate names, empty classes or out-of-range reflectance"""
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise SynthConfigError(f"duplicate class names in {names}")
        for c in self.classes:
            if c.count <= 0:
                raise SynthConfigError(f"class {c.name}: non-positive count {c.count}")
            swing = abs(c.ndvi_amp) + abs(c.second_amp) + abs(c.flush_amp)
            if c.ndvi_base - swing < 0.02 or c.ndvi_base + swing > 0.97:
                raise SynthConfigError(
                    f"class {c.name}: NDVI {c.ndvi_base} +/- {swing} produces out-of-range reflectance")
            if c.nir_base <= 0 or c.nir_base * (1.0 + 0.6 * swing) * 1.04 > 1.0:
                raise SynthConfigError(f"class {c.name}: NIR level {c.nir_base} produces out-of-range reflectance")
            if c.swir_base <= 0 or c.swir_base * (1.0 + 0.5 * swing) > 1.0:
                raise SynthConfigError(f"class {c.name}: SWIR level {c.swir_base} produces out-of-range reflectance")
        return self

    @property
    def total(self) -> int:
        return sum(c.count for c in self.classes)


def _variant(profile: Dict, **changes) -> Dict:
    out = dict(profile)
    out.update(changes)
    return out


_PINUS = dict(ndvi_base=0.70, ndvi_amp=0.06, peak_month=6.5, nir_base=0.24, swir_base=0.14,
              swir_ratio=0.55, vv_db=-8.5, vh_db=-14.5, s1_amp=0.3)
_DARK_CONIFER = dict(ndvi_base=0.78, ndvi_amp=0.05, peak_month=6.0, nir_base=0.21, swir_base=0.11,
                     swir_ratio=0.50, vv_db=-8.0, vh_db=-14.0, s1_amp=0.3)
_LARIX = dict(ndvi_base=0.55, ndvi_amp=0.30, peak_month=6.5, nir_base=0.30, swir_base=0.15,
              vv_db=-8.3, vh_db=-14.3, s1_amp=0.8)
_BEECH = dict(ndvi_base=0.52, ndvi_amp=0.30, peak_month=6.0, second_amp=0.08, second_peak=4.5,
              nir_base=0.33, swir_base=0.16, vv_db=-7.8, vh_db=-13.6, s1_amp=0.9)
_QUERCUS = dict(ndvi_base=0.52, ndvi_amp=0.30, peak_month=7.2, flush_amp=0.12, flush_month=4.0, nir_base=0.31,
                swir_base=0.16, vv_db=-7.9, vh_db=-13.8, s1_amp=0.9)
_POPULUS = dict(ndvi_base=0.54, ndvi_amp=0.30, peak_month=5.5, second_amp=0.06, second_peak=8.0,
                nir_base=0.35, swir_base=0.17, vv_db=-7.5, vh_db=-13.4, s1_amp=1.0)
# Same seasonal curve as Quercus; only the flush month tells them apart
_OTHER_BROADLEAVES = _variant(_QUERCUS, flush_month=8.0)

SIMB_COUNTS = {
    "Pinus": 603, "Larix": 56, "Quercus": 288, "Beech": 58,
    "Populus": 72, "Other Broadleaves": 242, "DarkConifer": 160,
}
_SIMB_PROFILES = {
    "Pinus": _PINUS, "Larix": _LARIX, "Quercus": _QUERCUS, "Beech": _BEECH,
    "Populus": _POPULUS, "Other Broadleaves": _OTHER_BROADLEAVES, "DarkConifer": _DARK_CONIFER,
}
COMB_COUNTS = {
    "Pinus sylvestris": 513, "Other Pinus": 89, "Larix": 56, "Quercus robur petraea": 255,
    "Other Quercus": 33, "Fagus": 58, "Populus": 72, "Alnus": 30, "Betula": 58, "Fraxinus": 40,
    "Other broadleaved": 102, "Pseudotsuga menziesii": 90, "Picea": 66,
}
_COMB_PROFILES = {
    "Pinus sylvestris": _PINUS,
    "Other Pinus": _variant(_PINUS, ndvi_base=0.68, peak_month=6.8, nir_base=0.25),
    "Larix": _LARIX,
    "Quercus robur petraea": _QUERCUS,
    "Other Quercus": _variant(_QUERCUS, peak_month=7.5, ndvi_amp=0.27),
    "Fagus": _BEECH,
    "Populus": _POPULUS,
    "Alnus": _variant(_OTHER_BROADLEAVES, peak_month=6.0, ndvi_base=0.54),
    "Betula": _variant(_OTHER_BROADLEAVES, peak_month=5.8, ndvi_amp=0.28),
    "Fraxinus": _variant(_OTHER_BROADLEAVES, peak_month=7.6, ndvi_amp=0.32),
    "Other broadleaved": _OTHER_BROADLEAVES,
    "Pseudotsuga menziesii": _DARK_CONIFER,
    "Picea": _variant(_DARK_CONIFER, ndvi_base=0.76, peak_month=5.5, nir_base=0.22),
}
SIBA_COUNT = 1970


def preset(name: str) -> SynthConfig:
    """
    Class phenology presets shaped like the three inventory datasets

    simb: 7 aggregated classes, imbalanced (1,479 samples)
    comb: 13 dominant species, imbalanced (1,462 samples)
    siba: 7 aggregated classes, balanced (13,790 samples)
    """
    name = name.lower()
    if name == "simb":
        classes = [ClassPhenology(name=n, count=c, **_SIMB_PROFILES[n]) for n, c in SIMB_COUNTS.items()]
    elif name == "comb":
        classes = [ClassPhenology(name=n, count=c, **_COMB_PROFILES[n]) for n, c in COMB_COUNTS.items()]
    elif name == "siba":
        classes = [ClassPhenology(name=n, count=SIBA_COUNT, **_SIMB_PROFILES[n]) for n in SIMB_COUNTS]
    else:
        raise SynthConfigError(f"unknown preset '{name}' (expected comb, simb or siba)")
    return SynthConfig(classes=classes).check()


def _pulse(month: float) -> np.ndarray:
    """Unit bump centred on a month, in circular month distance"""
    distance = np.abs(np.arange(N_MONTHS) - month) % N_MONTHS
    distance = np.minimum(distance, N_MONTHS - distance)
    return np.exp(-0.5 * (distance / FLUSH_WIDTH) ** 2)


def _generate_class(phen: ClassPhenology, config: SynthConfig, rng: np.random.Generator):
    n = phen.count
    t = MONTH_T[None, :]
    base = phen.ndvi_base + rng.normal(0.0, phen.base_jitter, (n, 1))
    amp = phen.ndvi_amp * (1.0 + rng.normal(0.0, 0.1, (n, 1)))
    peak = phen.peak_month + rng.normal(0.0, phen.phase_jitter, (n, 1))
    ndvi = (base
            + amp * np.cos(2 * np.pi * (t - peak / N_MONTHS))
            + phen.second_amp * np.cos(4 * np.pi * (t - phen.second_peak / N_MONTHS))
            + phen.flush_amp * _pulse(phen.flush_month)
            + rng.normal(0.0, phen.noise, (n, N_MONTHS)))
    ndvi = np.clip(ndvi, 0.02, 0.97)

    def jitter(shape=(n, N_MONTHS)):
        return 1.0 + rng.normal(0.0, config.reflectance_noise, shape)

    nir = np.clip(phen.nir_base * (1.0 + 0.6 * (ndvi - phen.ndvi_base)), 0.02, None)
    red = nir * (1.0 - ndvi) / (1.0 + ndvi)
    swir = phen.swir_base * (1.0 - 0.5 * (ndvi - phen.ndvi_base))
    reflectance = {
        "B2": 0.75 * red,
        "B3": 0.6 * red + 0.12 * nir,
        "B4": red,
        "B5": red + _RED_EDGE_MIX["B5"] * (nir - red),
        "B6": red + _RED_EDGE_MIX["B6"] * (nir - red),
        "B7": red + _RED_EDGE_MIX["B7"] * (nir - red),
        "B8": nir,
        "B8A": 1.04 * nir,
        "B11": swir,
        "B12": phen.swir_ratio * swir,
    }
    s2 = np.stack([np.clip(reflectance[b.value] * jitter(), 0.0, None) * 10000.0 for b in S2_BANDS], axis=-1)

    season = np.cos(2 * np.pi * (t - peak / N_MONTHS))
    vv = phen.vv_db + phen.s1_amp * season + rng.normal(0.0, config.s1_noise_db, (n, N_MONTHS))
    vh = phen.vh_db + 1.5 * phen.s1_amp * season + rng.normal(0.0, config.s1_noise_db, (n, N_MONTHS))
    s1 = np.stack([vv, vh], axis=-1)

    gaps = rng.random((n, N_MONTHS)) < config.s2_gap_rate
    s2[gaps] = np.nan
    indices, _ = indices_from_s2(s2)
    spectral = np.concatenate([s1, s2, indices], axis=-1)

    precipitation = np.clip(0.07 + 0.02 * np.cos(2 * np.pi * (t - 10 / N_MONTHS))
                            + rng.normal(0.0, 0.01, (n, N_MONTHS)), 0.01, None)
    temperature = 283.15 + 8.0 * np.cos(2 * np.pi * (t - 6.5 / N_MONTHS)) + rng.normal(0.0, 1.0, (n, N_MONTHS))
    climate = np.stack([precipitation, temperature], axis=-1)

    lat = rng.uniform(51.3, 53.4, n)
    lon = rng.uniform(3.6, 7.1, n)
    elevation = np.clip(rng.gamma(1.5, 12.0, n) - 3.0, -5.0, 320.0)
    slope = np.clip(np.abs(rng.normal(0.0, 2.5, n)), 0.0, 39.0)
    return spectral, climate, lat, lon, elevation, slope


def synth_generate(config: SynthConfig, seed: int) -> Dataset:
    """
    Generate a labelled dataset whose classes differ mainly in seasonal dynamics

    Deterministic for a fixed seed: each class draws from its own stream
    spawned from the seed, so class counts never depend on the seed.

    Args:
        config: Class phenology configuration (see preset())
        seed: Master seed

    Returns:
        Dataset tagged "synthetic" with lexicographic class ids
    """
    config.check()
    streams = np.random.SeedSequence(seed).spawn(len(config.classes))
    ids = class_index([c.name for c in config.classes])

    samples = []
    counter = 0
    for phen, stream in zip(config.classes, streams):
        rng = np.random.default_rng(stream)
        spectral, climate, lat, lon, elevation, slope = _generate_class(phen, config, rng)
        label = SpeciesLabel(class_id=ids[phen.name], class_name=phen.name)
        for i in range(phen.count):
            counter += 1
            series = PixelTimeSeries(
                plot_id=f"{config.plot_prefix}{counter:05d}",
                spectral=spectral[i],
                climate=climate[i],
                dw=np.full(N_MONTHS, DW_TREE_CLASS, dtype=np.int64),
                elevation=float(elevation[i]),
                slope=float(slope[i]),
                lat=float(lat[i]),
                lon=float(lon[i]),
            )
            samples.append(Sample(series=series, label=label))

    logger.info(f"Generated {len(samples)} synthetic samples over {len(ids)} classes (seed {seed})")
    return Dataset(samples=samples, schema_tag="synthetic", class_names=sorted(ids))


def unlabeled_corpus(preset_name: str, size: int, seed: int, prefix: str = "U") -> List[PixelTimeSeries]:
    """
    Unlabelled pixels for encoder pre-training, disjoint from any labelled set

    Class shares follow the preset (largest remainder, at least one pixel per
    class); plot ids carry their own prefix so they never collide with
    labelled "P" plots.
    """
    config = preset(preset_name)
    if size < len(config.classes):
        raise SynthConfigError(f"corpus size {size} is below the {len(config.classes)} classes of '{preset_name}'")
    shares = np.array([c.count for c in config.classes], dtype=np.float64)
    exact = (size - len(shares)) * shares / shares.sum()
    counts = np.floor(exact).astype(int)
    remainder = size - len(shares) - counts.sum()
    counts[np.argsort(-(exact - counts), kind="stable")[:remainder]] += 1
    counts += 1
    config = config.model_copy(update={
        "classes": [c.model_copy(update={"count": int(k)}) for c, k in zip(config.classes, counts)],
        "plot_prefix": prefix,
    })
    series = synth_generate(config, seed).series
    logger.info(f"Built {len(series)}-pixel unlabelled corpus from preset {preset_name} (seed {seed})")
    return series


def dataset_statics(dataset: Dataset) -> List[StaticRecord]:
    return [
        StaticRecord(plot_id=s.plot_id, lat=s.lat, lon=s.lon, elevation_m=s.elevation, slope_deg=s.slope)
        for s in dataset.series
    ]


def dataset_labels(dataset: Dataset) -> Dict[str, str]:
    return {s.series.plot_id: s.label.class_name for s in dataset.samples}


def _dates(months: np.ndarray, day: int) -> pd.DatetimeIndex:
    return pd.to_datetime(pd.DataFrame({"year": 2020, "month": months + 1, "day": day}))


def dataset_to_observations(dataset: Dataset, seed: int,
                            cloud_threshold: float = DEFAULT_CLOUD_THRESHOLD) -> pd.DataFrame:
    """
    Expand monthly values into raw acquisitions in the ingestion schema

    Each observed month gets three clear acquisitions (v - d, v, v + d) whose
    median is exactly v, plus one cloudy S2 acquisition above the threshold
    with bright cloud values. Months missing from the dataset only carry the
    cloudy acquisition, so cloud filtering reproduces the gaps.
    """
    rng = np.random.default_rng(seed)
    plot_ids = np.array(dataset.plot_ids)
    spectral = np.stack([s.spectral for s in dataset.series])
    climate = np.stack([s.climate for s in dataset.series])
    n = len(plot_ids)
    frames = []

    def emit(idx: Tuple[np.ndarray, ...], day: int, band_names: np.ndarray, values: np.ndarray,
             cloud: Optional[np.ndarray]):
        plot_i, month_i, band_i = idx
        frames.append(pd.DataFrame({
            "plot_id": plot_ids[plot_i],
            "date": _dates(month_i, day).to_numpy(),
            "band": band_names[band_i],
            "value": values,
            "cloud_prob": np.nan if cloud is None else cloud,
        }))

    s2_names = np.array([b.value for b in S2_BANDS])
    s2 = spectral[:, :, len(S1_BANDS):len(S1_BANDS) + len(S2_BANDS)]
    present = ~np.isnan(s2)
    spread = np.where(present, np.nan_to_num(s2) * rng.uniform(0.01, 0.05, s2.shape), 0.0)
    clear_cloud = np.round(rng.uniform(0.0, min(60.0, cloud_threshold), (n, N_MONTHS, 3)), 1)
    for k, day in enumerate((5, 15, 25)):
        idx = np.nonzero(present)
        values = (s2 + (k - 1) * spread)[idx]
        emit(idx, day, s2_names, values, clear_cloud[idx[0], idx[1], k])

    cloudy_cloud = np.round(rng.uniform(min(cloud_threshold + 1.0, 100.0), 100.0, (n, N_MONTHS)), 1)
    bright = rng.uniform(1500.0, 6000.0, s2.shape)
    idx = np.nonzero(np.ones_like(present))
    emit(idx, 20, s2_names, bright[idx], cloudy_cloud[idx[0], idx[1]])

    s1_names = np.array([b.value for b in S1_BANDS])
    s1 = spectral[:, :, :len(S1_BANDS)]
    s1_present = ~np.isnan(s1)
    s1_spread = rng.uniform(0.1, 1.0, s1.shape)
    for k, day in enumerate((3, 13, 23)):
        idx = np.nonzero(s1_present)
        emit(idx, day, s1_names, (s1 + (k - 1) * s1_spread)[idx], None)

    climate_names = np.array([b.value for b in CLIMATE_BANDS])
    idx = np.nonzero(~np.isnan(climate))
    emit(idx, 15, climate_names, climate[idx], None)

    frame = pd.concat(frames, ignore_index=True)
    frame = frame.sort_values(["plot_id", "date", "band"], kind="mergesort").reset_index(drop=True)
    frame = frame[OBSERVATION_COLUMNS]
    logger.info(f"Expanded {n} plots into {len(frame)} observations")
    return frame
