import math
from datetime import date as Date
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from bands import (
    BandId, ChannelGroup, DYNAMIC_GROUPS, GROUP_BANDS, REAL_DYNAMIC_GROUPS,
    SPECTRAL_BANDS, CLIMATE_BANDS, is_s2,
)

N_MONTHS = 12
# Dynamic World class used for every forest pixel
DW_TREE_CLASS = 1


class Observation(BaseModel):
    """A single acquisition value for one plot and band"""
    plot_id: str
    date: Date
    band: BandId
    value: float
    cloud_prob: Optional[float] = Field(default=None, ge=0.0, le=100.0)

    @field_validator("date")
    @classmethod
    def _in_2020(cls, value: Date) -> Date:
        if value.year != 2020:
            raise ValueError(f"date {value.isoformat()} outside 2020")
        return value

    @model_validator(mode="after")
    def _check_value(self):
        if not math.isfinite(self.value):
            raise ValueError("value must be finite")
        if is_s2(self.band) and self.value < 0:
            raise ValueError(f"S2 value {self.value} is negative")
        return self

    @property
    def month(self) -> int:
        return self.date.month - 1


class StaticRecord(BaseModel):
    """Terrain and location attributes of a plot"""
    plot_id: str
    lat: float = Field(ge=-90.0, le=90.0)
    lon: float
    elevation_m: Optional[float] = None
    slope_deg: Optional[float] = None


class SpeciesLabel(BaseModel):
    class_id: int = Field(ge=0)
    class_name: str


def class_index(class_names: List[str]) -> Dict[str, int]:
    """Dense 0-based class ids in lexicographic order of the class name"""
    return {name: i for i, name in enumerate(sorted(set(class_names)))}


def unit_sphere(lat: float, lon: float) -> np.ndarray:
    """Cartesian coordinates of a latitude/longitude on the unit sphere"""
    phi = math.radians(lat)
    lam = math.radians(lon)
    return np.array([
        math.cos(phi) * math.cos(lam),
        math.cos(phi) * math.sin(lam),
        math.sin(phi),
    ])


class PixelTimeSeries(BaseModel):
    """
    Twelve monthly slots of one plot plus static attributes

    spectral holds the 19-band record (raw bands then indices) and climate the
    two ERA5 variables; NaN marks a missing slot. A group is either fully
    valued or fully missing in any month.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    plot_id: str
    spectral: np.ndarray
    climate: np.ndarray
    dw: np.ndarray
    elevation: float = float("nan")
    slope: float = float("nan")
    lat: float = Field(ge=-90.0, le=90.0)
    lon: float
    normalized: bool = False

    @model_validator(mode="after")
    def _check_shapes(self):
        self.spectral = np.asarray(self.spectral, dtype=np.float64)
        self.climate = np.asarray(self.climate, dtype=np.float64)
        self.dw = np.asarray(self.dw, dtype=np.int64)
        if self.spectral.shape != (N_MONTHS, len(SPECTRAL_BANDS)):
            raise ValueError(f"spectral must be {N_MONTHS}x{len(SPECTRAL_BANDS)}, got {self.spectral.shape}")
        if self.climate.shape != (N_MONTHS, len(CLIMATE_BANDS)):
            raise ValueError(f"climate must be {N_MONTHS}x{len(CLIMATE_BANDS)}, got {self.climate.shape}")
        if self.dw.shape != (N_MONTHS,):
            raise ValueError(f"dw must have {N_MONTHS} entries, got {self.dw.shape}")
        if np.any(self.dw < 0):
            raise ValueError("dw classes must be non-negative")
        for group in REAL_DYNAMIC_GROUPS:
            block = self.channels(group)
            partial = np.isnan(block).any(axis=1) & ~np.isnan(block).all(axis=1)
            if partial.any():
                months = np.flatnonzero(partial).tolist()
                raise ValueError(f"group {group.value} partially missing in months {months}")
        return self

    @property
    def loc(self) -> np.ndarray:
        return unit_sphere(self.lat, self.lon)

    def band(self, band: BandId) -> np.ndarray:
        """Monthly values of one spectral or climate band"""
        if band in SPECTRAL_BANDS:
            return self.spectral[:, SPECTRAL_BANDS.index(band)]
        if band in CLIMATE_BANDS:
            return self.climate[:, CLIMATE_BANDS.index(band)]
        raise KeyError(f"{band} is not a monthly band")

    def channels(self, group: ChannelGroup) -> np.ndarray:
        """(12, width) block of a real-valued dynamic group"""
        return np.stack([self.band(b) for b in GROUP_BANDS[group]], axis=1)

    def group_presence(self) -> np.ndarray:
        """(12, 9) presence mask over the dynamic groups"""
        mask = np.zeros((N_MONTHS, len(DYNAMIC_GROUPS)), dtype=bool)
        for j, group in enumerate(DYNAMIC_GROUPS):
            if group == ChannelGroup.DW:
                mask[:, j] = True
            else:
                mask[:, j] = ~np.isnan(self.channels(group)).any(axis=1)
        return mask

    def static_presence(self) -> np.ndarray:
        """Presence of the TG and Loc tokens"""
        has_tg = math.isfinite(self.elevation) and math.isfinite(self.slope)
        return np.array([has_tg, True])

    def copy_with(self, **changes) -> "PixelTimeSeries":
        data = {
            "plot_id": self.plot_id, "spectral": self.spectral.copy(),
            "climate": self.climate.copy(), "dw": self.dw.copy(),
            "elevation": self.elevation, "slope": self.slope,
            "lat": self.lat, "lon": self.lon, "normalized": self.normalized,
        }
        data.update(changes)
        return PixelTimeSeries(**data)


class Sample(BaseModel):
    series: PixelTimeSeries
    label: SpeciesLabel


class Dataset(BaseModel):
    """Labelled pixel time series sharing the January-December 2020 convention"""
    samples: List[Sample]
    schema_tag: Literal["COMB-13", "SIMB-7", "SIBA-7", "synthetic"] = "synthetic"
    class_names: List[str]

    @model_validator(mode="after")
    def _check_classes(self):
        if self.class_names != sorted(self.class_names):
            raise ValueError("class_names must be in lexicographic order")
        seen = {s.label.class_id for s in self.samples}
        missing = [i for i in range(len(self.class_names)) if i not in seen]
        if missing:
            raise ValueError(f"class ids without samples: {missing}")
        for sample in self.samples:
            if sample.label.class_id >= len(self.class_names):
                raise ValueError(f"class id {sample.label.class_id} out of range")
            if self.class_names[sample.label.class_id] != sample.label.class_name:
                raise ValueError(f"class id/name mismatch for {sample.series.plot_id}")
        return self

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def series(self) -> List[PixelTimeSeries]:
        return [s.series for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label.class_id for s in self.samples], dtype=np.int64)

    @property
    def plot_ids(self) -> List[str]:
        return [s.series.plot_id for s in self.samples]

    def class_counts(self) -> Dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.class_count)
        return {name: int(c) for name, c in zip(self.class_names, counts)}


class MonthlyComposite(BaseModel):
    """Per-band monthly medians for one plot; NaN with count 0 marks a missing band"""
    plot_id: str
    month: int = Field(ge=0, le=11)
    values: Dict[BandId, float]
    counts: Dict[BandId, int]

    def is_missing(self, band: BandId) -> bool:
        return self.counts.get(band, 0) == 0


class HarmonicFit(BaseModel):
    """Least-squares fit of P_t = b0 + b1 t + b2 cos(2 pi w t) + b3 sin(2 pi w t)"""
    band: BandId
    beta0: float
    beta1: float
    beta2: float
    beta3: float
    amplitude: float = Field(ge=0.0)
    phase: float
    rmse: float = Field(ge=0.0)
    omega: float = 1.0
    n_points: int
    t_values: List[float]

    def params(self) -> List[float]:
        """The seven classification parameters in registry order"""
        return [self.beta0, self.beta1, self.beta2, self.beta3,
                self.amplitude, self.phase, self.rmse]


class FeatureVector(BaseModel):
    """A classifier input tagged with where it came from"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    plot_id: str
    values: np.ndarray
    names: List[str]
    provenance: Literal["handcrafted", "deep"]

    @model_validator(mode="after")
    def _check_width(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.names),):
            raise ValueError(f"{len(self.names)} names for {self.values.shape} values")
        return self


class HandcraftedVector(FeatureVector):
    provenance: Literal["handcrafted"] = "handcrafted"
    subset: str
    feature_set: str
    # Registry names whose value could not be computed (imputed later)
    missing: List[str] = []


class DeepFeature(FeatureVector):
    provenance: Literal["deep"] = "deep"

    @model_validator(mode="after")
    def _check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite deep feature for {self.plot_id}")
        return self
