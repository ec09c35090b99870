import logging
from functools import lru_cache
from typing import Dict, Optional

from pydantic import BaseModel

from bands import BandId, CLIMATE_BANDS, S1_BANDS, S2_BANDS, SPECTRAL_BANDS
from config import AffineRule, default_run_config
from models import PixelTimeSeries

logger = logging.getLogger(__name__)

SOURCES = ("s1", "s2", "temperature", "precipitation", "elevation", "slope")


class NormalizationSpec(BaseModel):
    """Per-source affine rules applied before tokenization"""
    version: int = 1
    rules: Dict[str, AffineRule]

    @classmethod
    def from_config(cls, run_config) -> "NormalizationSpec":
        section = run_config.normalization
        rules = {name: getattr(section, name) for name in SOURCES}
        return cls(version=section.version, rules=rules)

    def rule_for(self, band: BandId) -> Optional[AffineRule]:
        """Rule of a band; indices other than the encoder inputs have none"""
        if band in S1_BANDS:
            return self.rules["s1"]
        if band in S2_BANDS:
            return self.rules["s2"]
        if band == BandId.TEMPERATURE_2M:
            return self.rules["temperature"]
        if band == BandId.TOTAL_PRECIPITATION:
            return self.rules["precipitation"]
        if band == BandId.ELEVATION:
            return self.rules["elevation"]
        if band == BandId.SLOPE:
            return self.rules["slope"]
        return None


@lru_cache(maxsize=1)
def default_spec() -> NormalizationSpec:
    return NormalizationSpec.from_config(default_run_config())


def _transform(series: PixelTimeSeries, spec: NormalizationSpec, inverse: bool) -> PixelTimeSeries:
    spectral = series.spectral.copy()
    for j, band in enumerate(SPECTRAL_BANDS):
        rule = spec.rule_for(band)
        if rule is not None:
            spectral[:, j] = rule.invert(spectral[:, j]) if inverse else rule.apply(spectral[:, j])
    climate = series.climate.copy()
    for j, band in enumerate(CLIMATE_BANDS):
        rule = spec.rule_for(band)
        climate[:, j] = rule.invert(climate[:, j]) if inverse else rule.apply(climate[:, j])
    elevation_rule = spec.rule_for(BandId.ELEVATION)
    slope_rule = spec.rule_for(BandId.SLOPE)
    fn = "invert" if inverse else "apply"
    return series.copy_with(
        spectral=spectral,
        climate=climate,
        elevation=float(getattr(elevation_rule, fn)(series.elevation)),
        slope=float(getattr(slope_rule, fn)(series.slope)),
        normalized=not inverse,
    )


def normalize(series: PixelTimeSeries, spec: Optional[NormalizationSpec] = None) -> PixelTimeSeries:
    """
    Apply every source's affine rule; NaN (missing) stays NaN

    Args:
        series: Pixel in native units
        spec: Normalization rules, defaults from configs/default.yaml

    Returns:
        New series flagged normalized
    """
    if series.normalized:
        logger.warning(f"{series.plot_id} is already normalized; returning it unchanged")
        return series
    return _transform(series, spec or default_spec(), inverse=False)


def denormalize(series: PixelTimeSeries, spec: Optional[NormalizationSpec] = None) -> PixelTimeSeries:
    """Inverse of normalize"""
    if not series.normalized:
        logger.warning(f"{series.plot_id} is in native units; returning it unchanged")
        return series
    return _transform(series, spec or default_spec(), inverse=True)
