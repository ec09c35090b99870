# Band, index and channel-group registry shared by every pipeline stage
from enum import Enum
from typing import Dict, List, Optional


class BandId(str, Enum):
    """Raw satellite bands, derived indices and climate/terrain variables"""
    # Sentinel-1 backscatter (dB)
    VV = "VV"
    VH = "VH"
    # Sentinel-2 digital numbers
    B2 = "B2"
    B3 = "B3"
    B4 = "B4"
    B5 = "B5"
    B6 = "B6"
    B7 = "B7"
    B8 = "B8"
    B8A = "B8A"
    B11 = "B11"
    B12 = "B12"
    # Indices computed from monthly S2 medians
    NDVI = "NDVI"
    NBR = "NBR"
    EVI = "EVI"
    TCB = "TCB"
    TCW = "TCW"
    TCG = "TCG"
    TCA = "TCA"
    # Climate (kelvin, meters) and terrain (meters, degrees)
    TEMPERATURE_2M = "temperature_2m"
    TOTAL_PRECIPITATION = "total_precipitation"
    ELEVATION = "elevation"
    SLOPE = "slope"


class ChannelGroup(str, Enum):
    """Encoder channel groups; the first nine are per-month, TG and Loc are static"""
    S1 = "S1"
    S2_RGB = "S2-RGB"
    S2_RE = "S2-RE"
    S2_NIR10 = "S2-NIR10"
    S2_NIR20 = "S2-NIR20"
    S2_SWIR = "S2-SWIR"
    NDVI = "NDVI"
    ERA5 = "ERA5"
    DW = "DW"
    TG = "TG"
    LOC = "Loc"


class Subset(str, Enum):
    """Sensor subsets used by the feature ablation"""
    S1 = "s1"
    S2 = "s2"
    S1S2 = "s1s2"


S1_BANDS: List[BandId] = [BandId.VV, BandId.VH]
S2_BANDS: List[BandId] = [
    BandId.B2, BandId.B3, BandId.B4, BandId.B5, BandId.B6,
    BandId.B7, BandId.B8, BandId.B8A, BandId.B11, BandId.B12,
]
RAW_BANDS: List[BandId] = S1_BANDS + S2_BANDS
INDEX_BANDS: List[BandId] = [
    BandId.NDVI, BandId.NBR, BandId.EVI,
    BandId.TCB, BandId.TCW, BandId.TCG, BandId.TCA,
]
# The 19-band monthly record used by the hand-crafted features
SPECTRAL_BANDS: List[BandId] = RAW_BANDS + INDEX_BANDS
CLIMATE_BANDS: List[BandId] = [BandId.TOTAL_PRECIPITATION, BandId.TEMPERATURE_2M]
TERRAIN_BANDS: List[BandId] = [BandId.ELEVATION, BandId.SLOPE]

# Bands that may appear in an observation CSV
OBSERVABLE_BANDS: List[BandId] = RAW_BANDS + CLIMATE_BANDS

DYNAMIC_GROUPS: List[ChannelGroup] = [
    ChannelGroup.S1, ChannelGroup.S2_RGB, ChannelGroup.S2_RE,
    ChannelGroup.S2_NIR10, ChannelGroup.S2_NIR20, ChannelGroup.S2_SWIR,
    ChannelGroup.NDVI, ChannelGroup.ERA5, ChannelGroup.DW,
]
STATIC_GROUPS: List[ChannelGroup] = [ChannelGroup.TG, ChannelGroup.LOC]
# Dynamic groups carrying real values (DW is categorical)
REAL_DYNAMIC_GROUPS: List[ChannelGroup] = [g for g in DYNAMIC_GROUPS if g != ChannelGroup.DW]

GROUP_BANDS: Dict[ChannelGroup, List[BandId]] = {
    ChannelGroup.S1: [BandId.VV, BandId.VH],
    ChannelGroup.S2_RGB: [BandId.B2, BandId.B3, BandId.B4],
    ChannelGroup.S2_RE: [BandId.B5, BandId.B6, BandId.B7],
    ChannelGroup.S2_NIR10: [BandId.B8],
    ChannelGroup.S2_NIR20: [BandId.B8A],
    ChannelGroup.S2_SWIR: [BandId.B11, BandId.B12],
    ChannelGroup.NDVI: [BandId.NDVI],
    ChannelGroup.ERA5: [BandId.TOTAL_PRECIPITATION, BandId.TEMPERATURE_2M],
    ChannelGroup.DW: [],
    ChannelGroup.TG: [BandId.ELEVATION, BandId.SLOPE],
    ChannelGroup.LOC: [],
}

# Input width of each group's projection
GROUP_WIDTH: Dict[ChannelGroup, int] = {g: len(b) for g, b in GROUP_BANDS.items()}
GROUP_WIDTH[ChannelGroup.LOC] = 3

# Real-valued dynamic channels in encoder order (15 channels)
DYNAMIC_CHANNELS: List[BandId] = [b for g in REAL_DYNAMIC_GROUPS for b in GROUP_BANDS[g]]

SEASONS: Dict[str, List[int]] = {
    "winter": [0, 1, 11],
    "spring": [2, 3, 4],
    "summer": [5, 6, 7],
    "autumn": [8, 9, 10],
}


def group_of(band: BandId) -> Optional[ChannelGroup]:
    """
    Channel group an encoder input band belongs to

    Hand-crafted-only indices (NBR, EVI, Tasseled Cap) are not encoder inputs
    and map to None.
    """
    for group, members in GROUP_BANDS.items():
        if band in members:
            return group
    return None


def group_slices() -> Dict[ChannelGroup, slice]:
    """Column slice of each real dynamic group inside DYNAMIC_CHANNELS"""
    slices = {}
    start = 0
    for group in REAL_DYNAMIC_GROUPS:
        width = GROUP_WIDTH[group]
        slices[group] = slice(start, start + width)
        start += width
    return slices


def bands_for_subset(subset: Subset) -> List[BandId]:
    """Spectral bands (raw + indices) belonging to a sensor subset"""
    subset = Subset(subset)
    if subset == Subset.S1:
        return list(S1_BANDS)
    if subset == Subset.S2:
        return list(S2_BANDS) + list(INDEX_BANDS)
    return list(SPECTRAL_BANDS)


def is_s2(band: BandId) -> bool:
    return band in S2_BANDS
