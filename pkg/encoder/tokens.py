# Token layout, positional/month encodings and batched input tensors
import logging
import math
from typing import List, Literal, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict

from bands import ChannelGroup, DYNAMIC_CHANNELS, DYNAMIC_GROUPS, REAL_DYNAMIC_GROUPS, STATIC_GROUPS
from models import N_MONTHS, PixelTimeSeries
from encoder.normalization import NormalizationSpec, normalize

logger = logging.getLogger(__name__)

N_DYNAMIC = len(DYNAMIC_GROUPS)
N_TOKENS = N_MONTHS * N_DYNAMIC + len(STATIC_GROUPS)
TG_SLOT = N_MONTHS * N_DYNAMIC
LOC_SLOT = TG_SLOT + 1
# Groups kept when the deep path runs on S1 and S2 only
S1S2_GROUPS = [
    ChannelGroup.S1, ChannelGroup.S2_RGB, ChannelGroup.S2_RE,
    ChannelGroup.S2_NIR10, ChannelGroup.S2_NIR20, ChannelGroup.S2_SWIR,
]


class TokenizationError(ValueError):
    """Input that cannot be turned into a token sequence"""


def month_encoding(month: int, width: int) -> np.ndarray:
    """
    Alternating sin(2 pi m / 12), cos(2 pi m / 12) entries tiled to width

    Months three apart are orthogonal, months six apart antipodal.
    """
    if not 0 <= month < N_MONTHS:
        raise ValueError(f"month {month} outside 0..{N_MONTHS - 1}")
    angle = 2.0 * math.pi * month / N_MONTHS
    out = np.empty(width)
    out[0::2] = math.sin(angle)
    out[1::2] = math.cos(angle)
    return out


def sinusoidal_encoding(positions: int, width: int) -> np.ndarray:
    """Standard transformer encoding: sin on even, cos on odd columns"""
    pos = np.arange(positions)[:, None]
    div = np.exp(np.arange(0, width, 2) * (-math.log(10000.0) / max(width, 1)))
    table = np.zeros((positions, width))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: width // 2])
    return table


def slot_group(slot: int) -> ChannelGroup:
    if slot < TG_SLOT:
        return DYNAMIC_GROUPS[slot % N_DYNAMIC]
    return STATIC_GROUPS[slot - TG_SLOT]


def slot_month(slot: int) -> Optional[int]:
    return slot // N_DYNAMIC if slot < TG_SLOT else None


class Token(BaseModel):
    """One row of the transformer input"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    group: ChannelGroup
    month: Optional[int] = None
    embedding: np.ndarray
    is_masked: bool = False


class TokenSequence(BaseModel):
    """
    Present tokens of one pixel, in grid order (months x dynamic groups, TG, Loc)

    embeddings stays attached to the autograd graph of the encoder that built
    it, so gradients can be taken through it.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    plot_id: str
    embeddings: torch.Tensor
    slots: List[int]
    presence: np.ndarray
    static_presence: np.ndarray

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def tokens(self) -> List[Token]:
        rows = self.embeddings.detach().cpu().numpy()
        return [Token(group=slot_group(s), month=slot_month(s), embedding=rows[i])
                for i, s in enumerate(self.slots)]

    def permuted(self, order: Sequence[int]) -> "TokenSequence":
        order = list(order)
        return self.model_copy(update={
            "embeddings": self.embeddings[order],
            "slots": [self.slots[i] for i in order],
        })


class SeriesBatch(BaseModel):
    """Token-grid inputs of several pixels as tensors"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    plot_ids: List[str]
    dynamic: torch.Tensor   # (B, 12, 15) normalized, missing = 0
    dw: torch.Tensor        # (B, 12) class ids
    tg: torch.Tensor        # (B, 2)
    loc: torch.Tensor       # (B, 3)
    mask: torch.Tensor      # (B, 110) token present

    def __len__(self) -> int:
        return len(self.plot_ids)

    def tensors(self):
        return self.dynamic, self.dw, self.tg, self.loc, self.mask


def presence_mask(series: PixelTimeSeries, deep_inputs: Literal["all", "s1s2"] = "all") -> np.ndarray:
    """(110,) token presence in grid order"""
    dynamic = series.group_presence()
    static = series.static_presence()
    if deep_inputs == "s1s2":
        keep = np.array([g in S1S2_GROUPS for g in DYNAMIC_GROUPS])
        dynamic = dynamic & keep[None, :]
        static = np.zeros_like(static)
    return np.concatenate([dynamic.reshape(-1), static])


def series_batch(series: Sequence[PixelTimeSeries], spec: Optional[NormalizationSpec] = None,
                 deep_inputs: Literal["all", "s1s2"] = "all",
                 dtype: torch.dtype = torch.float32) -> SeriesBatch:
    """
    Normalize pixels (if needed) and lay them out on the 110-slot token grid

    Raises:
        TokenizationError: A pixel left without any present token
    """
    normalized = [s if s.normalized else normalize(s, spec) for s in series]
    dynamic = np.stack([np.stack([s.band(b) for b in DYNAMIC_CHANNELS], axis=1) for s in normalized]) \
        if normalized else np.zeros((0, N_MONTHS, len(DYNAMIC_CHANNELS)))
    masks = np.stack([presence_mask(s, deep_inputs) for s in normalized]) \
        if normalized else np.zeros((0, N_TOKENS), dtype=bool)
    empty = ~masks.any(axis=1)
    if empty.any():
        first = normalized[int(np.flatnonzero(empty)[0])].plot_id
        raise TokenizationError(f"{int(empty.sum())} pixel(s) without any present token, first {first}")

    tg = np.array([[s.elevation, s.slope] for s in normalized]).reshape(-1, 2)
    loc = np.array([s.loc for s in normalized]).reshape(-1, 3)
    dw = np.stack([s.dw for s in normalized]) if normalized else np.zeros((0, N_MONTHS), dtype=np.int64)
    return SeriesBatch(
        plot_ids=[s.plot_id for s in normalized],
        dynamic=torch.as_tensor(np.nan_to_num(dynamic, nan=0.0), dtype=dtype),
        dw=torch.as_tensor(dw, dtype=torch.long),
        tg=torch.as_tensor(np.nan_to_num(tg, nan=0.0), dtype=dtype),
        loc=torch.as_tensor(loc, dtype=dtype),
        mask=torch.as_tensor(masks, dtype=torch.bool),
    )


def real_group_slots() -> List[int]:
    """Grid slots of the real-valued dynamic groups (maskable during pre-training)"""
    real = {DYNAMIC_GROUPS.index(g) for g in REAL_DYNAMIC_GROUPS}
    return [s for s in range(TG_SLOT) if s % N_DYNAMIC in real]
