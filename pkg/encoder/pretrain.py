# Masked-autoencoder pre-training of the encoder
import logging
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from einops import rearrange
from pydantic import BaseModel, ConfigDict, Field
from torch.utils.data import DataLoader, TensorDataset

from bands import DYNAMIC_GROUPS, GROUP_WIDTH, REAL_DYNAMIC_GROUPS
from models import N_MONTHS, PixelTimeSeries
from encoder.model import PhenoEncoder
from encoder.normalization import NormalizationSpec
from encoder.tokens import N_DYNAMIC, TG_SLOT, real_group_slots, series_batch

logger = logging.getLogger(__name__)

MaskStrategy = Literal["random", "group", "month"]
_REAL_INDEX = [DYNAMIC_GROUPS.index(g) for g in REAL_DYNAMIC_GROUPS]


class PretrainConfig(BaseModel):
    mask_ratio: float = 0.75
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    strategy: MaskStrategy = "random"
    decoder_depth: int = 1
    deep_inputs: Literal["all", "s1s2"] = "all"
    seed: int = 0

    @classmethod
    def from_config(cls, run_config, seed: Optional[int] = None) -> "PretrainConfig":
        section = run_config.pretrain
        return cls(mask_ratio=section.mask_ratio, epochs=section.epochs, batch_size=section.batch_size,
                   lr=section.lr, strategy=section.strategy, decoder_depth=section.decoder_depth,
                   deep_inputs=run_config.encoder.deep_inputs,
                   seed=run_config.seed if seed is None else seed)


class PretrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    encoder: PhenoEncoder
    decoder: nn.Module
    losses: List[float] = Field(default_factory=list)


class MaeDecoder(nn.Module):
    """Lightweight transformer that fills masked slots back to channel values"""

    def __init__(self, d_e: int, heads: int, ff_width: int, depth: int = 1):
        super().__init__()
        self.mask_token = nn.Parameter(torch.zeros(d_e))
        layer = nn.TransformerEncoderLayer(
            d_model=d_e, nhead=heads, dim_feedforward=ff_width, dropout=0.0,
            activation="gelu", batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)
        self.heads = nn.ModuleDict({g.value: nn.Linear(d_e, GROUP_WIDTH[g]) for g in REAL_DYNAMIC_GROUPS})
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, hidden: torch.Tensor, visible: torch.Tensor, masked: torch.Tensor,
                slot_encodings: torch.Tensor) -> torch.Tensor:
        """
        Args:
            hidden: (B, 110, d_e) encoder outputs (only visible slots are meaningful)
            visible, masked: (B, 110) slot flags
            slot_encodings: (110, d_e) encodings locating each slot

        Returns:
            (B, 12, 15) reconstructed normalized dynamic channels
        """
        filler = self.mask_token + slot_encodings
        x = torch.where(visible.unsqueeze(-1), hidden, filler.unsqueeze(0).expand_as(hidden))
        out = self.transformer(x, src_key_padding_mask=~(visible | masked))
        grid = rearrange(out[:, :TG_SLOT], "b (t g) d -> b t g d", g=N_DYNAMIC)
        parts = [self.heads[g.value](grid[:, :, DYNAMIC_GROUPS.index(g)]) for g in REAL_DYNAMIC_GROUPS]
        return torch.cat(parts, dim=-1)


def mask_tokens(present: torch.Tensor, ratio: float, strategy: MaskStrategy,
                generator: torch.Generator) -> torch.Tensor:
    """
    Choose masked slots among present real-valued dynamic tokens

    random: independent (month, group) tokens; group: whole groups across all
    months; month: a cyclic block of consecutive months. Static and DW slots
    are never masked.

    Returns:
        (B, 110) bool
    """
    b = present.shape[0]
    real = torch.zeros(present.shape[1], dtype=torch.bool)
    real[real_group_slots()] = True
    candidates = (present & real)[:, :TG_SLOT].reshape(b, N_MONTHS, N_DYNAMIC)

    if strategy == "random":
        flat = candidates.reshape(b, -1)
        scores = torch.rand(flat.shape, generator=generator)
        scores[~flat] = 2.0
        ranks = scores.argsort(dim=1).argsort(dim=1)
        n_mask = torch.clamp(torch.floor(flat.sum(dim=1) * ratio + 0.5), min=1).long()
        chosen = (ranks < n_mask.unsqueeze(1)) & flat
        chosen = chosen.reshape(b, N_MONTHS, N_DYNAMIC)
    elif strategy == "group":
        n_groups = max(1, int(len(_REAL_INDEX) * ratio + 0.5))
        order = torch.rand(b, len(_REAL_INDEX), generator=generator).argsort(dim=1)[:, :n_groups]
        pick = torch.zeros(b, N_DYNAMIC, dtype=torch.bool)
        pick.scatter_(1, torch.as_tensor(_REAL_INDEX)[order], True)
        chosen = candidates & pick.unsqueeze(1)
    elif strategy == "month":
        n_months = max(1, int(N_MONTHS * ratio + 0.5))
        start = torch.randint(0, N_MONTHS, (b, 1), generator=generator)
        months = (start + torch.arange(n_months).unsqueeze(0)) % N_MONTHS
        pick = torch.zeros(b, N_MONTHS, dtype=torch.bool)
        pick.scatter_(1, months, True)
        chosen = candidates & pick.unsqueeze(2)
    else:
        raise ValueError(f"unknown masking strategy '{strategy}'")

    masked = torch.zeros_like(present)
    masked[:, :TG_SLOT] = chosen.reshape(b, -1)
    # keep at least one visible token per pixel
    for i in torch.nonzero(~(present & ~masked).any(dim=1)).flatten().tolist():
        masked[i, torch.nonzero(masked[i]).flatten()[0]] = False
    return masked


def _channel_mask(masked: torch.Tensor) -> torch.Tensor:
    """(B, 110) slot mask -> (B, 12, 15) channel mask"""
    grid = masked[:, :TG_SLOT].reshape(masked.shape[0], N_MONTHS, N_DYNAMIC)
    parts = [grid[:, :, DYNAMIC_GROUPS.index(g)].unsqueeze(-1).expand(-1, -1, GROUP_WIDTH[g])
             for g in REAL_DYNAMIC_GROUPS]
    return torch.cat(parts, dim=-1)


def masked_loss(encoder: PhenoEncoder, decoder: MaeDecoder, dynamic, dw, tg, loc, present,
                masked) -> torch.Tensor:
    """Mean squared error over the channels of masked slots"""
    visible = present & ~masked
    tokens = encoder.embed_grid(dynamic, dw, tg, loc)
    hidden = encoder.encode_tokens(tokens, visible)
    reconstruction = decoder(hidden, visible, masked, encoder.slot_encodings())
    weights = _channel_mask(masked).to(reconstruction.dtype)
    total = weights.sum()
    if total == 0:
        return reconstruction.sum() * 0.0
    return (((reconstruction - dynamic) ** 2) * weights).sum() / total


def mae_pretrain(series: Sequence[PixelTimeSeries], encoder: PhenoEncoder, config: PretrainConfig,
                 spec: Optional[NormalizationSpec] = None) -> PretrainResult:
    """
    Train the encoder to reconstruct masked (month, group) tokens

    Labels are never read. Each epoch's mean masked-reconstruction loss goes
    into the trace; the same seed reproduces the same trace.

    Args:
        series: Unlabelled pixels (native or normalized units)
        encoder: Encoder to train in place
        config: Masking ratio, strategy, epochs and optimizer settings

    Returns:
        PretrainResult with the trained encoder, decoder and loss trace
    """
    if not series:
        raise ValueError("pre-training needs at least one pixel")
    if not 0.0 < config.mask_ratio < 1.0:
        raise ValueError(f"mask ratio {config.mask_ratio} outside (0, 1)")

    torch.manual_seed(config.seed)
    dtype = next(encoder.parameters()).dtype
    decoder = MaeDecoder(encoder.d_e, encoder.heads, encoder.ff_width, config.decoder_depth).to(dtype)
    batch = series_batch(series, spec, config.deep_inputs, dtype=dtype)
    data = TensorDataset(*batch.tensors())
    shuffle = torch.Generator().manual_seed(config.seed)
    masking = torch.Generator().manual_seed(config.seed + 1)
    loader = DataLoader(data, batch_size=config.batch_size, shuffle=True, generator=shuffle)
    optimizer = torch.optim.AdamW(list(encoder.parameters()) + list(decoder.parameters()), lr=config.lr)

    encoder.train()
    decoder.train()
    losses: List[float] = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        count = 0
        for dynamic, dw, tg, loc, present in loader:
            masked = mask_tokens(present, config.mask_ratio, config.strategy, masking)
            loss = masked_loss(encoder, decoder, dynamic, dw, tg, loc, present, masked)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(dynamic)
            count += len(dynamic)
        losses.append(total / count)
        logger.info(f"Pre-training epoch {epoch}/{config.epochs}: masked loss {losses[-1]:.6f}")

    encoder.eval()
    return PretrainResult(encoder=encoder, decoder=decoder, losses=losses)


def write_loss_trace(losses: Sequence[float], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"epoch": np.arange(1, len(losses) + 1), "loss": list(losses)}).to_csv(path, index=False)
    return path
