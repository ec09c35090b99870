# Channel-group transformer encoder producing the deep feature of a pixel
import logging
import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from bands import ChannelGroup, DYNAMIC_GROUPS, GROUP_WIDTH, REAL_DYNAMIC_GROUPS, group_slices
from models import DW_TREE_CLASS, DeepFeature, N_MONTHS, PixelTimeSeries
from encoder.checkpoint import CheckpointError, load_checkpoint, load_state, save_checkpoint
from encoder.normalization import NormalizationSpec
from encoder.tokens import (
    N_DYNAMIC, TokenSequence, TokenizationError,
    month_encoding, series_batch, sinusoidal_encoding,
)

logger = logging.getLogger(__name__)


class PhenoEncoder(nn.Module):
    """
    Per-group projections, learned channel encodings and a transformer stack

    Token embeddings are h_C(x) + [p_channel; p_sin; p_month]. The encoding
    width d_e is split in thirds with the remainder going to p_channel. TG
    tokens carry only the channel part, Loc tokens no encoding at all.
    """

    def __init__(self, d_e: int = 128, depth: int = 2, heads: int = 8, ff_width: int = 256,
                 feature_dim: int = 128, dw_classes: int = 9):
        super().__init__()
        if d_e % heads != 0:
            raise ValueError(f"d_e={d_e} is not divisible by heads={heads}")
        self.d_e = d_e
        self.depth = depth
        self.heads = heads
        self.ff_width = ff_width
        self.feature_dim = feature_dim
        self.dw_classes = dw_classes
        self.enc_dim = d_e // 3
        self.channel_dim = d_e - 2 * self.enc_dim

        groups = REAL_DYNAMIC_GROUPS + [ChannelGroup.TG, ChannelGroup.LOC]
        self.projections = nn.ModuleDict({g.value: nn.Linear(GROUP_WIDTH[g], d_e) for g in groups})
        self.dw_embedding = nn.Embedding(dw_classes, d_e)
        # Nine dynamic groups plus TG
        self.channel_embed = nn.Parameter(torch.empty(N_DYNAMIC + 1, self.channel_dim))
        self.register_buffer("position_table", torch.as_tensor(
            sinusoidal_encoding(N_MONTHS, self.enc_dim), dtype=torch.float32))
        self.register_buffer("month_table", torch.as_tensor(
            np.stack([month_encoding(m, self.enc_dim) for m in range(N_MONTHS)]), dtype=torch.float32))

        layer = nn.TransformerEncoderLayer(
            d_model=d_e, nhead=heads, dim_feedforward=ff_width, dropout=0.0,
            activation="gelu", batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)
        self.output = nn.Linear(d_e, feature_dim)
        self._slices = group_slices()
        self.reset_parameters()

    def reset_parameters(self):
        """Symmetric uniform init scaled by fan-in; norms keep unit scale"""
        for name, param in self.named_parameters():
            if "norm" in name:
                continue
            fan_in = param.shape[-1] if param.dim() > 1 else param.shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(param, -bound, bound)

    def config(self) -> Dict[str, int]:
        return {
            "d_e": self.d_e, "depth": self.depth, "heads": self.heads, "ff_width": self.ff_width,
            "feature_dim": self.feature_dim, "dw_classes": self.dw_classes,
        }

    def slot_encodings(self) -> torch.Tensor:
        """(110, d_e) encoding added to each grid slot"""
        channel = self.channel_embed[:N_DYNAMIC].unsqueeze(0).expand(N_MONTHS, -1, -1)
        position = self.position_table.unsqueeze(1).expand(-1, N_DYNAMIC, -1)
        month = self.month_table.unsqueeze(1).expand(-1, N_DYNAMIC, -1)
        dynamic = rearrange(torch.cat([channel, position, month], dim=-1), "t g d -> (t g) d")
        zeros = torch.zeros(2 * self.enc_dim, dtype=dynamic.dtype, device=dynamic.device)
        tg = torch.cat([self.channel_embed[N_DYNAMIC], zeros]).unsqueeze(0)
        loc = torch.zeros(1, self.d_e, dtype=dynamic.dtype, device=dynamic.device)
        return torch.cat([dynamic, tg, loc], dim=0)

    def embed_grid(self, dynamic: torch.Tensor, dw: torch.Tensor, tg: torch.Tensor,
                   loc: torch.Tensor) -> torch.Tensor:
        """(B, 110, d_e) embeddings of every grid slot, present or not"""
        if dynamic.shape[-1] != sum(GROUP_WIDTH[g] for g in REAL_DYNAMIC_GROUPS):
            raise TokenizationError(f"dynamic input width {dynamic.shape[-1]} does not match the group widths")
        if dw.numel() and int(dw.max()) >= self.dw_classes:
            raise TokenizationError(f"DW class {int(dw.max())} outside the {self.dw_classes}-row table")
        per_group = []
        for group in DYNAMIC_GROUPS:
            if group == ChannelGroup.DW:
                per_group.append(self.dw_embedding(dw))
            else:
                per_group.append(self.projections[group.value](dynamic[..., self._slices[group]]))
        grid = rearrange(torch.stack(per_group, dim=2), "b t g d -> b (t g) d")
        static = torch.stack([
            self.projections[ChannelGroup.TG.value](tg),
            self.projections[ChannelGroup.LOC.value](loc),
        ], dim=1)
        return torch.cat([grid, static], dim=1) + self.slot_encodings()

    def encode_tokens(self, tokens: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Transformer outputs for (B, n, d_e) tokens; mask marks present tokens"""
        padding = None if mask is None else ~mask
        return self.transformer(tokens, src_key_padding_mask=padding)

    def pool(self, hidden: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Mean over present tokens projected to feature_dim"""
        if mask is None:
            pooled = hidden.mean(dim=1)
        else:
            weights = mask.unsqueeze(-1).to(hidden.dtype)
            pooled = (hidden * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1.0)
        return self.output(pooled)

    def forward(self, dynamic: torch.Tensor, dw: torch.Tensor, tg: torch.Tensor, loc: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        tokens = self.embed_grid(dynamic, dw, tg, loc)
        hidden = self.encode_tokens(tokens, mask)
        return self.pool(hidden, mask)


def build_encoder(run_config, seed: Optional[int] = None) -> PhenoEncoder:
    """Encoder shaped by the config's encoder section, initialized from seed"""
    if seed is not None:
        torch.manual_seed(seed)
    section = run_config.encoder
    return PhenoEncoder(d_e=section.d_e, depth=section.depth, heads=section.heads,
                        ff_width=section.ff_width, feature_dim=section.feature_dim,
                        dw_classes=section.dw_classes)


def _param_dtype(encoder: PhenoEncoder) -> torch.dtype:
    return next(encoder.parameters()).dtype


def tokenize(series: PixelTimeSeries, encoder: PhenoEncoder, spec: Optional[NormalizationSpec] = None,
             deep_inputs: str = "all") -> TokenSequence:
    """
    Embed the present (month, group) pairs and static attributes of one pixel

    DW months are looked up with the constant tree class. Absent pairs
    produce no token.
    """
    if np.any(series.dw != DW_TREE_CLASS):
        logger.debug(f"{series.plot_id}: DW classes other than {DW_TREE_CLASS} present")
    batch = series_batch([series], spec, deep_inputs, dtype=_param_dtype(encoder))
    grid = encoder.embed_grid(batch.dynamic, batch.dw, batch.tg, batch.loc)[0]
    present = batch.mask[0]
    slots = torch.nonzero(present).flatten().tolist()
    mask = present.numpy()
    return TokenSequence(
        plot_id=series.plot_id,
        embeddings=grid[present],
        slots=slots,
        presence=mask[: N_MONTHS * N_DYNAMIC].reshape(N_MONTHS, N_DYNAMIC),
        static_presence=mask[N_MONTHS * N_DYNAMIC:],
    )


def _encode_sequence(tokens: TokenSequence, encoder: PhenoEncoder) -> torch.Tensor:
    if len(tokens) == 0:
        raise TokenizationError(f"{tokens.plot_id}: empty token sequence")
    hidden = encoder.encode_tokens(tokens.embeddings.unsqueeze(0))
    return encoder.pool(hidden)[0]


def encode(tokens: TokenSequence, encoder: PhenoEncoder) -> DeepFeature:
    """Transformer pass, mean pool and projection to the deep feature"""
    with torch.no_grad():
        feature = _encode_sequence(tokens, encoder)
    values = feature.detach().cpu().double().numpy()
    return DeepFeature(plot_id=tokens.plot_id, values=values,
                       names=[f"deep_{i:03d}" for i in range(len(values))])


def backward(tokens: TokenSequence, encoder: PhenoEncoder,
             upstream: torch.Tensor) -> Dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of <upstream, encode(tokens)> for every named parameter

    tokens must come from tokenize() with gradients enabled; parameters the
    output does not depend on get zero gradients.
    """
    upstream = torch.as_tensor(upstream, dtype=tokens.embeddings.dtype)
    if upstream.shape != (encoder.feature_dim,):
        raise ValueError(f"upstream gradient shape {tuple(upstream.shape)} != ({encoder.feature_dim},)")
    if not tokens.embeddings.requires_grad:
        raise ValueError("token embeddings are detached; tokenize with gradients enabled")
    feature = _encode_sequence(tokens, encoder)
    names, params = zip(*[(n, p) for n, p in encoder.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(feature, params, grad_outputs=upstream, retain_graph=True, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}


def embed_dataset(series, encoder: PhenoEncoder, spec: Optional[NormalizationSpec] = None,
                  deep_inputs: str = "all", batch_size: int = 256) -> np.ndarray:
    """(N, feature_dim) deep features in eval mode"""
    was_training = encoder.training
    encoder.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(series), batch_size):
            batch = series_batch(series[start:start + batch_size], spec, deep_inputs,
                                 dtype=_param_dtype(encoder))
            out.append(encoder(*batch.tensors()).double().cpu().numpy())
    encoder.train(was_training)
    features = np.concatenate(out) if out else np.zeros((0, encoder.feature_dim))
    if not np.all(np.isfinite(features)):
        raise TokenizationError("non-finite deep features")
    return features


def encoder_meta(encoder: PhenoEncoder, seed: int, normalization_version: int = 1, deep_inputs: str = "all",
                 seen_plots: Sequence[str] = ()) -> Dict:
    """
    Checkpoint meta of an encoder

    seen_plots lists every plot whose pixels reached the encoder's weights
    (pre-training corpus, fine-tuning rows), so evaluation can refuse a test
    split that overlaps it.
    """
    return {"kind": "encoder", **encoder.config(), "seed": seed,
            "normalization_version": normalization_version, "deep_inputs": deep_inputs,
            "seen_plots": sorted(set(seen_plots))}


def save_encoder(encoder: PhenoEncoder, path, seed: int, normalization_version: int = 1,
                 deep_inputs: str = "all", seen_plots: Sequence[str] = ()):
    meta = encoder_meta(encoder, seed, normalization_version, deep_inputs, seen_plots)
    return save_checkpoint(encoder.state_dict(), path, meta)


def encoder_from_state(meta: Dict, state: Dict[str, torch.Tensor], source: str = "checkpoint") -> PhenoEncoder:
    """Build an encoder from a (meta, state) pair in eval mode"""
    if meta.get("kind") != "encoder":
        raise CheckpointError(f"{source} holds a '{meta.get('kind')}' checkpoint, not an encoder")
    try:
        encoder = PhenoEncoder(**{k: int(meta[k]) for k in
                                  ("d_e", "depth", "heads", "ff_width", "feature_dim", "dw_classes")})
    except KeyError as e:
        raise CheckpointError(f"{source}: meta section lacks {e}") from e
    dtype = state["channel_embed"].dtype if "channel_embed" in state else torch.float32
    encoder = encoder.to(dtype)
    load_state(encoder, state)
    encoder.eval()
    return encoder


def load_encoder(path) -> Tuple[PhenoEncoder, Dict]:
    """Rebuild an encoder from its checkpoint; returns (encoder, meta)"""
    meta, state = load_checkpoint(path)
    encoder = encoder_from_state(meta, state, str(path))
    logger.info(f"Loaded encoder from {path} (d_e {encoder.d_e}, depth {encoder.depth}, seed {meta.get('seed')}, "
                f"{len(meta.get('seen_plots') or [])} seen plots)")
    return encoder, meta
