# Deep feature path: normalization, tokenization, transformer encoder and pre-training

from encoder.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from encoder.model import (
    PhenoEncoder, backward, build_encoder, embed_dataset, encode, encoder_from_state, encoder_meta, load_encoder,
    save_encoder, tokenize,
)
from encoder.normalization import NormalizationSpec, default_spec, denormalize, normalize
from encoder.pretrain import PretrainConfig, PretrainResult, mae_pretrain, mask_tokens, write_loss_trace
from encoder.tokens import (
    N_TOKENS, SeriesBatch, Token, TokenSequence, TokenizationError, month_encoding, series_batch,
)

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "PhenoEncoder", "backward", "build_encoder", "embed_dataset", "encode", "encoder_from_state", "encoder_meta",
    "load_encoder", "save_encoder", "tokenize",
    "NormalizationSpec", "default_spec", "denormalize", "normalize",
    "PretrainConfig", "PretrainResult", "mae_pretrain", "mask_tokens", "write_loss_trace",
    "N_TOKENS", "SeriesBatch", "Token", "TokenSequence", "TokenizationError", "month_encoding",
    "series_batch",
]
