# MLP classifier head and the encoder + head fine-tuning loop
import copy
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch.utils.data import DataLoader, TensorDataset

from encoder.checkpoint import CheckpointError, load_checkpoint, load_state, save_checkpoint
from encoder.model import PhenoEncoder
from encoder.normalization import NormalizationSpec
from encoder.tokens import series_batch
from evaluation import stratified_indices
from models import PixelTimeSeries

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["epoch", "train_loss", "val_loss", "val_acc"]


class TrainingError(ValueError):
    """Training that cannot start or diverged"""


class TrainConfig(BaseModel):
    """Optimizer, schedule and selection settings shared by train_mlp and finetune"""
    lr: float = 1e-4
    weight_decay: float = 0.00746
    epochs: int = 100
    batch_size: int = 64
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    hidden: List[int] = [1024, 512, 256]
    bn_momentum: float = 0.1
    val_fraction: float = 0.15
    seed: int = 0

    @classmethod
    def from_config(cls, run_config, seed: Optional[int] = None) -> "TrainConfig":
        section = run_config.train
        return cls(lr=section.lr, weight_decay=section.weight_decay, epochs=section.epochs,
                   batch_size=section.batch_size, betas=tuple(section.betas), eps=section.eps,
                   hidden=list(section.hidden), bn_momentum=section.bn_momentum,
                   val_fraction=section.val_fraction, seed=run_config.seed if seed is None else seed)


class TraceRow(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


class MlpHead(nn.Module):
    """Linear -> BatchNorm -> ReLU per hidden width, then a linear layer to class logits"""

    def __init__(self, in_dim: int, n_classes: int, hidden: Sequence[int] = (1024, 512, 256),
                 bn_momentum: float = 0.1):
        super().__init__()
        self.in_dim = in_dim
        self.n_classes = n_classes
        layers: List[nn.Module] = []
        width = in_dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.BatchNorm1d(h, momentum=bn_momentum), nn.ReLU()]
            width = h
        self.hidden_layers = nn.Sequential(*layers)
        self.classifier = nn.Linear(width, n_classes)

    @property
    def hidden_widths(self) -> Tuple[int, ...]:
        return tuple(m.out_features for m in self.hidden_layers if isinstance(m, nn.Linear))

    def config(self) -> Dict:
        return {"in_dim": self.in_dim, "n_classes": self.n_classes, "hidden": list(self.hidden_widths),
                "bn_momentum": self.hidden_layers[1].momentum}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise TrainingError(f"feature width {x.shape[-1]} != head input width {self.in_dim}")
        # batch statistics are undefined for a single sample; use the running ones
        single = self.training and x.shape[0] == 1
        for layer in self.hidden_layers:
            if single and isinstance(layer, nn.BatchNorm1d):
                x = F.batch_norm(x, layer.running_mean, layer.running_var, layer.weight, layer.bias,
                                 training=False, eps=layer.eps)
            else:
                x = layer(x)
        return self.classifier(x)


def build_head(in_dim: int, n_classes: int, config: TrainConfig) -> MlpHead:
    torch.manual_seed(config.seed)
    return MlpHead(in_dim, n_classes, config.hidden, config.bn_momentum)


def mlp_forward(features: np.ndarray, head: MlpHead, mode: str = "eval") -> np.ndarray:
    """
    Class probabilities of a feature matrix

    mode "train" normalizes with batch statistics (and updates the running
    ones), "eval" with the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode '{mode}'")
    features = np.atleast_2d(np.asarray(features))
    dtype = next(head.parameters()).dtype
    was_training = head.training
    head.train(mode == "train")
    with torch.no_grad():
        logits = head(torch.as_tensor(features, dtype=dtype))
    head.train(was_training)
    return torch.softmax(logits.double(), dim=-1).numpy()


def mlp_predict(features: np.ndarray, head: MlpHead) -> Tuple[np.ndarray, np.ndarray]:
    """(labels, probabilities); argmax keeps the lower class id on ties"""
    probabilities = mlp_forward(features, head, "eval")
    return np.argmax(probabilities, axis=1), probabilities


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    head: MlpHead
    encoder: Optional[PhenoEncoder] = None
    trace: List[TraceRow]
    best_epoch: int
    best_val_loss: float
    first_encoder_grad_norm: Optional[float] = None


def validation_carve(labels: np.ndarray, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified (fit, validation) indices; at least one fitting sample per class"""
    labels = np.asarray(labels)
    if fraction <= 0:
        return np.arange(len(labels)), np.array([], dtype=np.int64)
    fit, val = stratified_indices(labels, 1.0 - fraction, seed, min_per_class=1)
    return fit, val


def _check_labels(labels: np.ndarray):
    if len(np.unique(labels)) < 2:
        raise TrainingError(f"training needs at least two classes, got {np.unique(labels).tolist()}")


def _train_loop(forward: Callable[..., torch.Tensor], modules: Dict[str, nn.Module],
                parameters: List[nn.Parameter], train_data: TensorDataset,
                val_data: Optional[TensorDataset], config: TrainConfig,
                on_first_batch: Optional[Callable[[], None]] = None) -> Tuple[List[TraceRow], int, float]:
    """Shared epoch loop; restores the best-validation-loss state of every module"""
    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(train_data, batch_size=config.batch_size, shuffle=True, generator=generator)
    optimizer = torch.optim.AdamW(parameters, lr=config.lr, betas=tuple(config.betas), eps=config.eps,
                                  weight_decay=config.weight_decay)
    trace: List[TraceRow] = []
    best_loss = math.inf
    best_epoch = 0
    best_state = None
    first = True

    for epoch in range(1, config.epochs + 1):
        for m in modules.values():
            m.train()
        total = 0.0
        count = 0
        for *inputs, target in loader:
            logits = forward(*inputs)
            loss = F.cross_entropy(logits, target)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} (batch of {len(target)})")
            optimizer.zero_grad()
            loss.backward()
            if first and on_first_batch is not None:
                on_first_batch()
            first = False
            optimizer.step()
            total += loss.item() * len(target)
            count += len(target)
        train_loss = total / count

        for m in modules.values():
            m.eval()
        if val_data is not None and len(val_data) > 0:
            *val_inputs, val_target = val_data.tensors
            with torch.no_grad():
                val_logits = forward(*val_inputs)
                val_loss = F.cross_entropy(val_logits, val_target).item()
                val_acc = (val_logits.argmax(dim=1) == val_target).double().mean().item()
        else:
            val_loss, val_acc = train_loss, float("nan")
        trace.append(TraceRow(epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_acc=val_acc))
        logger.info(f"Epoch {epoch}/{config.epochs}: train loss {train_loss:.4f}, "
                    f"val loss {val_loss:.4f}, val acc {val_acc:.4f}")

        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_state = {name: copy.deepcopy(m.state_dict()) for name, m in modules.items()}

    if best_state is None:
        raise TrainingError(f"no finite validation loss in {config.epochs} epoch(s)")
    for name, m in modules.items():
        m.load_state_dict(best_state[name])
        m.eval()
    logger.info(f"Selected epoch {best_epoch} (val loss {best_loss:.4f})")
    return trace, best_epoch, best_loss


def train_mlp(features: np.ndarray, labels: np.ndarray, config: TrainConfig,
              n_classes: Optional[int] = None) -> TrainResult:
    """
    Train an MLP head on a feature matrix with cross-entropy and AdamW

    A stratified validation share is carved from the input before training;
    the returned head holds the weights of the best-validation-loss epoch.

    Raises:
        TrainingError: Fewer than two classes, NaN features or a diverging loss
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels)
    if not np.all(np.isfinite(features)):
        raise TrainingError("features contain NaN or infinite values; impute first")
    n_classes = n_classes or int(labels.max()) + 1

    fit, val = validation_carve(labels, config.val_fraction, config.seed)
    if len(val) == 0:
        logger.warning("Empty validation split; selecting on training loss")
    head = build_head(features.shape[1], n_classes, config)
    x = torch.as_tensor(features, dtype=torch.float32)
    y = torch.as_tensor(labels)
    train_data = TensorDataset(x[fit], y[fit])
    val_data = TensorDataset(x[val], y[val]) if len(val) else None

    trace, best_epoch, best_loss = _train_loop(head, {"head": head}, list(head.parameters()),
                                               train_data, val_data, config)
    return TrainResult(head=head, trace=trace, best_epoch=best_epoch, best_val_loss=best_loss)


def _grad_norm(module: nn.Module) -> float:
    squares = [p.grad.detach().double().pow(2).sum() for p in module.parameters() if p.grad is not None]
    return float(torch.sqrt(torch.stack(squares).sum())) if squares else 0.0


def finetune(encoder: PhenoEncoder, head: Optional[MlpHead], series: Sequence[PixelTimeSeries],
             labels: np.ndarray, config: TrainConfig, n_classes: Optional[int] = None,
             freeze_encoder: bool = False, spec: Optional[NormalizationSpec] = None,
             deep_inputs: str = "all") -> TrainResult:
    """
    Train encoder and head end to end on labelled pixels

    With freeze_encoder the encoder is left bit-identical and only the head
    learns. The encoder gradient norm of the first batch is recorded.

    Args:
        encoder: Encoder, usually pre-trained
        head: Head over encoder features; built from config when None
        series: Training pixels only
        labels: Class ids aligned with series
        config: Optimizer and selection settings
    """
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels)
    n_classes = n_classes or int(labels.max()) + 1
    if head is None:
        head = build_head(encoder.feature_dim, n_classes, config)
    if head.in_dim != encoder.feature_dim:
        raise TrainingError(f"head input width {head.in_dim} != encoder feature width {encoder.feature_dim}")

    dtype = next(encoder.parameters()).dtype
    batch = series_batch(series, spec, deep_inputs, dtype=dtype)
    y = torch.as_tensor(labels)
    fit, val = validation_carve(labels, config.val_fraction, config.seed)
    tensors = batch.tensors()
    train_data = TensorDataset(*[t[fit] for t in tensors], y[fit])
    val_data = TensorDataset(*[t[val] for t in tensors], y[val]) if len(val) else None

    encoder.requires_grad_(not freeze_encoder)
    parameters = list(head.parameters()) + ([] if freeze_encoder else list(encoder.parameters()))
    modules = {"head": head} if freeze_encoder else {"encoder": encoder, "head": head}
    encoder.eval()
    grad_norm: Dict[str, float] = {}

    def forward(dynamic, dw, tg, loc, mask):
        return head(encoder(dynamic, dw, tg, loc, mask))

    def record_grad():
        grad_norm["first"] = _grad_norm(encoder)
        logger.info(f"First-batch encoder gradient norm {grad_norm['first']:.6g}")

    trace, best_epoch, best_loss = _train_loop(forward, modules, parameters, train_data, val_data,
                                               config, on_first_batch=record_grad)
    encoder.requires_grad_(True)
    encoder.eval()
    return TrainResult(head=head, encoder=encoder, trace=trace, best_epoch=best_epoch,
                       best_val_loss=best_loss, first_encoder_grad_norm=grad_norm.get("first"))


def write_trace(trace: Sequence[TraceRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([row.model_dump() for row in trace], columns=TRACE_COLUMNS)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)}-epoch training trace to {path}")
    return path


def save_head(head: MlpHead, path, class_names: Sequence[str], provenance: str):
    meta = {"kind": "mlp", **head.config(), "class_names": list(class_names), "provenance": provenance}
    return save_checkpoint(head.state_dict(), path, meta)


def load_head(path) -> Tuple[MlpHead, Dict]:
    meta, state = load_checkpoint(path)
    if meta.get("kind") != "mlp":
        raise CheckpointError(f"{path} holds a '{meta.get('kind')}' checkpoint, not an MLP head")
    head = MlpHead(int(meta["in_dim"]), int(meta["n_classes"]), [int(h) for h in meta["hidden"]],
                   float(meta["bn_momentum"]))
    load_state(head, state)
    head.eval()
    return head, meta
