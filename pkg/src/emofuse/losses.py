"""Training objectives written against raw tensors."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import LabelError, ShapeError

DISTANCE_EPS = 1e-18


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits.

    The row max is subtracted before exponentiation so large logits
    cannot overflow.
    """
    if logits.dim() != 2:
        raise ShapeError(f"logits must be (batch, classes), got {tuple(logits.shape)}")
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels must be ({logits.shape[0]},), "
                         f"got {tuple(labels.shape)}")
    if labels.dtype.is_floating_point:
        raise LabelError(f"labels must be integers, got dtype {labels.dtype}")
    labels = labels.long()
    bad = (labels < 0) | (labels >= logits.shape[1])
    if bool(bad.any()):
        raise LabelError(f"labels out of range [0, {logits.shape[1]}): "
                         f"{labels[bad].tolist()}")
    shifted = logits - logits.max(dim=1, keepdim=True).values
    log_norm = shifted.exp().sum(dim=1).log()
    picked = shifted[torch.arange(logits.shape[0], device=logits.device), labels]
    return (log_norm - picked).mean()


@dataclass(frozen=True)
class ContrastiveConfig:
    """Margin hyperparameter for the pairwise embedding objective."""

    margin: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


def contrastive(za: torch.Tensor, zb: torch.Tensor, y: torch.Tensor,
                config: ContrastiveConfig = ContrastiveConfig()) -> torch.Tensor:
    """Mean pairwise loss: y pulls embeddings together, (1-y) pushes apart.

    Matched pairs (y=1) pay the squared distance; mismatched pairs pay the
    squared shortfall below the margin. A tiny epsilon under the square
    root keeps the gradient finite for identical embeddings.
    """
    if za.dim() != 2 or za.shape != zb.shape:
        raise ShapeError(f"embeddings must share shape (batch, dim), got "
                         f"{tuple(za.shape)} and {tuple(zb.shape)}")
    if y.dim() != 1 or y.shape[0] != za.shape[0]:
        raise ShapeError(f"y must be ({za.shape[0]},), got {tuple(y.shape)}")
    y = y.to(za.dtype)
    dsq = ((za - zb) ** 2).sum(dim=1)
    d = torch.sqrt(dsq + DISTANCE_EPS)
    attract = y * dsq
    repel = (1.0 - y) * torch.clamp(config.margin - d, min=0.0) ** 2
    return (attract + repel).mean()
