"""Huber next-point loss, router load-balance loss and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import RoutingStats
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    huber_delta: float = 1.0
    aux_weight: float = 0.02

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be non-negative, got {self.aux_weight}")


@dataclass
class LossBreakdown:
    ar_loss: Tensor
    aux_loss_per_layer: list[Tensor] = field(default_factory=list)
    total: Tensor | None = None

    def values(self) -> dict:
        return {
            "ar_loss": self.ar_loss.item(),
            "aux_loss": [a.item() for a in self.aux_loss_per_layer],
            "total": self.total.item(),
        }


def huber(y, y_hat, delta: float = 1.0) -> float:
    """Scalar Huber penalty of the residual ``y - y_hat``."""
    with T.no_grad():
        return T.huber(T.tensor(y_hat), T.tensor(y), delta).item()


def aux_load_balance(stats: RoutingStats, N: int | None = None) -> Tensor:
    """``N * sum_i f_i * P_i``; differentiable through the mean probabilities only."""
    N = stats.experts if N is None else N
    if stats.dispatch_fraction.shape != (N,) or stats.mean_prob.shape != (N,):
        raise T.ShapeError("aux_load_balance", stats.dispatch_fraction.shape, stats.mean_prob.shape)
    f = T.tensor(stats.dispatch_fraction)
    return T.scale(T.reduce_sum(T.mul(f, stats.mean_prob)), float(N))


def combined_loss(targets, preds, per_layer_stats: list[RoutingStats], cfg: LossConfig) -> LossBreakdown:
    """Mean Huber over all supervised positions plus ``aux_weight`` times the layer-mean aux loss."""
    preds = preds if isinstance(preds, Tensor) else T.tensor(preds)
    targets = targets if isinstance(targets, Tensor) else T.tensor(np.asarray(targets, dtype=np.float64))
    if targets.shape != preds.shape:
        raise ValueError(f"targets {targets.shape} and predictions {preds.shape} differ in shape")
    ar = T.reduce_mean(T.huber(preds, targets, cfg.huber_delta))
    aux = [aux_load_balance(s) for s in per_layer_stats]
    total = ar
    if aux and cfg.aux_weight > 0:
        mean_aux = T.scale(T.reduce_sum(T.concat(aux, axis=0)), 1.0 / len(aux))
        total = T.add(ar, T.scale(mean_aux, cfg.aux_weight))
    return LossBreakdown(ar, aux, total)
