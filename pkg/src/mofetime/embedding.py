"""Point-wise gated embedding followed by causal dilated depthwise mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class EmbedParams:
    proj_w: Tensor        # (h, 1), swish branch
    proj_v: Tensor        # (h, 1), linear branch
    gate_logit: Tensor    # (1,), sigmoid -> mixing weight of the swish branch
    conv_filters: Tensor  # (K, h)
    out_w: Tensor         # (h, h), applied as x @ out_w
    out_b: Tensor         # (h,)
    dilation: int = 2

    @property
    def kernel_size(self) -> int:
        return self.conv_filters.shape[0]

    @property
    def h(self) -> int:
        return self.proj_w.shape[0]


def init_embed(h: int, kernel_size: int, dilation: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if kernel_size < 1 or dilation < 1:
        raise ValueError("kernel_size and dilation must be >= 1")
    bound = 1.0 / np.sqrt(h)
    return {
        "proj_w": rng.uniform(-1.0, 1.0, size=(h, 1)),
        "proj_v": rng.uniform(-1.0, 1.0, size=(h, 1)),
        "gate_logit": np.zeros(1),
        "conv": np.zeros((kernel_size, h)),
        "out.w": rng.uniform(-bound, bound, size=(h, h)),
        # a zero bias would map a zero first sample to an all-zero token, which
        # ties every router logit downstream
        "out.b": rng.uniform(-bound, bound, size=h),
    }


def pointwise_embed(x, p: EmbedParams) -> Tensor:
    """Map every scalar of ``x`` (..., T) to an h-vector: (..., T, h).

    ``alpha * swish(W x) + (1 - alpha) * V x`` with ``alpha = sigmoid(gate_logit)``.
    """
    x = x if isinstance(x, Tensor) else T.tensor(x)
    h = p.h
    col = T.reshape(x, x.shape + (1,))
    zw = T.matmul(col, T.transpose(p.proj_w))
    zv = T.matmul(col, T.transpose(p.proj_v))
    alpha = T.broadcast_to(T.sigmoid(p.gate_logit), (h,))
    return T.add(T.mul(T.swish(zw), alpha), T.mul(zv, T.sub(T.tensor(np.ones(h)), alpha)))


def dilated_context_mix(E: Tensor, p: EmbedParams) -> Tensor:
    """Residual causal depthwise conv over time, then the row-wise output linear map."""
    mixed = T.add(E, T.depthwise_dilated_conv1d(E, p.conv_filters, p.dilation))
    return T.add(T.matmul(mixed, p.out_w), p.out_b)
