"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class MissingGradError(ValueError):
    pass


@dataclass
class AdamWState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Mapping[str, Tensor],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.1,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
) -> None:
    """Update every parameter in place from its ``.grad``.

    The decay term shrinks the parameter itself (``p -= lr * wd * p``) before the
    bias-corrected Adam step; gradients are left as they are.  ``lr`` may be zero
    (warmup start), in which case no parameter changes.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr == 0.0:
            continue
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
