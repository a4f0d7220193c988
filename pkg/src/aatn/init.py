"""Parameter initialization (Glorot-uniform weights, zero biases)."""

from __future__ import annotations

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


def glorot(rng: np.random.Generator, shape: tuple[int, ...],
           dtype=DEFAULT_DTYPE) -> Tensor:
    """Glorot/Xavier uniform draw; fan from the last two dims (or the vector length)."""
    if len(shape) >= 2:
        fan_in, fan_out = shape[-2], shape[-1]
    else:
        fan_in = fan_out = shape[0]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype),
                  requires_grad=True)


def zeros(shape: tuple[int, ...], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape: tuple[int, ...], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
