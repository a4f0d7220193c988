"""Adam updates and gradient clipping over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    lr_overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def _lr_for(self, name: str) -> float:
        for prefix, lr in self.lr_overrides.items():
            if name.startswith(prefix):
                return lr
        return self.lr


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One in-place Adam update; raises naming the parameter on NaN gradients."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise NumericError(
                f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state._lr_for(name) * mhat / (np.sqrt(vhat) + state.eps)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = np.asarray(max_norm / norm, dtype=np.float32)
        for name in grads:
            grads[name] = grads[name] * scale.astype(grads[name].dtype)
    return norm
