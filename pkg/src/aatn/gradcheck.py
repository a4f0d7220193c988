"""Finite-difference verification of every differentiated loss path.

Runs on float64 shadow copies of tiny model instances (central differences,
h = 1e-3). Gradient-reversed paths are compared against the negated
numerical derivative, which checks the sign structure as well as the
magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .alignment import (AlignmentConfig, CriticParams, DiscriminatorParams,
                        NavigatorParams, adversarial_alignment_loss,
                        ct_alignment_loss, pairwise_cost, sinkhorn)
from .attention import EmpiricalPair
from .model import ModelConfig, ModelParams, cross_entropy, encoder_forward
from .tensor import Tape, Tensor, backward, tsum, zero_grads

FD_STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _fd_grad(f: Callable[[], float], t: Tensor, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def _max_rel_err(analytic: np.ndarray | None, fd: np.ndarray, sign: float) -> float:
    a = np.zeros_like(fd) if analytic is None else analytic
    denom = max(np.abs(fd).max(), 1e-8)
    return float(np.abs(a - sign * fd).max() / denom)


def _compare(loss_fn: Callable[[], Tensor], value_fn: Callable[[], float],
             signed_tensors: list[tuple[Tensor, float]]) -> float:
    """Backward once, then central-difference every tensor; returns max rel err."""
    zero_grads(t for t, _ in signed_tensors)
    with Tape():
        backward(loss_fn())
    worst = 0.0
    for t, sign in signed_tensors:
        fd = _fd_grad(value_fn, t)
        worst = max(worst, _max_rel_err(t.grad, fd, sign))
    return worst


def _random_pair(rng: np.random.Generator, w: int, d: int) -> EmpiricalPair:
    q = Tensor(rng.normal(0, 1, (w, d)), requires_grad=True, dtype=np.float64)
    k = Tensor(rng.normal(0, 1, (w, d)), requires_grad=True, dtype=np.float64)
    return EmpiricalPair(queries=q, keys=k)


def check_attention_stack(seed: int) -> float:
    """End-to-end gradient of the classifier cross-entropy through the encoder."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=11, d_model=8, n_heads=2, n_layers=1, w_max=4,
                      n_classes=3, d_ff=12, dropout_rate=0.0)
    params = ModelParams.build(cfg, rng, rng, dtype=np.float64)
    w = int(rng.integers(2, 5))
    tokens = rng.integers(0, cfg.vocab_size, size=(2, w))
    labels = rng.integers(0, cfg.n_classes, size=2)

    def loss() -> Tensor:
        res = encoder_forward(tokens, None, cfg, params, mode="eval")
        return cross_entropy(res.logits, labels)

    return _compare(loss, lambda: float(loss().data),
                    [(t, 1.0) for t in params.named_tensors().values()])


def check_adversarial_loss(seed: int, w: int = 4, d: int = 4) -> float:
    """Discriminator params follow the derivative; GRL flips the point inputs."""
    rng = np.random.default_rng(seed)
    pair = _random_pair(rng, w, d)
    disc = DiscriminatorParams.init(rng, d, d, dtype=np.float64)
    loss = lambda: adversarial_alignment_loss(pair, disc)
    tensors = [(pair.queries, -1.0), (pair.keys, -1.0)]
    tensors += [(t, 1.0) for t in disc.named().values()]
    return _compare(loss, lambda: float(loss().data), tensors)


def check_ot_loss(seed: int, w: int = 4, d: int = 4) -> float:
    """Gradient through the cost matrix with the transport plan held fixed."""
    rng = np.random.default_rng(seed)
    pair = _random_pair(rng, w, d)
    base_cost = pairwise_cost(pair, "sq_euclidean")
    plan, _ = sinkhorn(base_cost.data, epsilon=0.01, max_iters=500, tol=1e-9)
    plan_t = Tensor(plan.astype(np.float64))

    def loss() -> Tensor:
        return tsum(pairwise_cost(pair, "sq_euclidean") * plan_t)

    return _compare(loss, lambda: float(loss().data),
                    [(pair.queries, 1.0), (pair.keys, 1.0)])


def check_ct_loss(seed: int, w: int = 4, d: int = 4) -> float:
    """Gradients through points and navigator; critic params are reversed."""
    rng = np.random.default_rng(seed)
    pair = _random_pair(rng, w, d)
    nav = NavigatorParams.init(rng, d, d, dtype=np.float64)
    critic = CriticParams.init(rng, d, dtype=np.float64)
    loss = lambda: ct_alignment_loss(pair, nav, critic)
    tensors = [(pair.queries, 1.0), (pair.keys, 1.0)]
    tensors += [(t, 1.0) for t in nav.named().values()]
    tensors += [(t, -1.0) for t in critic.named().values()]
    return _compare(loss, lambda: float(loss().data), tensors)


CHECKS = (
    ("attention_stack", check_attention_stack),
    ("adversarial_loss", check_adversarial_loss),
    ("ot_loss", check_ot_loss),
    ("ct_loss", check_ct_loss),
)


def run_gradcheck(n_seeds: int = 20, base_seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        worst = 0.0
        for s in range(n_seeds):
            worst = max(worst, fn(base_seed + s))
        results.append(CheckResult(name, worst))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<20} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<20} {r.max_rel_err:>12.3e} {r.tol:>8.0e}  {status}")
    return "\n".join(lines)
