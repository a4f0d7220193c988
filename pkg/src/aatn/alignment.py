"""Query/key distribution-matching losses over empirical point pairs.

Three interchangeable methods:

* ``adversarial`` — a shared highway discriminator scores points; the
  summed log-likelihood value is returned, with the query/key inputs
  routed through a gradient-reversal node so that a single minimizing
  optimizer drives the discriminator and the projections in opposite
  directions.
* ``ot`` — entropic optimal transport: squared-Euclidean cost (scaled by
  1/d), transport plan from log-domain Sinkhorn iterations, plan treated
  as a constant so gradients flow through the cost matrix only.
* ``ct`` — bidirectional conditional transport: a navigator MLP defines
  softmax conditionals in both directions, a highway critic defines a
  cosine point cost, and the critic parameters are gradient-reversed so
  they are driven to maximize the expected cost while everything else
  minimizes it.

All losses are evaluated exactly over the discrete supports (no
sampling) and are computed vectorized over many (sample, head) pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import MASK_FILL, EmpiricalPair
from .errors import ConfigError, ContractError, NumericError
from .init import glorot, zeros
from .tensor import (Tensor, clamp, gradient_reversal, leaky_relu, matmul,
                     relu, reshape, sigmoid, softmax, sqrt, stack, tlog,
                     transpose, tsum)

log = logging.getLogger(__name__)

METHODS = ("none", "adversarial", "ot", "ct")
PROB_CLAMP = 1e-7


@dataclass
class AlignmentConfig:
    """Method selector plus the knobs shared by the matching losses."""

    method: str = "none"
    weight: float = 0.01          # multiplier on the alignment term
    epsilon: float = 0.01         # entropic regularizer for ot
    sinkhorn_max_iters: int = 200
    sinkhorn_tol: float = 1e-6
    d_hid: int | None = None      # hidden width of the nets; defaults to d

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown alignment method {self.method!r}")
        if self.weight < 0:
            raise ConfigError("alignment weight must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.sinkhorn_max_iters < 1:
            raise ConfigError("sinkhorn_max_iters must be >= 1")
        return self


# -- networks ----------------------------------------------------------------


class DiscriminatorParams:
    """Highway block + two-layer MLP ending in a sigmoid probability.

    A single instance is shared across all heads and layers of a model.
    """

    def __init__(self, gate_w, gate_b, high_w, high_b, fc1_w, fc1_b, fc2_w, fc2_b):
        self.gate_w, self.gate_b = gate_w, gate_b
        self.high_w, self.high_b = high_w, high_b
        self.fc1_w, self.fc1_b = fc1_w, fc1_b
        self.fc2_w, self.fc2_b = fc2_w, fc2_b

    @classmethod
    def init(cls, rng, d: int, d_hid: int, dtype=np.float32):
        return cls(
            glorot(rng, (d, d), dtype), zeros((d,), dtype),
            glorot(rng, (d, d), dtype), zeros((d,), dtype),
            glorot(rng, (d, d_hid), dtype), zeros((d_hid,), dtype),
            glorot(rng, (d_hid, 1), dtype), zeros((1,), dtype),
        )

    def named(self, prefix="align.disc"):
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("gate_w", "gate_b", "high_w", "high_b",
                 "fc1_w", "fc1_b", "fc2_w", "fc2_b")}


class NavigatorParams:
    """Two-layer ReLU MLP d -> d_hid -> d defining the transport conditionals."""

    def __init__(self, fc1_w, fc1_b, fc2_w, fc2_b):
        self.fc1_w, self.fc1_b = fc1_w, fc1_b
        self.fc2_w, self.fc2_b = fc2_w, fc2_b

    @classmethod
    def init(cls, rng, d: int, d_hid: int, dtype=np.float32):
        return cls(glorot(rng, (d, d_hid), dtype), zeros((d_hid,), dtype),
                   glorot(rng, (d_hid, d), dtype), zeros((d,), dtype))

    def named(self, prefix="align.nav"):
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("fc1_w", "fc1_b", "fc2_w", "fc2_b")}


class CriticParams:
    """Highway block + linear projection to the cosine-cost feature space."""

    def __init__(self, gate_w, gate_b, high_w, high_b, proj_w, proj_b):
        self.gate_w, self.gate_b = gate_w, gate_b
        self.high_w, self.high_b = high_w, high_b
        self.proj_w, self.proj_b = proj_w, proj_b

    @classmethod
    def init(cls, rng, d: int, dtype=np.float32):
        return cls(glorot(rng, (d, d), dtype), zeros((d,), dtype),
                   glorot(rng, (d, d), dtype), zeros((d,), dtype),
                   glorot(rng, (d, d), dtype), zeros((d,), dtype))

    def named(self, prefix="align.critic"):
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("gate_w", "gate_b", "high_w", "high_b", "proj_w", "proj_b")}


@dataclass
class AlignmentNets:
    """The networks a given method needs; shared across heads and layers."""

    discriminator: DiscriminatorParams | None = None
    navigator: NavigatorParams | None = None
    critic: CriticParams | None = None

    @classmethod
    def init(cls, rng, method: str, d: int, d_hid: int | None = None,
             dtype=np.float32):
        d_hid = d if d_hid is None else d_hid
        if method == "adversarial":
            return cls(discriminator=DiscriminatorParams.init(rng, d, d_hid, dtype))
        if method == "ct":
            return cls(navigator=NavigatorParams.init(rng, d, d_hid, dtype),
                       critic=CriticParams.init(rng, d, dtype))
        return cls()

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.discriminator is not None:
            out.update(self.discriminator.named())
        if self.navigator is not None:
            out.update(self.navigator.named())
        if self.critic is not None:
            out.update(self.critic.named())
        return out


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def _highway(x: Tensor, gate_w, gate_b, high_w, high_b) -> Tensor:
    gate = sigmoid(_linear(x, gate_w, gate_b))
    return gate * relu(_linear(x, high_w, high_b)) + (1.0 - gate) * x


def discriminator_forward(x: Tensor, params: DiscriminatorParams) -> Tensor:
    """Probabilities in (0,1) for points ``x`` [..., w, d] -> [..., w]."""
    h = _highway(x, params.gate_w, params.gate_b, params.high_w, params.high_b)
    z = leaky_relu(_linear(h, params.fc1_w, params.fc1_b))
    p = sigmoid(_linear(z, params.fc2_w, params.fc2_b))
    return reshape(p, p.shape[:-1])


def navigator_features(x: Tensor, params: NavigatorParams) -> Tensor:
    return _linear(relu(_linear(x, params.fc1_w, params.fc1_b)),
                   params.fc2_w, params.fc2_b)


def critic_features(x: Tensor, params: CriticParams, reverse: bool = False) -> Tensor:
    """Critic embedding of ``x``; ``reverse`` gradient-reverses the critic
    parameters so a joint minimizer trains them as a maximizer."""
    wrap: Callable[[Tensor], Tensor] = gradient_reversal if reverse else (lambda t: t)
    h = _highway(x, wrap(params.gate_w), wrap(params.gate_b),
                 wrap(params.high_w), wrap(params.high_b))
    return _linear(h, wrap(params.proj_w), wrap(params.proj_b))


# -- masked helpers -------------------------------------------------------------


def _mask_weights(mask: np.ndarray, dtype) -> np.ndarray:
    """Uniform weights over unmasked tokens, per row: [P, w] summing to 1."""
    counts = mask.sum(axis=-1, keepdims=True)
    return (mask / counts).astype(dtype)


def _normalize_rows(feats: Tensor, mask: np.ndarray, what: str) -> Tensor:
    """L2-normalize the last axis, erroring on unmasked zero-norm rows."""
    sq = tsum(feats * feats, axis=-1, keepdims=True)
    norms = np.sqrt(sq.data)
    bad = (norms[..., 0] < 1e-12) & mask
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"zero-norm {what} vector at index {idx}")
    # masked rows may be anything; keep them (and their sqrt grads) finite
    pad = np.where(mask, 0.0, 1.0).astype(feats.dtype)[..., None]
    return feats / sqrt(sq + Tensor(pad))


def _logit_bias(mask: np.ndarray, dtype) -> np.ndarray:
    return np.where(mask, 0.0, MASK_FILL).astype(dtype)


# -- costs ------------------------------------------------------------------------


def _sq_euclidean_cost(q: Tensor, k: Tensor) -> Tensor:
    """C[..., i, j] = ||q_i - k_j||^2 / d for [..., w, d] point sets."""
    d = q.shape[-1]
    qe = reshape(q, q.shape[:-1] + (1, d))
    ke = reshape(k, k.shape[:-2] + (1,) + k.shape[-2:])
    diff = qe - ke
    return tsum(diff * diff, axis=-1) * (1.0 / d)


def _cosine_cost(q: Tensor, k: Tensor, mask: np.ndarray, what: str) -> Tensor:
    """C[..., i, j] = 1 - cos(q_i, k_j); in [0, 2]."""
    nq = _normalize_rows(q, mask, what)
    nk = _normalize_rows(k, mask, what)
    return 1.0 - matmul(nq, transpose(nk, (0, 2, 1)))


def pairwise_cost(pair: EmpiricalPair, kind: str = "sq_euclidean",
                  features: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """Point-to-point cost matrix C[i, j] = cost(q_i, k_j) for one pair."""
    w, d = pair.queries.shape
    q = reshape(pair.queries, (1, w, d))
    k = reshape(pair.keys, (1, w, d))
    if features is not None:
        q, k = features(q), features(k)
    if kind == "sq_euclidean":
        c = _sq_euclidean_cost(q, k)
    elif kind == "cosine":
        m = pair.mask[None, :]
        c = _cosine_cost(q, k, m, "transformed")
    else:
        raise ConfigError(f"unknown cost kind {kind!r}")
    return reshape(c, (w, w))


# -- sinkhorn ----------------------------------------------------------------------


def _lse_inplace(buf: np.ndarray, axis: int, out: np.ndarray) -> np.ndarray:
    """Log-sum-exp of ``buf`` along ``axis`` into ``out``; clobbers ``buf``."""
    mx = buf.max(axis=axis)
    np.maximum(mx, -1e308, out=mx)  # all -inf rows cannot occur; keep shifts finite
    buf -= np.expand_dims(mx, axis)
    np.exp(buf, out=buf)
    buf.sum(axis=axis, out=out)
    np.log(out, out=out)
    out += mx
    return out


def _round_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an approximate plan onto the transport polytope.

    Scales rows then columns down to their targets and spreads the leftover
    mass as a rank-one correction, so the returned plan is non-negative with
    exact marginals.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.minimum(a / plan.sum(axis=2), 1.0)
    plan = plan * np.nan_to_num(r, nan=1.0, posinf=1.0)[:, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.minimum(b / plan.sum(axis=1), 1.0)
    plan = plan * np.nan_to_num(s, nan=1.0, posinf=1.0)[:, None, :]
    miss_r = a - plan.sum(axis=2)
    miss_c = b - plan.sum(axis=1)
    total = miss_r.sum(axis=1)
    fix = np.where(total > 0, 1.0 / np.where(total > 0, total, 1.0), 0.0)
    plan = plan + miss_r[:, :, None] * miss_c[:, None, :] * fix[:, None, None]
    return plan


def sinkhorn_batch(cost: np.ndarray, epsilon: float, max_iters: int, tol: float,
                   row_weights: np.ndarray | None = None,
                   col_weights: np.ndarray | None = None):
    """Entropic-OT plans for a stack of cost matrices, in the log domain.

    ``cost`` is [P, n, m] (float64 internally). Marginals default to uniform;
    zero-weight rows/columns are excluded exactly. The regularizer is annealed
    geometrically from the cost scale down to ``epsilon`` (warm-started
    potentials), then iterated at ``epsilon`` until every instance has max
    marginal error below ``tol`` or ``max_iters`` total updates have run.
    The returned plans are rounded onto the transport polytope, so their
    marginals are exact regardless of where iteration stopped; ``converged``
    reports the pre-rounding marginal test.

    Returns ``(plans [P, n, m], converged [P] bool)``.
    """
    c = np.asarray(cost, dtype=np.float64)
    p, n, m = c.shape
    a = np.full((p, n), 1.0 / n) if row_weights is None \
        else np.asarray(row_weights, dtype=np.float64)
    b = np.full((p, m), 1.0 / m) if col_weights is None \
        else np.asarray(col_weights, dtype=np.float64)
    a = a / a.sum(axis=-1, keepdims=True)
    b = b / b.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        loga = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), -np.inf)
        logb = np.where(b > 0, np.log(np.where(b > 0, b, 1.0)), -np.inf)

    # geometric epsilon schedule, halving from the cost scale to the target
    levels = []
    scale = float(np.abs(c).max()) if c.size else epsilon
    e = scale / 2.0
    while e > epsilon * 1.5:
        levels.append(e)
        e /= 2.0
    levels.append(epsilon)

    # potentials f, g live in cost units; scaling factors u, v stay in the
    # linear domain and are absorbed into f, g before they can overflow
    # (log-stabilized iteration: the kernel is rebuilt as
    #  K = exp((f + g - C) / eps) after every absorption)
    f = np.zeros((p, n))
    g = np.zeros((p, m))
    u = np.ones((p, n))
    v = np.ones((p, m))
    kern = np.empty_like(c)
    converged = np.zeros(p, dtype=bool)
    iters_used = 0
    check_every = 4
    absorb_every = 10

    def rebuild(eps: float):
        np.add(f[:, :, None], g[:, None, :], out=kern)
        kern -= c
        np.multiply(kern, 1.0 / eps, out=kern)
        np.exp(kern, out=kern)

    def absorb(eps: float):
        nonlocal f, g, u, v
        with np.errstate(divide="ignore"):
            f = f + eps * np.log(u)
            g = g + eps * np.log(v)
        u = np.ones((p, n))
        v = np.ones((p, m))
        rebuild(eps)

    def marginal_errors():
        plan = kern * u[:, :, None] * v[:, None, :]
        err_r = np.abs(plan.sum(axis=2) - a).max(axis=1)
        err_c = np.abs(plan.sum(axis=1) - b).max(axis=1)
        return np.maximum(err_r, err_c)

    with np.errstate(invalid="ignore"):
        for level, eps in enumerate(levels):
            rebuild(eps)
            final = level == len(levels) - 1
            since_absorb = 0
            while iters_used < max_iters:
                kv = np.matmul(kern, v[:, :, None])[:, :, 0]
                u = np.where(kv > 0, a / np.where(kv > 0, kv, 1.0), 0.0)
                ktu = np.matmul(u[:, None, :], kern)[:, 0, :]
                v = np.where(ktu > 0, b / np.where(ktu > 0, ktu, 1.0), 0.0)
                iters_used += 1
                since_absorb += 1
                if not final:
                    break
                if since_absorb >= absorb_every or u.max() > 1e9 or v.max() > 1e9:
                    absorb(eps)
                    since_absorb = 0
                if iters_used % check_every == 0 or iters_used >= max_iters:
                    converged = marginal_errors() < tol
                    if converged.all():
                        break
            absorb(eps)
    plan = kern  # u = v = 1 right after the final absorb
    return _round_to_marginals(plan, a, b), converged


def sinkhorn(cost: np.ndarray, epsilon: float, max_iters: int = 200,
             tol: float = 1e-6):
    """Transport plan for one cost matrix with uniform marginals.

    Returns ``(plan, converged)``; a non-converged plan is still usable and
    the caller decides whether to warn.
    """
    c = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise NumericError("sinkhorn cost matrix contains NaN/Inf")
    plan, conv = sinkhorn_batch(c[None], epsilon, max_iters, tol)
    return plan[0], bool(conv[0])


# -- loss cores (vectorized over pairs) -----------------------------------------------


def _adversarial_loss_vec(q: Tensor, k: Tensor, mask: np.ndarray,
                          disc: DiscriminatorParams) -> Tensor:
    d_q = discriminator_forward(gradient_reversal(q), disc)
    d_k = discriminator_forward(gradient_reversal(k), disc)
    d_q = clamp(d_q, PROB_CLAMP, 1.0 - PROB_CLAMP)
    d_k = clamp(d_k, PROB_CLAMP, 1.0 - PROB_CLAMP)
    wts = Tensor(_mask_weights(mask, q.dtype))
    return tsum(tlog(d_q) * wts, axis=-1) + tsum(tlog(1.0 - d_k) * wts, axis=-1)


def _ot_loss_vec(q: Tensor, k: Tensor, mask: np.ndarray,
                 cfg: AlignmentConfig) -> tuple[Tensor, np.ndarray]:
    cost = _sq_euclidean_cost(q, k)
    wts = _mask_weights(mask, np.float64)
    plans, conv = sinkhorn_batch(cost.data, cfg.epsilon, cfg.sinkhorn_max_iters,
                                 cfg.sinkhorn_tol, row_weights=wts, col_weights=wts)
    # plan held constant: gradients reach the projections through the cost only
    return tsum(cost * Tensor(plans.astype(cost.dtype)), axis=(-2, -1)), conv


def _ct_conditionals(logits: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Row-stochastic key conditionals and column-stochastic query conditionals.

    ``logits[p, i, j]`` is the navigator inner product for (query i, key j);
    masked tokens drop out of the normalizations exactly (their shifted
    logits underflow to zero probability).
    """
    bias_k = Tensor(_logit_bias(mask, logits.dtype)[:, None, :])
    bias_q = Tensor(_logit_bias(mask, logits.dtype)[:, :, None])
    pi_k = softmax(logits + bias_k, axis=-1)
    pi_q = softmax(logits + bias_q, axis=-2)
    return pi_k, pi_q


def _ct_loss_vec(q: Tensor, k: Tensor, mask: np.ndarray,
                 nav: NavigatorParams, critic: CriticParams) -> Tensor:
    fq = navigator_features(q, nav)
    fk = navigator_features(k, nav)
    logits = matmul(fq, transpose(fk, (0, 2, 1)))
    pi_k, pi_q = _ct_conditionals(logits, mask)
    cq = critic_features(q, critic, reverse=True)
    ck = critic_features(k, critic, reverse=True)
    cost = 1.0 - matmul(_normalize_rows(cq, mask, "critic feature"),
                        transpose(_normalize_rows(ck, mask, "critic feature"),
                                  (0, 2, 1)))
    wts = _mask_weights(mask, q.dtype)
    w_q = Tensor(wts[:, :, None])
    w_k = Tensor(wts[:, None, :])
    term_qk = tsum(cost * pi_k * w_q, axis=(-2, -1))
    term_kq = tsum(cost * pi_q * w_k, axis=(-2, -1))
    return 0.5 * (term_qk + term_kq)


# -- single-pair operations ------------------------------------------------------------


def _as_batch(pair: EmpiricalPair) -> tuple[Tensor, Tensor, np.ndarray]:
    w, d = pair.queries.shape
    return (reshape(pair.queries, (1, w, d)), reshape(pair.keys, (1, w, d)),
            pair.mask[None, :])


def adversarial_alignment_loss(pair: EmpiricalPair,
                               disc: DiscriminatorParams) -> Tensor:
    """Mean log D(q) + mean log(1 - D(k)) over unmasked points (GRL on inputs)."""
    q, k, m = _as_batch(pair)
    return reshape(_adversarial_loss_vec(q, k, m, disc), ())


def ot_alignment_loss(pair: EmpiricalPair, cfg: AlignmentConfig) -> Tensor:
    """<C, plan> for the entropic transport plan between the point sets."""
    q, k, m = _as_batch(pair)
    vec, conv = _ot_loss_vec(q, k, m, cfg)
    if not conv.all():
        log.warning("sinkhorn did not converge in %d iterations",
                    cfg.sinkhorn_max_iters)
    return reshape(vec, ())


def ct_navigator(pair: EmpiricalPair, nav: NavigatorParams):
    """Conditionals (Pi_K rows over keys, Pi_Q columns over queries) as [w, w]."""
    q, k, m = _as_batch(pair)
    logits = matmul(navigator_features(q, nav),
                    transpose(navigator_features(k, nav), (0, 2, 1)))
    pi_k, pi_q = _ct_conditionals(logits, m)
    w = pair.width
    return reshape(pi_k, (w, w)), reshape(pi_q, (w, w))


def ct_alignment_loss(pair: EmpiricalPair, nav: NavigatorParams,
                      critic: CriticParams) -> Tensor:
    """Bidirectional expected critic cost under the navigator conditionals."""
    q, k, m = _as_batch(pair)
    return reshape(_ct_loss_vec(q, k, m, nav, critic), ())


# -- batch aggregation ------------------------------------------------------------------


def _gather_group(pairs: list[EmpiricalPair]) -> tuple[Tensor, Tensor, np.ndarray]:
    """Stack a layer's pairs into [P, w, d]; reshape the shared parents when
    the list is exactly one ``empirical_pairs`` output (the hot path)."""
    first = pairs[0]
    if first._parents is not None and all(p._parents is first._parents for p in pairs):
        parent_q, parent_k = first._parents
        b, h, w, d = parent_q.shape
        in_order = len(pairs) == b * h and all(
            p.sample_index == i // h and p.head_index == i % h
            for i, p in enumerate(pairs))
        if in_order:
            mask = np.stack([p.mask for p in pairs])
            return (reshape(parent_q, (b * h, w, d)),
                    reshape(parent_k, (b * h, w, d)), mask)
    mask = np.stack([p.mask for p in pairs])
    return (stack([p.queries for p in pairs]), stack([p.keys for p in pairs]), mask)


def batch_alignment_loss(pairs: list[EmpiricalPair], cfg: AlignmentConfig,
                         nets: AlignmentNets) -> Tensor:
    """Aggregate per-pair losses: mean over samples, sum over heads, mean over layers.

    Method ``none`` returns a constant zero without touching the tape.
    """
    if cfg.method == "none":
        return Tensor(np.zeros((), dtype=np.float32))
    if not pairs:
        raise ContractError("batch_alignment_loss needs at least one pair")

    groups: dict[int, list[EmpiricalPair]] = {}
    for p in pairs:
        groups.setdefault(p.layer_index, []).append(p)

    layer_losses = []
    for layer_pairs in groups.values():
        q, k, mask = _gather_group(layer_pairs)
        if cfg.method == "adversarial":
            vec = _adversarial_loss_vec(q, k, mask, nets.discriminator)
        elif cfg.method == "ot":
            vec, conv = _ot_loss_vec(q, k, mask, cfg)
            if not conv.all():
                log.warning("sinkhorn did not converge for %d/%d pairs",
                            int((~conv).sum()), conv.size)
        elif cfg.method == "ct":
            vec = _ct_loss_vec(q, k, mask, nets.navigator, nets.critic)
        else:
            raise ConfigError(f"unknown alignment method {cfg.method!r}")
        head_counts: dict[int, int] = {}
        for p in layer_pairs:
            head_counts[p.head_index] = head_counts.get(p.head_index, 0) + 1
        wts = np.array([1.0 / head_counts[p.head_index] for p in layer_pairs],
                       dtype=vec.dtype)
        layer_losses.append(tsum(vec * Tensor(wts)))

    total = layer_losses[0]
    for extra in layer_losses[1:]:
        total = total + extra
    return total * (1.0 / len(layer_losses))
