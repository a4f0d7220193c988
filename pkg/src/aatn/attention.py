"""Multi-head scaled dot-product self-attention.

Projections are stored as full d_model x d_model matrices whose column
blocks are the per-head subspaces; per-(sample, head) query/key point
sets are exposed for distribution matching.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .init import glorot
from .tensor import Tensor, matmul, reshape, select, softmax, transpose

MASK_FILL = -1e9  # large negative logit stand-in for -inf; keeps gradients finite


class AttentionLayerParams:
    """Q/K/V/output projections for one layer, all d_model x d_model."""

    def __init__(self, m_q: Tensor, m_k: Tensor, m_v: Tensor, m_o: Tensor,
                 n_heads: int):
        d_model = m_q.shape[0]
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.m_q, self.m_k, self.m_v, self.m_o = m_q, m_k, m_v, m_o
        self.n_heads = n_heads
        self.d_head = d_model // n_heads

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int,
             dtype=np.float32) -> "AttentionLayerParams":
        mats = [glorot(rng, (d_model, d_model), dtype) for _ in range(4)]
        return cls(*mats, n_heads=n_heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.m_q": self.m_q, f"{prefix}.m_k": self.m_k,
                f"{prefix}.m_v": self.m_v, f"{prefix}.m_o": self.m_o}


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, w, d_model] -> [B, H, w, d]; head h is column block h*d:(h+1)*d."""
    b, w, d_model = x.shape
    d = d_model // n_heads
    return transpose(reshape(x, (b, w, n_heads, d)), (0, 2, 1, 3))


def project_qkv(x: Tensor, params: AttentionLayerParams):
    """Project token features into per-head query/key/value tensors [B, H, w, d]."""
    if x.shape[-1] != params.m_q.shape[0]:
        raise ShapeError(
            f"input width {x.shape[-1]} does not match projection {params.m_q.shape}")
    h = params.n_heads
    q = _split_heads(matmul(x, params.m_q), h)
    k = _split_heads(matmul(x, params.m_k), h)
    v = _split_heads(matmul(x, params.m_v), h)
    return q, k, v


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic attention weights softmax(QK^T / sqrt(d)) as [B, H, w, w].

    ``mask`` is a [B, w] boolean array (True = real token); masked key columns
    get zero weight. Every sample must keep at least one unmasked key.
    """
    if q.shape != k.shape:
        raise ShapeError(f"query/key shapes disagree: {q.shape} vs {k.shape}")
    d = q.shape[-1]
    logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], q.shape[2]):
            raise ShapeError(f"mask shape {mask.shape} does not match tokens "
                             f"{(q.shape[0], q.shape[2])}")
        if not mask.any(axis=1).all():
            raise ContractError("a sample has every key masked")
        bias = np.where(mask, 0.0, MASK_FILL).astype(q.dtype)
        logits = logits + Tensor(bias[:, None, None, :])
    return softmax(logits, axis=-1)


def attend_and_merge(w: Tensor, v: Tensor, m_o: Tensor) -> Tensor:
    """Aggregate values per head, concatenate heads, apply the output projection."""
    ctx = matmul(w, v)                                # [B, H, w, d]
    b, h, n, d = ctx.shape
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, h * d))
    return matmul(merged, m_o)


class EmpiricalPair:
    """Matched query/key point sets for one (sample, head).

    ``queries``/``keys`` are [w, d] tensors that stay gradient-connected to
    the projections. When produced by :func:`empirical_pairs` the slices are
    materialized lazily; batch losses read the stacked parents directly.
    """

    def __init__(self, queries: Tensor | None = None, keys: Tensor | None = None,
                 mask: np.ndarray | None = None, sample_index: int = 0,
                 head_index: int = 0, layer_index: int = 0,
                 _parents: tuple[Tensor, Tensor] | None = None):
        if mask is None:
            w = (queries if queries is not None else _parents[0]).shape[-2]
            mask = np.ones(w, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ContractError("empirical pair needs at least one unmasked token")
        if queries is not None and keys is not None:
            if queries.shape != keys.shape:
                raise ShapeError(
                    f"query/key point sets disagree: {queries.shape} vs {keys.shape}")
        self._queries = queries
        self._keys = keys
        self.mask = mask
        self.sample_index = sample_index
        self.head_index = head_index
        self.layer_index = layer_index
        self._parents = _parents

    @property
    def queries(self) -> Tensor:
        if self._queries is None:
            self._queries = select(self._parents[0],
                                   (self.sample_index, self.head_index))
        return self._queries

    @property
    def keys(self) -> Tensor:
        if self._keys is None:
            self._keys = select(self._parents[1],
                                (self.sample_index, self.head_index))
        return self._keys

    @property
    def width(self) -> int:
        return int(self.mask.shape[0])

    def query_points(self) -> np.ndarray:
        """Unmasked query vectors as a plain [n_real, d] array."""
        if self._parents is not None and self._queries is None:
            data = self._parents[0].data[self.sample_index, self.head_index]
        else:
            data = self.queries.data
        return data[self.mask]

    def key_points(self) -> np.ndarray:
        if self._parents is not None and self._keys is None:
            data = self._parents[1].data[self.sample_index, self.head_index]
        else:
            data = self.keys.data
        return data[self.mask]


def empirical_pairs(q: Tensor, k: Tensor, mask: np.ndarray | None = None,
                    layer_index: int = 0) -> list[EmpiricalPair]:
    """One pair per (sample, head) from [B, H, w, d] projections, sample-major."""
    if q.shape != k.shape:
        raise ShapeError(f"query/key shapes disagree: {q.shape} vs {k.shape}")
    b, h, w, _ = q.shape
    if mask is None:
        mask = np.ones((b, w), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    parents = (q, k)  # single shared tuple: batch losses key the fast path on it
    pairs = []
    for bi in range(b):
        for hi in range(h):
            pairs.append(EmpiricalPair(mask=mask[bi], sample_index=bi,
                                       head_index=hi, layer_index=layer_index,
                                       _parents=parents))
    return pairs
