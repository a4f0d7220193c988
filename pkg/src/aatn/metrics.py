"""Evaluation metrics and diagnostics exports.

Accuracy and expected calibration error over prediction records,
Gaussian-kernel MMD between per-head query/key point clouds, and CSV
exports of attention grids and projected points for external plotting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .tensor import Tensor

DEFAULT_ECE_BINS = 10
DEFAULT_MMD_BANDWIDTH = 1.0
DEFAULT_MMD_TOKENS = 512


@dataclass
class PredictionRecord:
    confidence: float      # max softmax probability
    predicted_class: int
    true_class: int


def records_from_logits(logits: np.ndarray, labels: np.ndarray) -> list[PredictionRecord]:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    preds = probs.argmax(axis=-1)
    return [PredictionRecord(float(probs[i, preds[i]]), int(preds[i]), int(labels[i]))
            for i in range(len(labels))]


def accuracy(records: list[PredictionRecord]) -> float:
    if not records:
        raise ContractError("accuracy of an empty record list is undefined")
    correct = sum(1 for r in records if r.predicted_class == r.true_class)
    return correct / len(records)


def ece(records: list[PredictionRecord], n_bins: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error over equal-width, right-inclusive bins of (0, 1]."""
    if not records:
        return 0.0
    conf = np.array([r.confidence for r in records])
    hits = np.array([r.predicted_class == r.true_class for r in records], dtype=float)
    bins = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    total = 0.0
    n = len(records)
    for b in range(n_bins):
        in_bin = bins == b
        count = int(in_bin.sum())
        if count == 0:
            continue
        total += (count / n) * abs(hits[in_bin].mean() - conf[in_bin].mean())
    return float(total)


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x * x).sum(axis=1)[:, None]
    yy = (y * y).sum(axis=1)[None, :]
    return np.maximum(xx + yy - 2.0 * (x @ y.T), 0.0)


def mmd_gaussian(x: np.ndarray, y: np.ndarray,
                 bandwidth: float = DEFAULT_MMD_BANDWIDTH) -> float:
    """Biased (V-statistic) MMD with k(a,b) = exp(-||a-b||^2 / (2 bw^2)), floored at 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) == 0 or len(y) == 0:
        raise ContractError("mmd needs two non-empty 2-d point sets")
    scale = -0.5 / (bandwidth * bandwidth)
    kxx = np.exp(scale * _sq_dists(x, x)).mean()
    kyy = np.exp(scale * _sq_dists(y, y)).mean()
    kxy = np.exp(scale * _sq_dists(x, y)).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


@dataclass
class MmdReport:
    """Per-(layer, head) query/key MMDs plus their across-cells total."""

    entries: dict[tuple[int, int], float]

    @property
    def total(self) -> float:
        return float(sum(self.entries.values()))

    def to_dict(self) -> dict:
        return {"per_head": {f"{l},{h}": v for (l, h), v in sorted(self.entries.items())},
                "total": self.total}


def collect_qk_points(model, dataset, batch_size: int = 64,
                      max_tokens: int = DEFAULT_MMD_TOKENS,
                      noise=None) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
    """Pool up to ``max_tokens`` unmasked query/key vectors per (layer, head)."""
    from .data import iter_batches
    from .model import encoder_forward

    pools: dict[tuple[int, int], tuple[list, list]] = {}
    counts: dict[tuple[int, int], int] = {}
    for ids, mask, _labels in iter_batches(dataset, batch_size):
        res = encoder_forward(ids, mask, model.cfg, model.params, mode="eval",
                              noise=noise)
        for pair in res.pairs:
            key = (pair.layer_index, pair.head_index)
            if counts.get(key, 0) >= max_tokens:
                continue
            qs, ks = pools.setdefault(key, ([], []))
            take = min(int(pair.mask.sum()), max_tokens - counts.get(key, 0))
            qs.append(pair.query_points()[:take])
            ks.append(pair.key_points()[:take])
            counts[key] = counts.get(key, 0) + take
        if counts and all(c >= max_tokens for c in counts.values()):
            break
    return {key: (np.concatenate(qs), np.concatenate(ks))
            for key, (qs, ks) in pools.items()}


def qk_mmd_report(model, dataset, batch_size: int = 64,
                  max_tokens: int = DEFAULT_MMD_TOKENS,
                  bandwidth: float = DEFAULT_MMD_BANDWIDTH,
                  noise=None) -> MmdReport:
    """Per-(layer, head) MMD between pooled query and key points."""
    pools = collect_qk_points(model, dataset, batch_size, max_tokens, noise)
    entries = {key: mmd_gaussian(q, k, bandwidth) for key, (q, k) in pools.items()}
    return MmdReport(entries)


def _fmt(x: float) -> str:
    return f"{float(x):.8g}"


def export_diagnostics(model, batch, out_dir, id_to_token=None) -> list[str]:
    """Write attention grids (first sample, per layer/head) and query/key
    point clouds for the whole batch; returns the written paths."""
    from .model import encoder_forward

    ids, mask = batch[0], batch[1]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res = encoder_forward(ids, mask, model.cfg, model.params, mode="eval")
    written = []

    def token_str(tid: int) -> str:
        if id_to_token is not None and tid in id_to_token:
            return id_to_token[tid]
        return str(tid)

    header = [token_str(int(t)) for t in ids[0]]
    for layer, attn in enumerate(res.attn):
        for head in range(attn.shape[1]):
            path = out_dir / f"attn_l{layer}_h{head}.csv"
            with open(path, "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(header)
                for row in attn[0, head]:
                    wr.writerow([_fmt(v) for v in row])
            written.append(str(path))

    d = model.cfg.d_model // model.cfg.n_heads
    feat_cols = [f"f{i}" for i in range(d)]
    for name, getter in (("queries", "query_points"), ("keys", "key_points")):
        path = out_dir / f"{name}.csv"
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["layer", "head", "token_index"] + feat_cols)
            for pair in res.pairs:
                points = getattr(pair, getter)()
                positions = np.flatnonzero(pair.mask)
                for pos, vec in zip(positions, points):
                    wr.writerow([pair.layer_index, pair.head_index, int(pos)]
                                + [_fmt(v) for v in vec])
        written.append(str(path))
    return written
