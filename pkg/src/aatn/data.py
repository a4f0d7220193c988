"""Synthetic tasks, JSONL ingestion, batching, and evaluation-time noise.

Token id 0 is padding and id 1 is the unknown token; generated and
vocabulary-mapped ids start at 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, InputError
from .tensor import Tensor

PAD_ID = 0
UNK_ID = 1
FIRST_ID = 2


@dataclass
class Example:
    tokens: list[int]
    label: int
    text: str | None = None


@dataclass
class Dataset:
    examples: list[Example]
    vocab: dict[str, int] | None = None
    n_classes: int = 2

    def __len__(self):
        return len(self.examples)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.examples[:n], self.vocab, self.n_classes)


def gen_pair_matching(seed, n_examples: int, w: int, vocab_size: int) -> Dataset:
    """Balanced binary task: label 1 iff some token id repeats in the sequence.

    Positives get exactly one planted duplicate; negatives are all-distinct.
    Deterministic for a given seed.
    """
    if w < 4:
        raise ConfigError(f"pair-matching needs w >= 4, got {w}")
    n_ids = vocab_size - FIRST_ID
    if n_ids < w:
        raise ConfigError(
            f"vocab_size {vocab_size} leaves only {n_ids} usable ids; need >= {w} "
            "for all-distinct negatives")
    rng = np.random.default_rng(seed)
    ids = np.arange(FIRST_ID, vocab_size)
    examples = []
    for i in range(n_examples):
        label = 1 - (i % 2)
        if label == 1:
            base = rng.choice(ids, size=w - 1, replace=False)
            dup = base[rng.integers(0, w - 1)]
            seq = np.append(base, dup)
            rng.shuffle(seq)
        else:
            seq = rng.choice(ids, size=w, replace=False)
        examples.append(Example([int(t) for t in seq], label))
    return Dataset(examples, vocab=None, n_classes=2)


def _tokenize(text: str) -> list[str]:
    return text.split()


def load_jsonl(path, vocab: dict[str, int] | None = None,
               w_max: int | None = None) -> Dataset:
    """Read {"tokens": [...]} or {"text": "..."} plus {"label": int} lines.

    Text is whitespace-tokenized; when no vocabulary is supplied one is built
    by frequency (ties broken alphabetically). Unknown tokens map to id 1.
    """
    path = Path(path)
    raw = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{line_no}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict) or "label" not in obj:
                raise InputError(f"{path}:{line_no}: expected an object with a 'label'")
            label = obj["label"]
            if not isinstance(label, int) or label < 0:
                raise InputError(f"{path}:{line_no}: label must be a non-negative int")
            if "tokens" in obj:
                toks = obj["tokens"]
                if (not isinstance(toks, list) or not toks
                        or not all(isinstance(t, int) and t >= 0 for t in toks)):
                    raise InputError(
                        f"{path}:{line_no}: 'tokens' must be a non-empty list of ids")
                raw.append((line_no, list(toks), None, label))
            elif "text" in obj:
                words = _tokenize(obj["text"])
                if not words:
                    raise InputError(f"{path}:{line_no}: empty text")
                raw.append((line_no, None, (obj["text"], words), label))
            else:
                raise InputError(f"{path}:{line_no}: needs 'tokens' or 'text'")
    if not raw:
        raise InputError(f"{path}: empty dataset file")

    if vocab is None and any(r[2] is not None for r in raw):
        counts: dict[str, int] = {}
        for _, _, text_words, _ in raw:
            if text_words is not None:
                for tok in text_words[1]:
                    counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        vocab = {tok: FIRST_ID + i for i, tok in enumerate(ordered)}

    examples = []
    n_classes = 2
    for _, toks, text_words, label in raw:
        if toks is None:
            text, words = text_words
            toks = [vocab.get(w, UNK_ID) for w in words]
        else:
            text = None
        if w_max is not None:
            toks = toks[:w_max]
        examples.append(Example(toks, label, text))
        n_classes = max(n_classes, label + 1)
    return Dataset(examples, vocab=vocab, n_classes=n_classes)


def save_jsonl(ds: Dataset, path) -> str:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for ex in ds.examples:
            f.write(json.dumps({"tokens": ex.tokens, "label": ex.label}) + "\n")
    return str(path)


def iter_batches(ds: Dataset, batch_size: int, order: np.ndarray | None = None):
    """Yield (ids [B, w] int64, mask [B, w] bool, labels [B] int64) with padding."""
    idx = np.arange(len(ds)) if order is None else np.asarray(order)
    for start in range(0, len(idx), batch_size):
        chunk = [ds.examples[i] for i in idx[start:start + batch_size]]
        w = max(len(ex.tokens) for ex in chunk)
        ids = np.full((len(chunk), w), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), w), dtype=bool)
        labels = np.empty(len(chunk), dtype=np.int64)
        for r, ex in enumerate(chunk):
            ids[r, :len(ex.tokens)] = ex.tokens
            mask[r, :len(ex.tokens)] = True
            labels[r] = ex.label
        yield ids, mask, labels


@dataclass
class NoiseSpec:
    """Evaluation-time Gaussian input perturbation (applied to embeddings)."""

    sigma: float
    target: str = "embeddings"
    seed: int | np.random.SeedSequence = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.target != "embeddings":
            raise ConfigError(f"unsupported noise target {self.target!r}")


def inject_noise(embeddings, spec: NoiseSpec):
    """Add N(0, sigma^2) draws from a stream seeded by ``spec.seed``.

    sigma == 0 returns the input unchanged; the same spec yields the same
    perturbation on every call.
    """
    if spec.sigma == 0:
        return embeddings
    rng = np.random.default_rng(spec.seed)
    if isinstance(embeddings, Tensor):
        noise = rng.normal(0.0, spec.sigma, size=embeddings.shape)
        return embeddings + Tensor(noise.astype(embeddings.dtype))
    arr = np.asarray(embeddings)
    return arr + rng.normal(0.0, spec.sigma, size=arr.shape).astype(arr.dtype)


DEFAULT_DATA = {
    "kind": "pair_matching",
    "w": 16,
    "vocab_size": 64,
    "n_train": 8000,
    "n_val": 1000,
    "seed": 0,
}


def make_synthetic_split(data_cfg: dict | None = None):
    """Deterministic train/val pair-matching datasets from a data config dict."""
    d = dict(DEFAULT_DATA)
    d.update(data_cfg or {})
    if d["kind"] != "pair_matching":
        raise ConfigError(f"unknown synthetic task {d['kind']!r}")
    train = gen_pair_matching(np.random.SeedSequence([int(d["seed"]), 0]),
                              d["n_train"], d["w"], d["vocab_size"])
    val = gen_pair_matching(np.random.SeedSequence([int(d["seed"]), 1]),
                            d["n_val"], d["w"], d["vocab_size"])
    return train, val
