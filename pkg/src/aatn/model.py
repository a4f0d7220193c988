"""Transformer-encoder sequence classifier with the combined training objective.

Pre-norm residual blocks, sinusoidal positions, masked mean-pooling, and a
single Adam optimizer over every parameter including the alignment-side
networks (gradient reversal supplies the adversarial directions).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import (AlignmentConfig, AlignmentNets, batch_alignment_loss)
from .attention import (AttentionLayerParams, EmpiricalPair, attend_and_merge,
                        attention_weights, empirical_pairs, project_qkv)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, NoiseSpec, inject_noise, iter_batches
from .errors import (CheckpointError, ConfigError, ContractError,
                     DivergenceError, InputError)
from .init import glorot, ones, zeros
from .optim import AdamState, adam_step, clip_grads
from .tensor import (Tape, Tensor, backward, embedding, log_softmax, matmul,
                     relu, sqrt, tmean, tsum, zero_grads)


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    w_max: int = 16
    n_classes: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.1
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    aligned_layers: list[int] | None = None   # None = every layer

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by "
                              f"{self.n_heads} heads")
        if self.w_max < 1:
            raise ConfigError("w_max must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.aligned_layers is not None:
            bad = [l for l in self.aligned_layers if not 0 <= l < self.n_layers]
            if bad:
                raise ConfigError(f"aligned_layers out of range: {bad}")
        self.align.validate()
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def aligned_set(self) -> set[int]:
        if self.aligned_layers is None:
            return set(range(self.n_layers))
        return set(self.aligned_layers)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("vocab_size", "d_model", "n_heads", "n_layers", "w_max",
              "n_classes", "d_ff", "dropout_rate", "aligned_layers")}
        d["align"] = {k: getattr(self.align, k) for k in
                      ("method", "weight", "epsilon", "sinkhorn_max_iters",
                       "sinkhorn_tol", "d_hid")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        align_d = d.pop("align", {})
        _check_keys(align_d, AlignmentConfig(), "align")
        align = AlignmentConfig(**align_d)
        cfg = cls(align=align)
        _check_keys(d, cfg, "model")
        for k, v in d.items():
            setattr(cfg, k, v)
        return cfg.validate()


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    grad_clip_norm: float = 1.0
    eval_every: int = 0        # extra evals every N steps; epoch-end always
    align_lr: float | None = None

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("lr", "batch_size", "epochs", "seed", "grad_clip_norm",
                 "eval_every", "align_lr")}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls()
        _check_keys(d, cfg, "train")
        for k, v in d.items():
            setattr(cfg, k, v)
        return cfg.validate()


def _check_keys(d: dict, template, section: str):
    unknown = set(d) - set(vars(template))
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")


def sinusoidal_positions(w_max: int, d_model: int) -> np.ndarray:
    pos = np.arange(w_max)[:, None].astype(np.float64)
    dim = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


class LayerParams:
    def __init__(self, attn: AttentionLayerParams, ln1_g, ln1_b,
                 ff1_w, ff1_b, ff2_w, ff2_b, ln2_g, ln2_b):
        self.attn = attn
        self.ln1_g, self.ln1_b = ln1_g, ln1_b
        self.ff1_w, self.ff1_b = ff1_w, ff1_b
        self.ff2_w, self.ff2_b = ff2_w, ff2_b
        self.ln2_g, self.ln2_b = ln2_g, ln2_b

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype):
        dm, dff = cfg.d_model, cfg.d_ff
        return cls(
            AttentionLayerParams.init(rng, dm, cfg.n_heads, dtype),
            ones((dm,), dtype), zeros((dm,), dtype),
            glorot(rng, (dm, dff), dtype), zeros((dff,), dtype),
            glorot(rng, (dff, dm), dtype), zeros((dm,), dtype),
            ones((dm,), dtype), zeros((dm,), dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}.attn")
        for k in ("ln1_g", "ln1_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
                  "ln2_g", "ln2_b"):
            out[f"{prefix}.{k}"] = getattr(self, k)
        return out


class ModelParams:
    """All trainable tensors plus the constant positional table."""

    def __init__(self, cfg: ModelConfig, embedding_table, layers, cls_w, cls_b,
                 align_nets: AlignmentNets):
        self.cfg = cfg
        self.embedding = embedding_table
        self.layers = layers
        self.cls_w, self.cls_b = cls_w, cls_b
        self.align_nets = align_nets
        self.positions = sinusoidal_positions(cfg.w_max, cfg.d_model)

    @classmethod
    def build(cls, cfg: ModelConfig, init_rng: np.random.Generator,
              align_rng: np.random.Generator | None = None,
              dtype=np.float32) -> "ModelParams":
        cfg.validate()
        emb = glorot(init_rng, (cfg.vocab_size, cfg.d_model), dtype)
        layers = [LayerParams.init(init_rng, cfg, dtype)
                  for _ in range(cfg.n_layers)]
        cls_w = glorot(init_rng, (cfg.d_model, cfg.n_classes), dtype)
        cls_b = zeros((cfg.n_classes,), dtype)
        nets = AlignmentNets.init(align_rng if align_rng is not None else init_rng,
                                  cfg.align.method, cfg.d_head,
                                  cfg.align.d_hid, dtype)
        return cls(cfg, emb, layers, cls_w, cls_b, nets)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        out["cls_w"] = self.cls_w
        out["cls_b"] = self.cls_b
        out.update(self.align_nets.named())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        named = self.named_tensors()
        if set(named) != set(arrays):
            missing = sorted(set(named) - set(arrays))
            extra = sorted(set(arrays) - set(named))
            raise CheckpointError(
                f"checkpoint does not match model (missing={missing}, extra={extra})")
        for name, t in named.items():
            if arrays[name].shape != t.data.shape:
                raise CheckpointError(
                    f"checkpoint tensor '{name}' has shape {arrays[name].shape}, "
                    f"expected {t.data.shape}")
            t.data = arrays[name].astype(t.data.dtype)
        return self

    def all_finite(self) -> str | None:
        for name, t in self.named_tensors().items():
            if not np.all(np.isfinite(t.data)):
                return name
        return None


@dataclass
class Model:
    cfg: ModelConfig
    params: ModelParams

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        streams = rng_streams(seed)
        return cls(cfg, ModelParams.build(cfg, streams["init"], streams["align"]))


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Partitioned RNG streams so ablations stay comparable."""
    init_ss, align_ss, shuffle_ss, dropout_ss, noise_ss = \
        np.random.SeedSequence(seed).spawn(5)
    return {"init": np.random.default_rng(init_ss),
            "align": np.random.default_rng(align_ss),
            "shuffle": np.random.default_rng(shuffle_ss),
            "dropout": np.random.default_rng(dropout_ss),
            "noise": np.random.default_rng(noise_ss)}


@dataclass
class ForwardResult:
    logits: Tensor
    pairs: list[EmpiricalPair]
    attn: list[np.ndarray]      # per layer, [B, H, w, w]


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep.astype(x.dtype))


def encoder_forward(tokens: np.ndarray, mask: np.ndarray | None,
                    cfg: ModelConfig, params: ModelParams, mode: str = "eval",
                    dropout_rng: np.random.Generator | None = None,
                    noise: NoiseSpec | None = None) -> ForwardResult:
    """Embed, run the attention stack, and classify pooled token features.

    ``mode`` is "train" (dropout active) or "eval". Evaluation-time noise is
    added to the token embeddings before positions.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"tokens must be [batch, w], got shape {tokens.shape}")
    b, w = tokens.shape
    if w > cfg.w_max:
        raise InputError(f"sequence length {w} exceeds w_max {cfg.w_max}")
    bad = (tokens < 0) | (tokens >= cfg.vocab_size)
    if bad.any():
        bi, pos = np.argwhere(bad)[0]
        raise InputError(f"token id {tokens[bi, pos]} out of range "
                         f"at sample {bi} position {pos}")
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be train or eval, got {mode!r}")
    if mask is None:
        mask = np.ones((b, w), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    train = mode == "train"
    if noise is not None and train:
        raise ContractError("noise injection is evaluation-only")
    rng = dropout_rng if train else None

    x = embedding(tokens, params.embedding)
    if noise is not None:
        x = inject_noise(x, noise)
    x = x + Tensor(params.positions[:w])

    pairs: list[EmpiricalPair] = []
    attn_out: list[np.ndarray] = []
    aligned = cfg.aligned_set()
    for li, layer in enumerate(params.layers):
        h = _layer_norm(x, layer.ln1_g, layer.ln1_b)
        q, k, v = project_qkv(h, layer.attn)
        weights = attention_weights(q, k, mask)
        attn_out.append(weights.data)
        if li in aligned:
            pairs.extend(empirical_pairs(q, k, mask, layer_index=li))
        weights = _dropout(weights, cfg.dropout_rate, rng)
        x = x + attend_and_merge(weights, v, layer.attn.m_o)

        h2 = _layer_norm(x, layer.ln2_g, layer.ln2_b)
        f = relu(matmul(h2, layer.ff1_w) + layer.ff1_b)
        f = _dropout(f, cfg.dropout_rate, rng)
        x = x + (matmul(f, layer.ff2_w) + layer.ff2_b)

    m = mask.astype(x.dtype)
    counts = m.sum(axis=1, keepdims=True)
    pooled = tsum(x * Tensor(m[:, :, None]), axis=1) * Tensor(1.0 / counts)
    logits = matmul(pooled, params.cls_w) + params.cls_b
    return ForwardResult(logits, pairs, attn_out)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"label out of range for {c} classes")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    logp = log_softmax(logits, axis=-1)
    return tsum(logp * Tensor(onehot)) * (-1.0 / n)


def total_loss(logits: Tensor, labels: np.ndarray, pairs: list[EmpiricalPair],
               align_cfg: AlignmentConfig, nets: AlignmentNets):
    """Task cross-entropy plus the weighted alignment term.

    Returns ``(J, parts)`` where parts carries the float task/align values.
    When the method is ``none`` or the weight is zero the alignment branch is
    skipped entirely so it contributes no gradient.
    """
    task = cross_entropy(logits, labels)
    parts = {"task": float(task.data), "align": 0.0}
    if align_cfg.method == "none" or align_cfg.weight == 0.0 or not pairs:
        return task, parts
    align = batch_alignment_loss(pairs, align_cfg, nets)
    parts["align"] = float(align.data)
    j = task + align * align_cfg.weight
    return j, parts


def train_step(batch, cfg: ModelConfig, params: ModelParams,
               tcfg: TrainConfig, opt: AdamState,
               dropout_rng: np.random.Generator | None) -> dict:
    """One forward/backward/clip/Adam update over every parameter."""
    ids, mask, labels = batch
    named = params.named_tensors()
    zero_grads(named.values())
    with Tape():
        res = encoder_forward(ids, mask, cfg, params, mode="train",
                              dropout_rng=dropout_rng)
        j, parts = total_loss(res.logits, labels, res.pairs, cfg.align,
                              params.align_nets)
        if not np.isfinite(j.data):
            raise DivergenceError("training loss is not finite")
        backward(j)
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in named.items()}
    grad_norm = clip_grads(grads, tcfg.grad_clip_norm)
    adam_step(named, grads, opt)
    bad = params.all_finite()
    if bad is not None:
        raise DivergenceError(f"parameter '{bad}' became non-finite after update")
    # logged J is recomputed from the parts so J - task - weight*align == 0 holds
    # exactly in float arithmetic
    j_logged = parts["task"] + cfg.align.weight * parts["align"]
    return {"J": j_logged, "task": parts["task"], "align": parts["align"],
            "grad_norm": grad_norm}


def evaluate(model: Model, dataset: Dataset, batch_size: int = 64,
             noise: NoiseSpec | None = None, with_mmd: bool = True,
             mmd_max_tokens: int = 512) -> dict:
    """Accuracy, ECE, and (optionally) the query/key MMD summary."""
    from .metrics import ece as ece_fn
    from .metrics import qk_mmd_report, records_from_logits

    records = []
    noise_children = None
    if noise is not None and noise.sigma > 0:
        noise_children = np.random.SeedSequence(noise.seed).spawn(
            (len(dataset) + batch_size - 1) // batch_size)
    for bi, (ids, mask, labels) in enumerate(iter_batches(dataset, batch_size)):
        batch_noise = None
        if noise_children is not None:
            batch_noise = NoiseSpec(noise.sigma, noise.target, noise_children[bi])
        res = encoder_forward(ids, mask, model.cfg, model.params, mode="eval",
                              noise=batch_noise)
        records.extend(records_from_logits(res.logits.data, labels))
    out = {"accuracy": accuracy_of(records), "ece": ece_fn(records),
           "n": len(records)}
    if with_mmd:
        report = qk_mmd_report(model, dataset, batch_size,
                               max_tokens=mmd_max_tokens, noise=noise)
        out["mmd"] = report.to_dict()
    return out


def accuracy_of(records) -> float:
    from .metrics import accuracy
    return accuracy(records)


@dataclass
class RunReport:
    config: dict
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None
    best_val_accuracy: float = 0.0

    def to_dict(self) -> dict:
        return {"config": self.config, "steps": self.steps, "evals": self.evals,
                "checkpoint_path": self.checkpoint_path,
                "best_val_accuracy": self.best_val_accuracy}

    def save(self, path) -> str:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)
        return str(path)


def fit(train_set: Dataset, val_set: Dataset, cfg: ModelConfig,
        tcfg: TrainConfig, out_dir=None, config_echo: dict | None = None,
        with_mmd: bool = True, log_fn=None) -> tuple[RunReport, Model]:
    """Train with per-epoch validation; the best-accuracy checkpoint is kept.

    ``epochs == 0`` performs only the initial validation.
    """
    cfg.validate()
    tcfg.validate()
    if not len(train_set) or not len(val_set):
        raise ContractError("fit needs non-empty train and validation sets")
    streams = rng_streams(tcfg.seed)
    params = ModelParams.build(cfg, streams["init"], streams["align"])
    model = Model(cfg, params)
    overrides = {"align.": tcfg.align_lr} if tcfg.align_lr is not None else {}
    opt = AdamState(lr=tcfg.lr, lr_overrides=overrides)

    echo = config_echo or {"model": cfg.to_dict(), "train": tcfg.to_dict()}
    report = RunReport(config=echo)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    best = -1.0
    step = 0

    def run_eval(epoch: int):
        nonlocal best
        if report.evals and report.evals[-1]["step"] == step:
            return report.evals[-1]
        metrics = evaluate(model, val_set, batch_size=max(tcfg.batch_size, 64),
                           with_mmd=with_mmd)
        row = {"step": step, "epoch": epoch, **metrics}
        report.evals.append(row)
        if metrics["accuracy"] > best:
            best = metrics["accuracy"]
            report.best_val_accuracy = best
            if out_dir is not None:
                report.checkpoint_path = save_checkpoint(
                    out_dir / "checkpoint.aatn", params.named_tensors())
        if log_fn:
            log_fn(f"epoch {epoch} step {step}: "
                   f"val acc {metrics['accuracy']:.4f} ece {metrics['ece']:.4f}")
        return row

    run_eval(epoch=0)
    t0 = time.time()
    for epoch in range(1, tcfg.epochs + 1):
        order = streams["shuffle"].permutation(len(train_set))
        for batch in iter_batches(train_set, tcfg.batch_size, order):
            try:
                metrics = train_step(batch, cfg, params, tcfg, opt,
                                     streams["dropout"])
            except DivergenceError as e:
                raise DivergenceError(str(e), checkpoint_path=report.checkpoint_path) \
                    from None
            step += 1
            metrics["step"] = step
            report.steps.append(metrics)
            if tcfg.eval_every and step % tcfg.eval_every == 0:
                run_eval(epoch)
        run_eval(epoch)
    if log_fn:
        log_fn(f"trained {step} steps in {time.time() - t0:.1f}s; "
               f"best val accuracy {best:.4f}")
    if out_dir is not None:
        report.save(out_dir / "report.json")
    return report, model


def save_model(model: Model, path) -> str:
    return save_checkpoint(path, model.params.named_tensors())


def load_model(path, cfg: ModelConfig) -> Model:
    """Rebuild a model from a checkpoint; the config must match its shapes."""
    params = ModelParams.build(cfg, np.random.default_rng(0),
                               np.random.default_rng(0))
    params.load_arrays(load_checkpoint(path))
    return Model(cfg, params)
