"""Command-line entry points: train, eval, diagnose, gradcheck.

The config file is a JSON document with "model", "train", "align", and
"data" sections mirroring the config dataclass field names; command-line
flags override it and the effective config is echoed into the run
directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (DEFAULT_DATA, NoiseSpec, load_jsonl, make_synthetic_split)
from .errors import ConfigError, DivergenceError
from .gradcheck import format_table, run_gradcheck
from .metrics import export_diagnostics, qk_mmd_report
from .model import (Model, ModelConfig, TrainConfig, evaluate, fit, load_model)

ALIGN_SHORT = {"none": "none", "adv": "adversarial", "ot": "ot", "ct": "ct"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="aatn",
        description="Train and probe attention classifiers whose query/key "
                    "distributions are matched per head.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True, help="path to the JSON config")
    t.add_argument("--align", choices=sorted(ALIGN_SHORT),
                   help="override the alignment method")
    t.add_argument("--lambda", dest="lam", type=float,
                   help="override the alignment weight")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.add_argument("--out", default="aatn_run", help="run directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True,
                   help="JSONL path or 'synthetic' for the config's val split")
    e.add_argument("--noise-sigma", type=float, default=0.0)
    e.add_argument("--config", help="config JSON (default: sibling config.json)")

    d = sub.add_parser("diagnose", help="MMD report plus CSV exports")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--data", default="synthetic")
    d.add_argument("--config", help="config JSON (default: sibling config.json)")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=int, default=20, help="number of random seeds")
    return p


def _load_config_file(parser: argparse.ArgumentParser, path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        parser.error(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as f:
        return json.load(f)


def _effective_config(raw: dict, args) -> dict:
    cfg = {"model": dict(raw.get("model", {})),
           "train": dict(raw.get("train", {})),
           "data": {**DEFAULT_DATA, **raw.get("data", {})}}
    align = dict(raw.get("model", {}).get("align", {}))
    align.update(raw.get("align", {}))
    if getattr(args, "align", None):
        align["method"] = ALIGN_SHORT[args.align]
    if getattr(args, "lam", None) is not None:
        align["weight"] = args.lam
    cfg["model"]["align"] = align
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    return cfg


def _datasets_from_config(cfg: dict, model_cfg: ModelConfig):
    data = cfg["data"]
    if data.get("kind", "pair_matching") == "pair_matching":
        return make_synthetic_split(data)
    if data["kind"] == "jsonl":
        train = load_jsonl(data["train_path"], w_max=model_cfg.w_max)
        val = load_jsonl(data["val_path"], vocab=train.vocab,
                         w_max=model_cfg.w_max)
        return train, val
    raise ConfigError(f"unknown data kind {data.get('kind')!r}")


def _cmd_train(parser, args) -> int:
    raw = _load_config_file(parser, args.config)
    effective = _effective_config(raw, args)
    model_cfg = ModelConfig.from_dict(effective["model"])
    train_cfg = TrainConfig.from_dict(effective["train"])
    train_ds, val_ds = _datasets_from_config(effective, model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(effective, f, indent=1)
    report, _model = fit(train_ds, val_ds, model_cfg, train_cfg, out_dir=out,
                         config_echo=effective, log_fn=print)
    print(f"best val accuracy {report.best_val_accuracy:.4f}; "
          f"report at {out / 'report.json'}")
    return 0


def _load_model_and_config(parser, args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        parser.error(f"checkpoint not found: {ckpt}")
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.json"
    if not cfg_path.is_file():
        parser.error(f"config not found: {cfg_path} "
                     "(pass --config when the checkpoint has no sibling config.json)")
    with open(cfg_path, "r", encoding="utf-8") as f:
        effective = json.load(f)
    effective.setdefault("data", dict(DEFAULT_DATA))
    model_cfg = ModelConfig.from_dict(effective.get("model", {}))
    return load_model(ckpt, model_cfg), effective


def _eval_dataset(args, effective, model_cfg):
    if args.data == "synthetic":
        _train, val = _datasets_from_config(effective, model_cfg)
        return val
    return load_jsonl(args.data, w_max=model_cfg.w_max)


def _cmd_eval(parser, args) -> int:
    model, effective = _load_model_and_config(parser, args)
    ds = _eval_dataset(args, effective, model.cfg)
    noise = NoiseSpec(args.noise_sigma) if args.noise_sigma > 0 else None
    metrics = evaluate(model, ds, noise=noise)
    print(json.dumps(metrics, indent=1))
    return 0


def _cmd_diagnose(parser, args) -> int:
    model, effective = _load_model_and_config(parser, args)
    ds = _eval_dataset(args, effective, model.cfg)
    out = Path(args.out)
    (out / "diagnostics").mkdir(parents=True, exist_ok=True)
    ids, mask, labels = next(iter_batches_head(ds))
    id_to_token = None
    if ds.vocab:
        id_to_token = {v: k for k, v in ds.vocab.items()}
    written = export_diagnostics(model, (ids, mask, labels), out / "diagnostics",
                                 id_to_token=id_to_token)
    report = qk_mmd_report(model, ds)
    with open(out / "mmd_report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=1)
    print(f"wrote {len(written)} csv files and mmd_report.json "
          f"(total mmd {report.total:.6f}) under {out}")
    return 0


def iter_batches_head(ds, batch_size: int = 8):
    from .data import iter_batches
    return iter_batches(ds, batch_size)


def _cmd_gradcheck(_parser, args) -> int:
    results = run_gradcheck(n_seeds=args.seeds, base_seed=args.seed)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    handlers = {"train": _cmd_train, "eval": _cmd_eval,
                "diagnose": _cmd_diagnose, "gradcheck": _cmd_gradcheck}
    try:
        return handlers[args.command](parser, args)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    except DivergenceError as e:
        print(f"error: {e} (last good checkpoint: {e.checkpoint_path})",
              file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
