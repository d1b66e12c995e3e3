"""Command line entry point: ``admmq {pretrain,quantize,evaluate,export}``.

Every verb takes a JSON run config (``--config``); ``--seed``, ``--out``
and ``--dataset`` override the matching config fields.  Results go to
stdout, progress to the log (level from ``ADMMQ_LOG``).

Exit codes: 0 ok, 1 config error, 2 data error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, pack_model, read_manifest, save_checkpoint, size_report
from .config import RunConfig, from_dict, load_config, reference_config
from .data import load_mnist, synth_blobs
from .errors import ConfigError, DataError, DivergenceError, QuantizationError, ShapeError
from .progressive import derive_seed, run_progressive
from .quantizer import BITS_PER_WEIGHT, QuantScheme

log = logging.getLogger("admmq")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
PACKED_NAME = "weights.admmq"


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def load_datasets(cfg: RunConfig) -> dict:
    d = cfg.data
    if d.kind == "mnist":
        return load_mnist(d.dir, train_size=d.train_size, val_size=d.val_size, seed=d.seed)
    kw = dict(classes=d.classes, dim=d.dim, spacing=d.spacing, sigma=d.sigma)
    return {
        "train": synth_blobs(n_per_class=d.n_per_class, seed=derive_seed(d.seed, 0), split="train", **kw),
        "val": synth_blobs(n_per_class=max(d.n_per_class // 4, 1), seed=derive_seed(d.seed, 1), split="val", **kw),
        "test": synth_blobs(n_per_class=max(d.n_per_class // 4, 1), seed=derive_seed(d.seed, 2), split="test", **kw),
    }


def build_model(cfg: RunConfig) -> nn.Model:
    m = cfg.model
    if m.arch == "lenet5":
        return nn.lenet5(seed=cfg.seed, num_classes=m.num_classes)
    return nn.mlp(m.in_features, m.hidden, m.num_classes, seed=cfg.seed)


def train_baseline(model: nn.Model, train, val, cfg: RunConfig) -> list[dict]:
    """Float training in place; returns one record per epoch."""
    p = cfg.pretrain
    rng = np.random.default_rng([cfg.seed, 1])
    opt = nn.OptimizerState(p.optimizer, p.lr)
    history = []
    for epoch in range(p.epochs):
        opt.lr = p.lr * p.lr_decay**epoch
        t0 = time.perf_counter()
        loss = nn.train_epoch(model, train, opt, p.batch_size, rng)
        acc = nn.evaluate(model, val)
        history.append({"epoch": epoch + 1, "train_loss": loss, "val_accuracy": acc})
        log.info("pretrain epoch %d loss %.5f val %.4f (%.1fs)", epoch + 1, loss, acc, time.perf_counter() - t0)
    return history


def quantize_model(baseline: nn.Model, datasets: dict, cfg: RunConfig):
    """Progressive ADMM from ``baseline``; returns (model, scheme, state, trace)."""
    pcfg = cfg.progressive_config()
    best, state, trace = run_progressive(baseline, pcfg, datasets["train"], datasets["val"])
    return best, state.best_scheme, state, trace


def layer_report(model: nn.Model, scheme: QuantScheme | None) -> dict:
    out = {}
    for name in model.weight_names():
        w = model.get(name)
        entry = scheme.layers.get(name) if scheme is not None else None
        info = {"count": int(w.size)}
        if entry is not None and entry.quantized:
            values, counts = np.unique(w, return_counts=True)
            info.update(
                mode=entry.mode,
                alpha=entry.alpha,
                bits=BITS_PER_WEIGHT[entry.mode],
                histogram={repr(float(v)): int(c) for v, c in zip(values, counts)},
            )
        else:
            info.update(mode="float", bits=64)
        out[name] = info
    return out


def effective_bits(report: dict) -> float:
    total = sum(r["count"] for r in report.values())
    return sum(r["count"] * r["bits"] for r in report.values()) / total


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["out"] = args.out
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    if getattr(args, "dataset", None) is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, dir=args.dataset))
    return cfg


def _check_dataset(cfg: RunConfig) -> None:
    if cfg.data.kind == "mnist" and not Path(cfg.data.dir).is_dir():
        raise DataError(f"dataset directory {cfg.data.dir} does not exist")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig) -> dict:
    _check_dataset(cfg)
    datasets = load_datasets(cfg)
    model = build_model(cfg)
    history = train_baseline(model, datasets["train"], datasets["val"], cfg)
    metrics = {
        "val_accuracy": nn.evaluate(model, datasets["val"]),
        "test_accuracy": nn.evaluate(model, datasets["test"]),
        "history": history,
    }
    path = save_checkpoint(Path(cfg.out) / "baseline", model, None, cfg.to_dict(), metrics)
    return {"checkpoint": str(path), "val_accuracy": metrics["val_accuracy"], "test_accuracy": metrics["test_accuracy"]}


def cmd_quantize(cfg: RunConfig, checkpoint=None) -> dict:
    _check_dataset(cfg)
    checkpoint = Path(checkpoint) if checkpoint is not None else Path(cfg.out) / "baseline"
    baseline, _, manifest = load_checkpoint(checkpoint)
    expected = build_model(cfg).architecture()
    if manifest["architecture"] != expected:
        raise DataError(f"{checkpoint}: architecture does not match the configured model")
    datasets = load_datasets(cfg)
    t0 = time.perf_counter()
    model, scheme, state, trace = quantize_model(baseline, datasets, cfg)
    report = layer_report(model, scheme)
    summary = {
        "baseline_checkpoint": str(checkpoint),
        "baseline_val_accuracy": nn.evaluate(baseline, datasets["val"]),
        "baseline_test_accuracy": nn.evaluate(baseline, datasets["test"]),
        "quantized_val_accuracy": state.best_accuracy,
        "quantized_test_accuracy": nn.evaluate(model, datasets["test"]),
        "bits_per_layer": {
            n: {"bits_per_weight": r["bits"], "total_bits": r["bits"] * r["count"]} for n, r in report.items()
        },
        "effective_bits": effective_bits(report),
        "progressive": state.to_dict(),
        "seconds": time.perf_counter() - t0,
    }
    out = Path(cfg.out)
    path = save_checkpoint(
        out / "quantized",
        model,
        scheme,
        cfg.to_dict(),
        {k: summary[k] for k in ("quantized_val_accuracy", "quantized_test_accuracy", "effective_bits")},
        extra={"progressive": state.to_dict()},
    )
    trace.to_csv(out / "trace.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"checkpoint": str(path), **{k: v for k, v in summary.items() if k != "progressive"}}


def cmd_evaluate(checkpoint, cfg: RunConfig | None = None) -> dict:
    model, scheme, manifest = load_checkpoint(checkpoint)
    if cfg is None:
        cfg = from_dict(manifest["config"]) if manifest.get("config") else RunConfig()
    _check_dataset(cfg)
    datasets = load_datasets(cfg)
    report = layer_report(model, scheme)
    return {
        "checkpoint": str(checkpoint),
        "kind": manifest.get("kind"),
        "test_accuracy": nn.evaluate(model, datasets["test"]),
        "effective_bits": effective_bits(report),
        "layers": report,
    }


def cmd_export(checkpoint, out) -> dict:
    model, scheme, manifest = load_checkpoint(checkpoint)
    if scheme is None or not scheme.quantized_names():
        raise QuantizationError(f"{checkpoint}: export needs a quantized checkpoint")
    blob = pack_model(model, scheme)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / PACKED_NAME).write_bytes(blob)
    report = size_report(model, scheme, blob)
    (out / "size_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "architecture.json").write_text(json.dumps(manifest["architecture"], indent=2) + "\n")
    return {"packed": str(out / PACKED_NAME), **report}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="admmq", description="ADMM binary/ternary weight quantization")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, with_data=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        if with_data:
            p.add_argument("--dataset", help="MNIST directory (IDX files, optionally gzipped)")

    common(sub.add_parser("pretrain", help="train the float baseline"))
    p = sub.add_parser("quantize", help="progressive ADMM quantization of a baseline")
    common(p)
    p.add_argument("--checkpoint", help="baseline checkpoint (default: OUT/baseline)")
    p = sub.add_parser("evaluate", help="accuracy and level histograms of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("export", help="bit-packed weights of a quantized checkpoint")
    common(p, with_data=False)
    p.add_argument("--checkpoint", required=True)
    sub.add_parser("reference-config", help="print every tunable with its default")
    return parser


def _setup_logging() -> None:
    raw = os.environ.get("ADMMQ_LOG", "WARNING").strip().upper()
    level = int(raw) if raw.isdigit() else logging.getLevelName(raw)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return _apply_overrides(cfg, args)


def run(argv=None) -> dict:
    args = _parser().parse_args(argv)
    if args.verb == "reference-config":
        return reference_config()
    if args.verb == "pretrain":
        return cmd_pretrain(_config(args))
    if args.verb == "quantize":
        return cmd_quantize(_config(args), args.checkpoint)
    if args.verb == "evaluate":
        if args.config:
            cfg = load_config(args.config)
        else:
            manifest = read_manifest(args.checkpoint)
            cfg = from_dict(manifest["config"]) if manifest.get("config") else RunConfig()
        return cmd_evaluate(args.checkpoint, _apply_overrides(cfg, args))
    cfg = _config(args)
    return cmd_export(args.checkpoint, args.out or Path(cfg.out) / "export")


def main(argv=None) -> int:
    _setup_logging()
    try:
        _emit(run(argv))
    except ConfigError as exc:
        print(f"admmq: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, QuantizationError, ShapeError, OSError) as exc:
        print(f"admmq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"admmq: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
