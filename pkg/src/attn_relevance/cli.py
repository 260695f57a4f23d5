"""Command-line entry point: ``attn-relevance <command> [flags]``.

Exit status: 0 on success, 2 for rejected input, 3 for configuration errors,
4 for I/O errors and 5 for numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import MethodId, as_method, check_compatible, relevance_state
from .errors import AttnRelevanceError, ConfigError, NumericError, RejectedInput
from .evaluation import MODALITIES, compare_report
from .export import as_grid, to_gray, write_json, write_pgm
from .models.config import Architecture, ModelConfig
from .models.data import detection_vocab, gen_detection_task, gen_vqa_task, load_dataset, save_dataset
from .models.network import build_model, forward, trace_batch
from .models.train import accuracy, load_checkpoint, save_checkpoint, train
from .relevancy import Variant, as_variant, extract_cls, extract_query
from .segmask import build_masks, evaluate_segmentation, query_relevance

log = logging.getLogger("attn_relevance")

EXIT_OK = 0
EXIT_REJECTED = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5

PRESETS = {
    "vqa-co": {
        "model": {"architecture": "SelfPlusCo", "layers": 2, "heads": 2, "head_dim": 8, "text_tokens": 6, "image_tokens": 8},
        "train": {"epochs": 10, "lr": 0.02, "batch_size": 32},
    },
    "vqa-self": {
        "model": {"architecture": "PureSelf", "layers": 2, "heads": 2, "head_dim": 8, "text_tokens": 6, "image_tokens": 8},
        "train": {"epochs": 10, "lr": 0.02, "batch_size": 32},
    },
    "detect": {
        "model": {
            "architecture": "EncoderDecoder",
            "layers": 2,
            "heads": 2,
            "head_dim": 8,
            "text_tokens": 0,
            "image_tokens": 64,
            "queries": 3,
            "classes": 4,
            "image_vocab": detection_vocab(3),
        },
        "train": {"epochs": 20, "lr": 0.02, "batch_size": 32},
    },
}
TRAIN_DEFAULTS = {"epochs": 10, "lr": 0.02, "batch_size": 32}
ALL_METHODS = ",".join(m.value for m in MethodId)
PATCH = 4


def load_run_config(spec: str) -> tuple[ModelConfig, dict]:
    """A preset name or a JSON file ``{"model": {...}, "train": {...}}``."""
    if spec in PRESETS:
        doc = PRESETS[spec]
    else:
        path = Path(spec)
        if not path.exists():
            raise ConfigError(f"--config {spec!r} is neither a preset {sorted(PRESETS)} nor an existing file")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{spec}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "model" not in doc:
        raise ConfigError("config needs a 'model' section")
    unknown = set(doc.get("train", {})) - set(TRAIN_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    try:
        config = ModelConfig.from_dict(dict(doc["model"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad model config: {exc}") from None
    return config, {**TRAIN_DEFAULTS, **doc.get("train", {})}


def _with_seed(config: ModelConfig, seed: int | None) -> ModelConfig:
    if seed is None:
        return config
    return ModelConfig.from_dict({**config.to_dict(), "seed": seed})


def _meta(args, command: str, config: ModelConfig | None, seed: int, **extra) -> dict:
    paths = ("data", "ckpt", "config")
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "command", *paths)}
    meta = {
        "tool": "attn-relevance",
        "tool_version": __version__,
        "command": command,
        "seed": seed,
        "config_hash": config.digest() if config is not None else None,
        "flags_hash": hashlib.sha256(json.dumps(flags, sort_keys=True).encode()).hexdigest()[:16],
    }
    # inputs are identified by content so the report does not depend on where they live
    for key in paths:
        value = getattr(args, key, None)
        if value and Path(value).is_file():
            meta[f"{key}_sha256"] = hashlib.sha256(Path(value).read_bytes()).hexdigest()[:16]
    meta.update(extra)
    return meta


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _methods(text: str) -> list[MethodId]:
    return [as_method(m.strip()) for m in text.split(",") if m.strip()]


def _check_data(config: ModelConfig, data) -> None:
    if not data:
        raise RejectedInput("dataset is empty")
    s = data[0]
    if config.is_detection != s.is_detection:
        kind = "detection" if s.is_detection else "VQA"
        raise ConfigError(f"architecture {config.architecture.value} does not match {kind} data")
    if len(s.image) != config.image_tokens or (not config.is_detection and len(s.text) != config.text_tokens):
        raise ConfigError(
            f"data has {len(s.text)} text / {len(s.image)} image tokens, config expects "
            f"{config.text_tokens} / {config.image_tokens}"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    config = load_run_config(args.config)[0] if args.config else None
    if args.kind == "vqa":
        kw = {}
        if config is not None:
            if config.is_detection:
                raise ConfigError(f"--kind vqa does not fit architecture {config.architecture.value}")
            kw = dict(
                text_tokens=config.text_tokens,
                image_tokens=config.image_tokens,
                text_vocab=config.text_vocab,
                image_vocab=config.image_vocab,
            )
        samples = gen_vqa_task(seed, args.n, **kw)
    else:
        kw = {}
        if config is not None:
            if not config.is_detection:
                raise ConfigError(f"--kind detect does not fit architecture {config.architecture.value}")
            grid = int(round(config.image_tokens**0.5))
            if grid * grid != config.image_tokens:
                raise ConfigError("detection image_tokens must be a square grid")
            kw = dict(grid=grid, classes=config.queries)
        samples = gen_detection_task(seed, args.n, **kw)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(samples, args.out)
    log.info("wrote %d %s samples to %s", len(samples), args.kind, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    config, opts = load_run_config(args.config)
    config = _with_seed(config, args.seed)
    data = load_dataset(args.data)
    _check_data(config, data)
    model = train(build_model(config), data, int(opts["epochs"]), float(opts["lr"]), int(opts["batch_size"]))
    acc = accuracy(model, data)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out, extra={"seed": config.seed, "train": opts, "train_accuracy": acc})
    print(f"train_accuracy {acc:.6f}")
    return EXIT_OK


def _parse_target(text: str, model, logits):
    """Target selector for one sample; see the README for the accepted forms."""
    cfg = model.config
    if cfg.is_detection:
        if text == "predicted":
            probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
            probs /= probs.sum(axis=-1, keepdims=True)
            q = int(np.argmax(probs[:, :-1].max(axis=-1)))
            return (q, int(np.argmax(probs[q, :-1])))
        if text == "label":
            raise RejectedInput("--target label needs a classification model; use q or q:c")
        parts = text.split(":")
        try:
            return tuple(int(p) for p in parts) if len(parts) == 2 else int(parts[0])
        except ValueError:
            raise RejectedInput(f"bad --target {text!r}") from None
    if text == "predicted":
        return int(np.argmax(logits))
    if text == "label":
        return None
    try:
        return int(text)
    except ValueError:
        raise RejectedInput(f"bad --target {text!r}") from None


def cmd_explain(args) -> int:
    model = load_checkpoint(args.ckpt)
    method, variant = as_method(args.method), as_variant(args.variant)
    check_compatible(method, variant, model.architecture)
    data = load_dataset(args.data)
    _check_data(model.config, data)
    if not 0 <= args.sample < len(data):
        raise RejectedInput(f"--sample {args.sample} outside the {len(data)} samples")
    sample = data[args.sample]
    logits = forward(model, sample).logits
    target = _parse_target(args.target, model, logits)
    if target is None:
        target = sample.label
    tr = trace_batch(model, [sample], [target])[0]
    state = relevance_state(tr, method, variant)
    out = _out_dir(args.out)
    meta = _meta(
        args,
        "explain",
        model.config,
        args.seed if args.seed is not None else 0,
        architecture=model.architecture.value,
        method=method.value,
        variant=variant.value,
        target=list(tr.target),
        sample=args.sample,
        sizes=state.sizes,
    )
    doc = {"meta": meta, "maps": state.to_dict()}
    if model.config.is_detection:
        q = tr.target[0]
        row = extract_query(state, q)
        doc["scores"] = {f"query{q}": row.tolist()}
        write_pgm(out / f"query{q}.pgm", to_gray(as_grid(row)))
        lg, rows = query_relevance(model, [sample], method, variant)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            g = sample.grid
            masks = build_masks(rows[0], lg[0], (g, g), (4 * g, 4 * g), (g * PATCH, g * PATCH), method.value)
        for m in masks.masks:
            write_pgm(out / f"mask_q{m.query}.pgm", m.mask * 255)
        write_json(out / "masks.json", {"meta": meta, "masks": masks.index()})
    else:
        text, image = extract_cls(state)
        doc["scores"] = {"text": text.tolist(), "image": image.tolist()}
        write_pgm(out / "text.pgm", to_gray(text))
        write_pgm(out / "image.pgm", to_gray(as_grid(image)))
    write_json(out / "relevancy.json", doc)
    return EXIT_OK


def _load_eval(args):
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    _check_data(model.config, data)
    return model, data


def cmd_eval_perturb(args) -> int:
    model, data = _load_eval(args)
    if model.config.is_detection:
        raise RejectedInput(f"eval-perturb needs a classification model, got {model.architecture.value}")
    methods = _methods(args.method)
    report = compare_report(model, data, methods, target=args.target, workers=args.workers)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else 0
    meta = _meta(args, "eval-perturb", model.config, seed, methods=[m.value for m in methods], n=len(data))
    write_json(out / "report.json", {"meta": meta, **report.to_dict()})
    for name, curves in report.curves.items():
        for setting, curve in curves.items():
            (out / f"curve_{name}_{setting}.csv").write_text(curve.to_csv(), encoding="utf-8")
    return EXIT_OK


def _seg_report(model, data, methods=(), variants=None, workers=1, target_size=None):
    if target_size is not None:
        if target_size < 1:
            raise RejectedInput(f"--target-size must be >= 1, got {target_size}")
        target_size = (target_size, target_size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return evaluate_segmentation(
            model, data, methods, patch=PATCH, target_size=target_size, variants=variants, workers=workers
        )


def cmd_eval_seg(args) -> int:
    model, data = _load_eval(args)
    if not model.config.is_detection:
        raise RejectedInput(f"eval-seg needs an EncoderDecoder model, got {model.architecture.value}")
    methods = _methods(args.method)
    table = _seg_report(model, data, methods, workers=args.workers, target_size=args.target_size)
    seed = args.seed if args.seed is not None else 0
    meta = _meta(args, "eval-seg", model.config, seed, methods=[m.value for m in methods], n=len(data))
    write_json(_out_dir(args.out) / "report.json", {"meta": meta, "table": table})
    return EXIT_OK


def cmd_ablate(args) -> int:
    model, data = _load_eval(args)
    if model.architecture is Architecture.PURE_SELF:
        raise RejectedInput(
            f"ablation variants are indistinguishable on architecture {model.architecture.value}; "
            "use a SelfPlusCo or EncoderDecoder checkpoint"
        )
    rows = {v.value: (MethodId.OURS, v) for v in Variant}
    if model.config.is_detection:
        by_variant = _seg_report(model, data, variants=rows, workers=args.workers, target_size=args.target_size)
    else:
        report = compare_report(model, data, [], target=args.target, variants=rows, workers=args.workers)
        by_variant = {
            name: {**report.table[name], **{f"hit_{m}": report.hit_rates[name][m] for m in MODALITIES}}
            for name in rows
        }
    columns = list(rows)
    metrics = list(next(iter(by_variant.values())))
    table = {metric: {col: by_variant[col][metric] for col in columns} for metric in metrics}
    seed = args.seed if args.seed is not None else 0
    meta = _meta(args, "ablate", model.config, seed, n=len(data))
    write_json(_out_dir(args.out) / "ablation.json", {"meta": meta, "columns": columns, "rows": table})
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attn-relevance", description="Attention relevancy toolkit on synthetic tasks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=None, help="random seed (default 0, or the config's)")
        sp.add_argument("--out", required=True, help="output file (gen-data, train) or directory")
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic dataset as JSON lines")
    sp.add_argument("--kind", choices=("vqa", "detect"), required=True)
    sp.add_argument("--n", type=int, required=True, help="number of samples")
    sp.add_argument("--config", help="preset or config file whose token counts the data should match")

    sp = add("train", cmd_train, "train a model and write a checkpoint")
    sp.add_argument("--config", required=True, help=f"preset {sorted(PRESETS)} or JSON config file")
    sp.add_argument("--data", required=True)

    sp = add("explain", cmd_explain, "relevancy dump and heatmaps for one sample")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--sample", type=int, default=0)
    sp.add_argument("--method", default=MethodId.OURS.value)
    sp.add_argument("--variant", default=Variant.FULL.value)
    sp.add_argument("--target", default="predicted", help="predicted | label | class k | query q | q:c")

    for name, func, help_ in (
        ("eval-perturb", cmd_eval_perturb, "perturbation AUCs and hit rates"),
        ("eval-seg", cmd_eval_seg, "segmentation AP/AR and mean IoU"),
        ("ablate", cmd_ablate, "compare the four propagation variants"),
    ):
        sp = add(name, func, help_)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--workers", type=int, default=1)
        if name != "ablate":
            sp.add_argument("--method", default=ALL_METHODS, help="comma-separated method ids ('' for none)")
        if name != "eval-seg":
            sp.add_argument("--target", choices=("predicted", "label"), default="predicted")
        if name != "eval-perturb":
            sp.add_argument("--target-size", type=int, default=None, help="mask side before resizing (default 4x the grid)")
    return p


def _setup_logging() -> None:
    level = os.environ.get("ATTN_RELEVANCE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_REJECTED
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AttnRelevanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
