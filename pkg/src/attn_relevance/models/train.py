from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from .. import __version__
from .. import numeric as nm
from ..errors import ConfigError, RejectedInput, TrainingError
from .config import ModelConfig
from .network import Model, batch_inputs, forward_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "attn-relevance-checkpoint"
CHECKPOINT_VERSION = 1


def _check_dataset(model: Model, dataset) -> None:
    if not dataset:
        raise RejectedInput("empty dataset")
    if model.config.is_detection != dataset[0].is_detection:
        kind = "detection" if dataset[0].is_detection else "VQA"
        raise ConfigError(f"{model.architecture.value} model cannot train on {kind} data")


def _loss(model: Model, batch):
    text, image = batch_inputs(model, batch)
    out = forward_batch(model, text, image)
    cfg = model.config
    if not cfg.is_detection:
        labels = np.array([s.label for s in batch])
        return out, nm.cross_entropy(out.logits, labels)
    labels, boxes, present = zip(*(s.query_targets(cfg.queries) for s in batch))
    ce = nm.cross_entropy(out.logits, np.stack(labels))
    diff = out.boxes - np.stack(boxes)
    weight = np.stack(present)[..., None]
    sq = nm.mul(nm.mul(diff, diff), weight)
    box_loss = nm.scale(nm.total(sq), 1.0 / max(float(weight.sum()), 1.0))
    return out, ce + box_loss


def train(
    model: Model,
    dataset,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int | None = None,
) -> Model:
    """Minibatch gradient descent on cross-entropy (+ box MSE for detection).

    Returns a new model; the input model is left untouched.  Sample order is
    shuffled per epoch from ``seed`` (default: the model seed).
    """
    _check_dataset(model, dataset)
    if epochs < 0 or lr <= 0 or batch_size < 1:
        raise RejectedInput("need epochs >= 0, lr > 0, batch_size >= 1")
    model = model.copy()
    rng = np.random.default_rng(model.config.seed if seed is None else seed)
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = [dataset[k] for k in order[start : start + batch_size]]
            try:
                out, loss = _loss(model, batch)
            except nm.NumericError as exc:
                raise TrainingError(f"non-finite forward pass in epoch {epoch}") from exc
            if not math.isfinite(float(loss.value)):
                raise TrainingError(f"loss diverged in epoch {epoch}")
            grads = out.tape.gradients(loss, np.array(1.0))
            for name, node in out.params.items():
                g = grads[node.index]
                if g is not None:
                    model.params[name] -= lr * g
            total += float(loss.value) * len(batch)
        log.info("epoch %d loss %.5f", epoch, total / n)
    return model


def predict(model: Model, dataset, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        text, image = batch_inputs(model, chunk)
        preds.append(forward_batch(model, text, image).logits.value.argmax(axis=-1))
    return np.concatenate(preds)


def accuracy(model: Model, dataset) -> float:
    """Top-1 accuracy; per-query class accuracy for detection models."""
    _check_dataset(model, dataset)
    preds = predict(model, dataset)
    if model.config.is_detection:
        labels = np.stack([s.query_targets(model.config.queries)[0] for s in dataset])
    else:
        labels = np.array([s.label for s in dataset])
    return float((preds == labels).mean())


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """JSON container: config, parameter layout, flat parameter vector."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tool_version": __version__,
        "config": model.config.to_dict(),
        "layout": [[name, list(shape)] for name, shape in model.parameter_shapes()],
        "parameters": model.flat_parameters().tolist(),
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=None, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig.from_dict(doc["config"])
    flat = np.array(doc["parameters"], dtype=np.float64)
    params = {}
    offset = 0
    for name, shape in doc["layout"]:
        size = int(np.prod(shape))
        params[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise ConfigError("checkpoint parameter vector does not match its layout")
    return Model(config, params)
