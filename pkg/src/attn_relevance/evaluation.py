"""Perturbation tests, AUC and ground-truth hit rate on the toy VQA task.

Per-token relevance comes from the CLS row of a method's relevancy state,
computed once on the unperturbed input w.r.t. the predicted class (or the
label with ``target="label"``).  Removing a token means replacing its id by
the reserved mask id.  The CLS slot is never removed or ranked.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .baselines import MethodId, as_method, relevance_state
from .errors import RejectedInput
from .models.config import MASK_ID
from .models.network import Model, batch_inputs, forward_batch, trace_batch
from .relevancy import Variant, extract_cls

DEFAULT_FRACTIONS = tuple(k / 10 for k in range(11))
CHUNK = 64
MODALITIES = ("text", "image")
SETTINGS = ("neg_img", "pos_img", "neg_text", "pos_text")


class Polarity(str, Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"


@dataclass
class PerturbationCurve:
    fractions: list[float]
    accuracies: list[float]
    modality: str
    polarity: Polarity
    method: str

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=float)
        if len(f) != len(self.accuracies):
            raise RejectedInput("fractions and accuracies differ in length")
        if len(f) and (f[0] != 0.0 or np.any(np.diff(f) <= 0) or f[-1] > 1.0):
            raise RejectedInput("fractions must start at 0 and increase strictly within [0, 1]")
        acc = np.asarray(self.accuracies, dtype=float)
        if np.any(acc < 0) or np.any(acc > 1):
            raise RejectedInput("accuracies must lie in [0, 1]")

    def to_csv(self) -> str:
        lines = ["fraction,accuracy"]
        lines += [f"{f:.6g},{a:.10g}" for f, a in zip(self.fractions, self.accuracies)]
        return "\n".join(lines) + "\n"


ScoreFn = Callable[[Model, Sequence, str], np.ndarray]


def _check_modality(model: Model, modality: str) -> None:
    if modality not in MODALITIES:
        raise RejectedInput(f"modality must be one of {MODALITIES}, got {modality!r}")
    if model.config.is_detection:
        raise RejectedInput(f"modality {modality!r} is not available in a {model.architecture.value} model")


def _chunks(seq, size=CHUNK):
    return [seq[k : k + size] for k in range(0, len(seq), size)]


def _map_ordered(fn, args_list, workers: int):
    if workers <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args_list)))


def _cls_scores_chunk(model, samples, method, target, variant):
    logits = forward_batch(model, *batch_inputs(model, samples)).logits.value
    if target == "predicted":
        targets = logits.argmax(axis=-1).tolist()
    elif target == "label":
        targets = [s.label for s in samples]
    else:
        raise RejectedInput(f"target must be 'predicted' or 'label', got {target!r}")
    text, image = [], []
    for tr in trace_batch(model, samples, targets):
        t, i = extract_cls(relevance_state(tr, method, variant))
        text.append(t)
        image.append(i)
    return np.array(text), np.array(image)


def cls_scores(
    model: Model,
    dataset,
    method,
    target: str = "predicted",
    variant=Variant.FULL,
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Per-sample text and image relevance vectors, ``{"text": [n, t], "image": [n, i]}``.

    ``method`` is a :class:`MethodId` or a callable ``(model, samples,
    modality) -> [n, tokens]`` scores array.
    """
    if model.config.is_detection:
        raise RejectedInput("CLS scores need a classification model")
    if callable(method):
        return {m: np.asarray(method(model, dataset, m), dtype=float) for m in MODALITIES}
    method = as_method(method)
    parts = _map_ordered(
        _cls_scores_chunk,
        [(model, chunk, method, target, variant) for chunk in _chunks(list(dataset))],
        workers,
    )
    return {
        "text": np.concatenate([p[0] for p in parts]),
        "image": np.concatenate([p[1] for p in parts]),
    }


def candidate_positions(model: Model, modality: str) -> np.ndarray:
    if modality == "text":
        return np.arange(1, model.config.text_tokens)  # CLS is never removed
    return np.arange(model.config.image_tokens)


def removal_order(scores: np.ndarray, polarity) -> np.ndarray:
    """Column order for removal; ties go to the lower index."""
    polarity = Polarity(polarity)
    key = -scores if polarity is Polarity.POSITIVE else scores
    return np.argsort(key, axis=-1, kind="stable")


def n_removed(fraction: float, n: int) -> int:
    return min(n, math.ceil(fraction * n - 1e-9))


def _accuracy_chunk(model, text, image, labels):
    preds = forward_batch(model, text, image).logits.value.argmax(axis=-1)
    return int((preds == labels).sum())


def perturb_curve(
    model: Model,
    dataset,
    method,
    modality: str,
    polarity,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    target: str = "predicted",
    variant=Variant.FULL,
    scores: dict[str, np.ndarray] | None = None,
    workers: int = 1,
) -> PerturbationCurve:
    _check_modality(model, modality)
    polarity = Polarity(polarity)
    if len(fractions) < 2:
        raise RejectedInput("need at least two fractions")
    if scores is None:
        scores = cls_scores(model, dataset, method, target, variant, workers)
    cand = candidate_positions(model, modality)
    order = cand[removal_order(scores[modality][:, cand], polarity)]
    text, image = batch_inputs(model, dataset)
    labels = np.array([s.label for s in dataset])
    rows = np.arange(len(dataset))[:, None]
    accs = []
    for f in fractions:
        k = n_removed(f, len(cand))
        t, i = text.copy(), image.copy()
        target_ids = t if modality == "text" else i
        target_ids[rows, order[:, :k]] = MASK_ID
        jobs = [
            (model, t[a : a + CHUNK], i[a : a + CHUNK], labels[a : a + CHUNK])
            for a in range(0, len(dataset), CHUNK)
        ]
        correct = sum(_map_ordered(_accuracy_chunk, jobs, workers))
        accs.append(correct / len(dataset))
    name = method.value if isinstance(method, MethodId) else getattr(method, "__name__", str(method))
    return PerturbationCurve(list(map(float, fractions)), accs, modality, polarity, name)


def auc(curve) -> float:
    """Trapezoidal area under accuracy over fraction removed."""
    if isinstance(curve, PerturbationCurve):
        x, y = curve.fractions, curve.accuracies
    else:
        x, y = curve
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or x.size != y.size:
        raise RejectedInput("auc needs at least two (fraction, accuracy) points")
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def ground_truth_rank(
    model: Model,
    dataset,
    method,
    modality: str,
    target: str = "predicted",
    variant=Variant.FULL,
    scores: dict[str, np.ndarray] | None = None,
    workers: int = 1,
) -> float:
    """Fraction of samples whose designated token is the top-1 relevant token."""
    _check_modality(model, modality)
    if scores is None:
        scores = cls_scores(model, dataset, method, target, variant, workers)
    cand = candidate_positions(model, modality)
    top = cand[removal_order(scores[modality][:, cand], Polarity.POSITIVE)[:, 0]]
    truth = np.array([s.gt_text if modality == "text" else s.gt_image for s in dataset])
    if np.any(truth == None):  # noqa: E711
        raise RejectedInput("dataset carries no designated tokens")
    return float((top == truth).mean())


@dataclass
class Report:
    table: dict[str, dict[str, float]]
    hit_rates: dict[str, dict[str, float]]
    curves: dict[str, dict[str, PerturbationCurve]]

    def to_dict(self) -> dict:
        return {"table": self.table, "hit_rates": self.hit_rates}


def compare_report(
    model: Model,
    dataset,
    methods,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    target: str = "predicted",
    variants: dict | None = None,
    workers: int = 1,
) -> Report:
    """All four perturbation settings plus hit rate for every method.

    ``variants`` optionally maps a row name to a ``(method, variant)`` pair;
    otherwise each method is run with the full variant under its own name.
    """
    rows = variants if variants is not None else {as_method(m).value: (m, Variant.FULL) for m in methods}
    table, hits, curves = {}, {}, {}
    for name, (method, variant) in rows.items():
        scores = cls_scores(model, dataset, method, target, variant, workers)
        row, row_curves = {}, {}
        for setting in SETTINGS:
            pol, mod = setting.split("_")
            modality = "image" if mod == "img" else "text"
            polarity = Polarity.POSITIVE if pol == "pos" else Polarity.NEGATIVE
            curve = perturb_curve(
                model, dataset, method, modality, polarity, fractions, target, variant, scores, workers
            )
            row[setting] = auc(curve)
            row_curves[setting] = curve
        hit = {m: ground_truth_rank(model, dataset, method, m, scores=scores) for m in MODALITIES}
        row["hit_rate"] = (hit["text"] + hit["image"]) / 2.0
        table[name], hits[name], curves[name] = row, hit, row_curves
    return Report(table, hits, curves)
