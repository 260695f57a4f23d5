"""Detection relevancy rows to segmentation masks, plus desk-scale AP/AR.

For every query whose best object-class probability exceeds 0.5, the query's
encoder-token relevance row is reshaped to the token grid, binarized with
Otsu's threshold, bilinearly upsampled to the target mask size, passed
through ``sigmoid(.) > 0.5`` and finally nearest-upsampled to the original
image size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .baselines import as_method, relevance_state
from .errors import RejectedInput
from .evaluation import _map_ordered
from .models.network import Model, batch_inputs, forward_batch, trace_batch
from .numeric import softmax_rows
from .relevancy import Variant, extract_query

OTSU_BINS = 256


class DegenerateHeatmap(RejectedInput):
    """Otsu was asked to split a constant heatmap."""


def _otsu_split(x: np.ndarray) -> tuple[int, np.ndarray]:
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DegenerateHeatmap("heatmap is constant; no foreground/background split exists")
    bins = np.clip(np.floor((x - lo) / (hi - lo) * OTSU_BINS), 0, OTSU_BINS - 1).astype(np.int64)
    counts = np.bincount(bins, minlength=OTSU_BINS).astype(float)
    sums = np.bincount(bins, weights=x, minlength=OTSU_BINS)
    n, total = counts.sum(), sums.sum()
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    w1 = n - w0
    valid = (w0 > 0) & (w1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / w0
        mu1 = (total - s0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2 / (n * n)
    between = np.where(valid, between, -np.inf)
    return int(np.argmax(between)), bins


def otsu(heatmap) -> float:
    """Threshold maximizing between-class variance on a 256-bin histogram.

    Bins span ``[min, max]`` uniformly; class means use the actual values in
    each bin.  The returned threshold lies midway between the largest
    background value and the smallest foreground value, so
    ``heatmap > threshold`` is the foreground mask.  Negative values are
    accepted (the NoAggregation ablation can produce them).
    """
    x = np.asarray(heatmap, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise RejectedInput("empty heatmap")
    k, bins = _otsu_split(x)
    return 0.5 * (float(x[bins <= k].max()) + float(x[bins > k].min()))


def otsu_mask(heatmap) -> tuple[np.ndarray, bool]:
    """Foreground mask and a degenerate flag (constant heatmap -> all background)."""
    h = np.asarray(heatmap, dtype=np.float64)
    try:
        thr = otsu(h)
    except DegenerateHeatmap:
        warnings.warn("constant relevancy heatmap; emitting an empty mask", RuntimeWarning, stacklevel=2)
        return np.zeros(h.shape, dtype=np.uint8), True
    return (h > thr).astype(np.uint8), False


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: output 0 and n_out-1 sample input 0 and n_in-1 exactly
    U = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = o * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        U[o, i0] += 1.0 - w
        U[o, i1] += w
    return U


def upsample_bilinear(img, size: tuple[int, int]) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return _bilinear_matrix(img.shape[0], size[0]) @ img @ _bilinear_matrix(img.shape[1], size[1]).T


def upsample_nearest(img, size: tuple[int, int]) -> np.ndarray:
    img = np.asarray(img)
    rows = (np.arange(size[0]) * img.shape[0]) // size[0]
    cols = (np.arange(size[1]) * img.shape[1]) // size[1]
    return img[np.ix_(rows, cols)]


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass
class SegMask:
    query: int
    class_id: int
    probability: float
    mask: np.ndarray  # uint8 {0, 1} at original resolution
    degenerate: bool = False


@dataclass
class SegMaskSet:
    masks: list[SegMask] = field(default_factory=list)
    method: str = ""

    def __len__(self):
        return len(self.masks)

    def index(self) -> list[dict]:
        return [
            {"query": m.query, "class": m.class_id, "probability": m.probability, "degenerate": m.degenerate}
            for m in self.masks
        ]


def kept_queries(logits, no_object: bool = True) -> list[tuple[int, int, float]]:
    """``(query, class, probability)`` for queries whose best object class has p > 0.5."""
    probs = softmax_rows(np.asarray(logits, dtype=np.float64))
    obj = probs[:, :-1] if no_object else probs
    kept = []
    for j in range(obj.shape[0]):
        c = int(np.argmax(obj[j]))
        if obj[j, c] > 0.5:
            kept.append((j, c, float(obj[j, c])))
    return kept


def build_masks(
    rde,
    logits,
    grid: tuple[int, int],
    target_size: tuple[int, int],
    original_size: tuple[int, int],
    method: str = "",
    no_object: bool = True,
) -> SegMaskSet:
    """Segmentation masks from per-query relevancy rows (``rde[j]`` for query ``j``)."""
    rde = np.asarray(rde, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if rde.ndim != 2 or rde.shape[0] != logits.shape[0]:
        raise RejectedInput(f"relevancy rows {rde.shape} do not align with logits {logits.shape}")
    if rde.shape[1] != grid[0] * grid[1]:
        raise RejectedInput(f"relevancy row length {rde.shape[1]} does not match grid {grid}")
    out = SegMaskSet(method=method)
    for j, c, p in kept_queries(logits, no_object):
        small, degenerate = otsu_mask(rde[j].reshape(grid))
        up = upsample_bilinear(small, target_size)
        binary = (_sigmoid(up) > 0.5).astype(np.uint8)
        out.masks.append(SegMask(j, c, p, upsample_nearest(binary, original_size), degenerate))
    return out


def iou(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise RejectedInput(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class GroundTruth:
    class_id: int
    mask: np.ndarray
    area: int  # in grid cells


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))


def ap_ar(
    predictions: list[SegMaskSet],
    ground_truth: list[list[GroundTruth]],
    iou_threshold: float = 0.2,
    medium: tuple[float, float] = (8, 32),
    large: float = 32,
    cell_pixels: int = 1,
) -> dict[str, float | None]:
    """AP / AR overall and per size bucket.

    Predictions are matched greedily in order of decreasing probability to the
    best-overlapping unmatched ground truth of the same class in the same image
    (IoU >= threshold).  Inside a size bucket, ground truth outside the bucket
    is ignored, as are unmatched predictions whose own area falls outside it.
    Metrics are computed per class and averaged over classes with ground truth
    in the bucket; ``None`` when there is none.
    """
    if len(predictions) != len(ground_truth):
        raise RejectedInput("one prediction set per image is required")
    buckets = {"": (0, np.inf), "_medium": medium, "_large": (large, np.inf)}
    classes = sorted({g.class_id for gts in ground_truth for g in gts})
    result: dict[str, float | None] = {}
    for suffix, (lo, hi) in buckets.items():
        aps, ars = [], []
        for c in classes:
            in_bucket = [[g.class_id == c and lo <= g.area < hi for g in gts] for gts in ground_truth]
            n_gt = sum(sum(flags) for flags in in_bucket)
            if n_gt == 0:
                continue
            preds = [
                (m.probability, img, m)
                for img, ms in enumerate(predictions)
                for m in ms.masks
                if m.class_id == c
            ]
            preds.sort(key=lambda t: -t[0])
            matched = [[False] * len(gts) for gts in ground_truth]
            tp = []
            for _, img, m in preds:
                best, best_k = iou_threshold, -1
                for k, g in enumerate(ground_truth[img]):
                    if g.class_id != c or matched[img][k]:
                        continue
                    v = iou(m.mask, g.mask)
                    if v >= best:
                        best, best_k = v, k
                if best_k >= 0:
                    matched[img][best_k] = True
                    if in_bucket[img][best_k]:
                        tp.append(1)
                    continue
                area = m.mask.sum() / cell_pixels
                if lo <= area < hi:
                    tp.append(0)
            tp = np.array(tp, dtype=float)
            aps.append(_average_precision(tp, n_gt))
            ars.append(float(tp.sum() / n_gt))
        result["AP" + suffix] = float(np.mean(aps)) if aps else None
        result["AR" + suffix] = float(np.mean(ars)) if ars else None
    return result


def ground_truth_for(sample, patch: int) -> list[GroundTruth]:
    return [GroundTruth(o.class_id, o.mask(sample.grid, patch), o.area) for o in sample.objects]


def query_relevance(model: Model, samples, method, variant=Variant.FULL) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``[n, d, c]`` and relevancy rows ``[n, d, e]``.

    Row ``j`` of sample ``b`` is explained w.r.t. query ``j``'s top object class.
    """
    if not model.config.is_detection:
        raise RejectedInput(f"segmentation needs an EncoderDecoder model, got {model.architecture.value}")
    method = as_method(method)
    logits = forward_batch(model, *batch_inputs(model, samples)).logits.value
    d, e = model.config.queries, model.config.image_tokens
    rows = np.zeros((len(samples), d, e))
    for j in range(d):
        for b, tr in enumerate(trace_batch(model, samples, [j] * len(samples))):
            rows[b, j] = extract_query(relevance_state(tr, method, variant), j)
    return logits, rows


def evaluate_segmentation(
    model: Model,
    dataset,
    methods,
    patch: int = 4,
    target_size: tuple[int, int] | None = None,
    iou_threshold: float = 0.2,
    variants: dict | None = None,
    chunk: int = 64,
    workers: int = 1,
) -> dict[str, dict]:
    """AP/AR per size bucket and mean mask IoU for each method.

    Mean IoU is over kept queries: each mask against the ground-truth mask of
    its predicted class (0 when that class is absent from the image).
    """
    rows_spec = variants if variants is not None else {as_method(m).value: (m, Variant.FULL) for m in methods}
    if not model.config.is_detection:
        raise RejectedInput(f"segmentation needs an EncoderDecoder model, got {model.architecture.value}")
    grid = dataset[0].grid
    g = (grid, grid)
    target_size = target_size or (4 * grid, 4 * grid)
    orig = (grid * patch, grid * patch)
    gts = [ground_truth_for(s, patch) for s in dataset]
    report = {}
    for name, (method, variant) in rows_spec.items():
        preds = []
        jobs = [(model, dataset[a : a + chunk], method, variant) for a in range(0, len(dataset), chunk)]
        for logits, rows in _map_ordered(query_relevance, jobs, workers):
            for b in range(len(logits)):
                preds.append(build_masks(rows[b], logits[b], g, target_size, orig, method=name))
        ious = []
        for ms, gt in zip(preds, gts):
            for m in ms.masks:
                match = [x for x in gt if x.class_id == m.class_id]
                ious.append(iou(m.mask, match[0].mask) if match else 0.0)
        metrics = ap_ar(preds, gts, iou_threshold, cell_pixels=patch * patch)
        metrics["mean_iou"] = float(np.mean(ious)) if ious else 0.0
        metrics["kept"] = len(ious)
        report[name] = metrics
    return report
