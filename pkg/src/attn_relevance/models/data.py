"""Synthetic tasks with known ground truth.

Toy VQA
    The text is ``[CLS, w_1 .. w_{t-2}, SEP]`` and the image is ``i`` symbol
    tokens.  Exactly one content word and one image token carry a *key*
    symbol; every other token is a distractor.  The label combines one bit
    from each key symbol, ``label = 2 * text_bit + image_bit`` (4 classes), so
    each modality alone still pins down half of the answer.

Toy detection
    A ``g x g`` grid of symbol tokens holds 1-3 non-overlapping axis-aligned
    rectangles of distinct classes over a noisy background.  Class ``k`` cells
    use symbols reserved for ``k``.  Masks are tile exact: a grid cell is
    ``patch x patch`` pixels of the original image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import RejectedInput
from .config import CLS_ID, MASK_ID, SEP_ID

# toy VQA vocabulary layout
TEXT_KEYS = (3, 4, 5, 6)
IMAGE_KEYS = (1, 2, 3, 4)
VQA_CLASSES = 4

# toy detection vocabulary layout
BACKGROUND_SYMBOLS = (1, 2, 3)


def class_symbols(k: int) -> tuple[int, int]:
    base = len(BACKGROUND_SYMBOLS) + 1 + 2 * k
    return base, base + 1


def detection_vocab(classes: int) -> int:
    return len(BACKGROUND_SYMBOLS) + 1 + 2 * classes


def key_bit(symbol: int, keys: tuple[int, ...]) -> int:
    return keys.index(symbol) % 2


def vqa_label(text_symbol: int, image_symbol: int) -> int:
    return 2 * key_bit(text_symbol, TEXT_KEYS) + key_bit(image_symbol, IMAGE_KEYS)


@dataclass(frozen=True)
class DetObject:
    class_id: int
    box: tuple[int, int, int, int]  # r0, c0, r1, c1 in grid cells, end exclusive
    cells: tuple[int, ...]  # flat grid indices covered by the rectangle

    @property
    def area(self) -> int:
        return len(self.cells)

    def mask(self, grid: int, patch: int = 1) -> np.ndarray:
        m = np.zeros((grid, grid), dtype=np.uint8)
        r0, c0, r1, c1 = self.box
        m[r0:r1, c0:c1] = 1
        return np.kron(m, np.ones((patch, patch), dtype=np.uint8)) if patch > 1 else m


@dataclass(frozen=True)
class SyntheticSample:
    image: tuple[int, ...]
    text: tuple[int, ...] | None = None
    label: int | None = None
    gt_text: int | None = None
    gt_image: int | None = None
    grid: int | None = None
    objects: tuple[DetObject, ...] = field(default_factory=tuple)

    @property
    def is_detection(self) -> bool:
        return self.grid is not None

    def query_targets(self, queries: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-query class labels, normalized boxes and box-present flags.

        Query ``k`` owns class ``k``; absent classes get the no-object label
        ``queries``.
        """
        labels = np.full(queries, queries, dtype=np.int64)
        boxes = np.zeros((queries, 4))
        present = np.zeros(queries)
        for obj in self.objects:
            if obj.class_id >= queries:
                raise RejectedInput(f"object class {obj.class_id} has no query")
            labels[obj.class_id] = obj.class_id
            boxes[obj.class_id] = np.array(obj.box, dtype=float) / self.grid
            present[obj.class_id] = 1.0
        return labels, boxes, present

    def to_json(self) -> str:
        d: dict = {"image": list(self.image)}
        if self.is_detection:
            d["grid"] = self.grid
            d["objects"] = [
                {"class": o.class_id, "box": list(o.box), "cells": list(o.cells)} for o in self.objects
            ]
        else:
            d.update(text=list(self.text), label=self.label, gt_text=self.gt_text, gt_image=self.gt_image)
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "SyntheticSample":
        d = json.loads(line)
        if "grid" in d:
            objs = tuple(
                DetObject(o["class"], tuple(o["box"]), tuple(o["cells"])) for o in d["objects"]
            )
            return cls(image=tuple(d["image"]), grid=d["grid"], objects=objs)
        return cls(
            image=tuple(d["image"]),
            text=tuple(d["text"]),
            label=d["label"],
            gt_text=d["gt_text"],
            gt_image=d["gt_image"],
        )


def gen_vqa_task(
    seed: int,
    n: int,
    text_tokens: int = 6,
    image_tokens: int = 8,
    text_vocab: int = 12,
    image_vocab: int = 12,
) -> list[SyntheticSample]:
    if n <= 0:
        raise RejectedInput("n must be positive")
    if text_tokens < 3:
        raise RejectedInput("toy VQA text needs CLS, SEP and at least one word")
    if text_vocab <= max(TEXT_KEYS) + 1 or image_vocab <= max(IMAGE_KEYS) + 1:
        raise RejectedInput("vocabularies too small for keys plus distractors")
    rng = np.random.default_rng(seed)
    text_distract = np.arange(max(TEXT_KEYS) + 1, text_vocab)
    image_distract = np.arange(max(IMAGE_KEYS) + 1, image_vocab)
    samples = []
    for _ in range(n):
        words = rng.choice(text_distract, size=text_tokens - 2)
        tpos = int(rng.integers(text_tokens - 2))
        tkey = int(rng.choice(TEXT_KEYS))
        words[tpos] = tkey
        image = rng.choice(image_distract, size=image_tokens)
        ipos = int(rng.integers(image_tokens))
        ikey = int(rng.choice(IMAGE_KEYS))
        image[ipos] = ikey
        samples.append(
            SyntheticSample(
                image=tuple(int(v) for v in image),
                text=(CLS_ID, *(int(v) for v in words), SEP_ID),
                label=vqa_label(tkey, ikey),
                gt_text=tpos + 1,
                gt_image=ipos,
            )
        )
    return samples


def _place(rng, grid, occupied, min_side, max_side):
    for _ in range(200):
        h = int(rng.integers(min_side, max_side + 1))
        w = int(rng.integers(min_side, max_side + 1))
        r0 = int(rng.integers(0, grid - h + 1))
        c0 = int(rng.integers(0, grid - w + 1))
        if not occupied[r0 : r0 + h, c0 : c0 + w].any():
            return r0, c0, r0 + h, c0 + w
    return None


def gen_detection_task(
    seed: int,
    n: int,
    grid: int = 8,
    classes: int = 3,
    min_side: int = 2,
    max_side: int = 6,
) -> list[SyntheticSample]:
    if n <= 0:
        raise RejectedInput("n must be positive")
    if grid < 2 or classes < 1:
        raise RejectedInput("grid must be >= 2 and classes >= 1")
    max_side = min(max_side, grid)
    min_side = min(min_side, max_side)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        cells = rng.choice(BACKGROUND_SYMBOLS, size=(grid, grid))
        occupied = np.zeros((grid, grid), dtype=bool)
        count = int(rng.integers(1, min(3, classes) + 1))
        objs = []
        for cls_id in sorted(rng.choice(classes, size=count, replace=False).tolist()):
            box = _place(rng, grid, occupied, min_side, max_side)
            if box is None:
                continue
            r0, c0, r1, c1 = box
            occupied[r0:r1, c0:c1] = True
            cells[r0:r1, c0:c1] = rng.choice(class_symbols(cls_id), size=(r1 - r0, c1 - c0))
            flat = tuple(int(r * grid + c) for r in range(r0, r1) for c in range(c0, c1))
            objs.append(DetObject(int(cls_id), box, flat))
        samples.append(
            SyntheticSample(image=tuple(int(v) for v in cells.reshape(-1)), grid=grid, objects=tuple(objs))
        )
    return samples


def save_dataset(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def load_dataset(path) -> list[SyntheticSample]:
    text = Path(path).read_text(encoding="utf-8")
    return [SyntheticSample.from_json(line) for line in text.splitlines() if line.strip()]


def mask_tokens(ids: np.ndarray, positions) -> np.ndarray:
    out = np.array(ids, copy=True)
    out[..., list(positions)] = MASK_ID
    return out
