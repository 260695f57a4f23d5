"""Micro-transformers for the three attention wirings.

``PureSelf``
    text ++ image joint sequence (plus a per-modality segment embedding),
    ``layers`` self-attention blocks, classifier on the CLS slot (joint 0).
``SelfPlusCo``
    per layer: text self-attention, image self-attention, then both
    co-attention directions reading the post-self states, then one feed-forward
    per modality.  Classifier on the text CLS slot.
``EncoderDecoder``
    ``layers`` encoder self-attention blocks over the image grid, then per
    decoder layer: query self-attention, cross-attention into the encoder
    output, feed-forward.  Per-query class logits and boxes.

Every attention module is ``x + (softmax(Q K^T / sqrt(d_h)) V) W_o`` and every
feed-forward is ``x + tanh(x W + b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import numeric as nm
from ..errors import RejectedInput
from .config import ARCH_KINDS, KIND_DOMAINS, MASK_ID, Architecture, ModelConfig, RecordKind


@dataclass
class AttentionRecord:
    kind: RecordKind
    layer_index: int
    A: np.ndarray  # [h, s, q]
    gradA: np.ndarray | None = None

    @property
    def domains(self) -> tuple[str, str]:
        return KIND_DOMAINS[self.kind]


@dataclass
class ForwardTrace:
    architecture: Architecture
    records: list[AttentionRecord]
    logits: np.ndarray  # [c] or [d, c]
    sizes: dict[str, int]
    boxes: np.ndarray | None = None
    target: tuple[int, ...] | None = None
    tape: nm.GradTape | None = field(default=None, repr=False, compare=False)
    batch_row: int = 0

    @property
    def has_gradients(self) -> bool:
        return all(r.gradA is not None for r in self.records)


class Model:
    """Configuration plus named float64 parameter arrays."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @property
    def architecture(self) -> Architecture:
        return self.config.architecture

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([self.params[k].reshape(-1) for k in self.params])

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.params.items()]

    def record_kinds(self) -> list[tuple[RecordKind, int]]:
        """Kinds and layer indices of the records a forward pass produces."""
        L = self.config.layers
        if self.architecture is Architecture.PURE_SELF:
            return [(RecordKind.SELF_JOINT, l) for l in range(L)]
        if self.architecture is Architecture.SELF_PLUS_CO:
            return [(k, l) for l in range(L) for k in ARCH_KINDS[Architecture.SELF_PLUS_CO]]
        enc = [(RecordKind.ENCODER_SELF, l) for l in range(L)]
        dec = [(k, l) for l in range(L) for k in (RecordKind.DECODER_SELF, RecordKind.DECODER_CROSS)]
        return enc + dec

    def sizes(self) -> dict[str, int]:
        c = self.config
        if self.architecture is Architecture.ENCODER_DECODER:
            return {"e": c.image_tokens, "d": c.queries}
        sizes = {"t": c.text_tokens, "i": c.image_tokens}
        if self.architecture is Architecture.PURE_SELF:
            sizes["j"] = c.text_tokens + c.image_tokens
        return sizes


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _module_names(config: ModelConfig) -> tuple[list[str], list[str]]:
    """Names of attention modules and feed-forward modules, in init order."""
    L = config.layers
    arch = config.architecture
    if arch is Architecture.PURE_SELF:
        return [f"joint{l}.attn" for l in range(L)], [f"joint{l}.ffn" for l in range(L)]
    if arch is Architecture.SELF_PLUS_CO:
        attn = [f"{m}{l}.attn" for l in range(L) for m in ("text", "image", "t_from_i", "i_from_t")]
        ffn = [f"{m}{l}.ffn" for l in range(L) for m in ("text", "image")]
        return attn, ffn
    attn = [f"enc{l}.attn" for l in range(L)]
    attn += [f"dec{l}.{m}" for l in range(L) for m in ("self", "cross")]
    ffn = [f"enc{l}.ffn" for l in range(L)] + [f"dec{l}.ffn" for l in range(L)]
    return attn, ffn


def build_model(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    D = config.embed_dim
    w_scale = 1.0 / math.sqrt(D)
    params: dict[str, np.ndarray] = {}

    def normal(name, shape, std):
        params[name] = rng.normal(0.0, std, size=shape)

    def zeros(name, shape):
        params[name] = np.zeros(shape)

    normal("image_embed", (config.image_vocab, D), 1.0)
    params["image_embed"][MASK_ID] = 0.0
    normal("image_pos", (config.image_tokens, D), 0.5)
    if config.is_detection:
        normal("query_embed", (config.queries, D), 1.0)
    else:
        normal("text_embed", (config.text_vocab, D), 1.0)
        params["text_embed"][MASK_ID] = 0.0
        normal("text_pos", (config.text_tokens, D), 0.5)
        if config.architecture is Architecture.PURE_SELF:
            normal("segment", (2, D), 0.5)

    attn_names, ffn_names = _module_names(config)
    for name in attn_names:
        for proj in ("q", "k", "v", "o"):
            normal(f"{name}.w{proj}", (D, D), w_scale)
            zeros(f"{name}.b{proj}", (D,))
    for name in ffn_names:
        normal(f"{name}.w", (D, D), w_scale)
        zeros(f"{name}.b", (D,))
    normal("cls.w", (D, config.classes), w_scale)
    zeros("cls.b", (config.classes,))
    if config.is_detection:
        normal("box.w", (D, 4), w_scale)
        zeros("box.b", (4,))
    return Model(config, params)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class BatchOutput:
    tape: nm.GradTape
    params: dict[str, nm.Node]
    records: list[tuple[RecordKind, int, nm.Node]]
    logits: nm.Node
    boxes: nm.Node | None


def batch_inputs(model: Model, samples) -> tuple[np.ndarray | None, np.ndarray]:
    """Stack sample token ids into ``[B, t]`` / ``[B, i]`` arrays."""
    cfg = model.config
    image = np.array([s.image for s in samples], dtype=np.int64)
    if image.ndim != 2 or image.shape[1] != cfg.image_tokens:
        raise RejectedInput(f"expected {cfg.image_tokens} image tokens per sample, got shape {image.shape}")
    if image.min() < 0 or image.max() >= cfg.image_vocab:
        raise RejectedInput("image token id outside the vocabulary")
    if cfg.is_detection:
        return None, image
    if any(s.text is None for s in samples):
        raise RejectedInput(f"{cfg.architecture.value} needs text tokens")
    text = np.array([s.text for s in samples], dtype=np.int64)
    if text.ndim != 2 or text.shape[1] != cfg.text_tokens:
        raise RejectedInput(f"expected {cfg.text_tokens} text tokens per sample, got shape {text.shape}")
    if text.min() < 0 or text.max() >= cfg.text_vocab:
        raise RejectedInput("text token id outside the vocabulary")
    return text, image


class _Builder:
    def __init__(self, model: Model, batch: int, overrides):
        self.cfg = model.config
        self.B = batch
        self.tape = nm.GradTape()
        self.P = {k: self.tape.leaf(v, op="param") for k, v in model.params.items()}
        self.records: list[tuple[RecordKind, int, nm.Node]] = []
        self.overrides = overrides or {}

    def linear(self, x, name):
        return x @ self.P[f"{name}.w"] + self.P[f"{name}.b"]

    def ffn(self, x, name):
        return x + nm.tanh(self.linear(x, name))

    def attend(self, xq, xkv, name, kind, layer):
        B, h, dh = self.B, self.cfg.heads, self.cfg.head_dim
        s, q = xq.shape[1], xkv.shape[1]

        def split(x, n):
            return nm.transpose(nm.reshape(x, (B, n, h, dh)), (0, 2, 1, 3))

        Q = split(xq @ self.P[f"{name}.wq"] + self.P[f"{name}.bq"], s)
        K = split(xkv @ self.P[f"{name}.wk"] + self.P[f"{name}.bk"], q)
        V = split(xkv @ self.P[f"{name}.wv"] + self.P[f"{name}.bv"], q)
        A = nm.softmax(nm.scale(Q @ nm.transpose(K, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)))
        idx = len(self.records)
        if idx in self.overrides:
            A = self.tape.leaf(np.broadcast_to(self.overrides[idx], A.shape), op="override")
        self.tape.watch(f"r{idx}", A)
        self.records.append((kind, layer, A))
        O = nm.reshape(nm.transpose(A @ V, (0, 2, 1, 3)), (B, s, h * dh))
        return xq + O @ self.P[f"{name}.wo"] + self.P[f"{name}.bo"]


def forward_batch(model: Model, text_ids, image_ids, overrides: dict[int, np.ndarray] | None = None) -> BatchOutput:
    """Taped forward pass over a batch.

    ``overrides`` maps a record index to a replacement attention map (shape
    ``[B, h, s, q]`` or broadcastable); the softmax output is discarded and the
    replacement enters the graph as a leaf.  Used by the finite-difference
    oracle.
    """
    cfg = model.config
    arch = cfg.architecture
    B = image_ids.shape[0]
    b = _Builder(model, B, overrides)
    P = b.P
    image = nm.gather(P["image_embed"], image_ids) + P["image_pos"]
    boxes = None

    if arch is Architecture.PURE_SELF:
        text = nm.gather(P["text_embed"], text_ids) + P["text_pos"]
        x = nm.concat([text + P["segment"][0], image + P["segment"][1]], axis=1)
        for l in range(cfg.layers):
            x = b.attend(x, x, f"joint{l}.attn", RecordKind.SELF_JOINT, l)
            x = b.ffn(x, f"joint{l}.ffn")
        logits = b.linear(x[:, 0, :], "cls")

    elif arch is Architecture.SELF_PLUS_CO:
        text = nm.gather(P["text_embed"], text_ids) + P["text_pos"]
        for l in range(cfg.layers):
            text = b.attend(text, text, f"text{l}.attn", RecordKind.SELF_TEXT, l)
            image = b.attend(image, image, f"image{l}.attn", RecordKind.SELF_IMAGE, l)
            new_text = b.attend(text, image, f"t_from_i{l}.attn", RecordKind.CROSS_TEXT_FROM_IMAGE, l)
            new_image = b.attend(image, text, f"i_from_t{l}.attn", RecordKind.CROSS_IMAGE_FROM_TEXT, l)
            text = b.ffn(new_text, f"text{l}.ffn")
            image = b.ffn(new_image, f"image{l}.ffn")
        logits = b.linear(text[:, 0, :], "cls")

    else:
        enc = image
        for l in range(cfg.layers):
            enc = b.attend(enc, enc, f"enc{l}.attn", RecordKind.ENCODER_SELF, l)
            enc = b.ffn(enc, f"enc{l}.ffn")
        dec = nm.add(np.zeros((B, cfg.queries, cfg.embed_dim)), P["query_embed"])
        for l in range(cfg.layers):
            dec = b.attend(dec, dec, f"dec{l}.self", RecordKind.DECODER_SELF, l)
            dec = b.attend(dec, enc, f"dec{l}.cross", RecordKind.DECODER_CROSS, l)
            dec = b.ffn(dec, f"dec{l}.ffn")
        logits = b.linear(dec, "cls")
        boxes = nm.sigmoid(b.linear(dec, "box"))

    b.tape.output = logits
    return BatchOutput(b.tape, P, b.records, logits, boxes)


def _trace_from_batch(model: Model, out: BatchOutput, row: int) -> ForwardTrace:
    records = [AttentionRecord(kind, layer, node.value[row]) for kind, layer, node in out.records]
    return ForwardTrace(
        architecture=model.architecture,
        records=records,
        logits=out.logits.value[row],
        sizes=model.sizes(),
        boxes=None if out.boxes is None else out.boxes.value[row],
        tape=out.tape,
        batch_row=row,
    )


def forward(model: Model, sample, overrides: dict[int, np.ndarray] | None = None) -> ForwardTrace:
    text, image = batch_inputs(model, [sample])
    if overrides:
        overrides = {k: np.asarray(v)[None] for k, v in overrides.items()}
    out = forward_batch(model, text, image, overrides)
    return _trace_from_batch(model, out, 0)


def logits_batch(model: Model, samples=None, text_ids=None, image_ids=None) -> np.ndarray:
    if samples is not None:
        text_ids, image_ids = batch_inputs(model, samples)
    return forward_batch(model, text_ids, image_ids).logits.value


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def resolve_target(model: Model, logits: np.ndarray, target) -> tuple[int, ...]:
    """Normalize a target selector to an index into one sample's logits.

    Classification: a class index.  Detection: ``(query, class)``, or a bare
    query index, which selects that query's highest-scoring object class.
    """
    cfg = model.config
    if cfg.is_detection:
        if isinstance(target, (int, np.integer)):
            q = int(target)
            if not 0 <= q < cfg.queries:
                raise RejectedInput(f"query {q} out of range [0, {cfg.queries})")
            return q, int(np.argmax(logits[q, : cfg.classes - 1]))
        q, c = (int(v) for v in target)
        if not (0 <= q < cfg.queries and 0 <= c < cfg.classes):
            raise RejectedInput(f"target {(q, c)} out of range for logits {logits.shape}")
        return q, c
    if isinstance(target, (tuple, list)):
        if len(target) != 1:
            raise RejectedInput(f"classification target must be a class index, got {target!r}")
        target = target[0]
    c = int(target)
    if not 0 <= c < cfg.classes:
        raise RejectedInput(f"class {c} out of range [0, {cfg.classes})")
    return (c,)


def backward_fill(model: Model, trace: ForwardTrace, target) -> ForwardTrace:
    """Return a copy of ``trace`` with ``gradA`` set on every record."""
    if trace.tape is None:
        raise RejectedInput("trace has no tape; produce it with forward()")
    tgt = resolve_target(model, trace.logits, target)
    grads = nm.grad_of(trace.tape, (trace.batch_row, *tgt))
    records = [
        replace(r, gradA=grads[f"r{k}"][trace.batch_row]) for k, r in enumerate(trace.records)
    ]
    return replace(trace, records=records, target=tgt)


def trace_batch(model: Model, samples, targets) -> list[ForwardTrace]:
    """Forward + backward for many samples at once.

    ``targets`` holds one selector per sample (see :func:`resolve_target`).
    Samples never interact inside the network, so one reverse sweep over the
    sum of the selected logits yields every per-sample gradient.
    """
    text, image = batch_inputs(model, samples)
    out = forward_batch(model, text, image)
    logits = out.logits.value
    resolved = [resolve_target(model, logits[b], t) for b, t in enumerate(targets)]
    rows = np.arange(len(samples))
    index = (rows, *(np.array(col) for col in zip(*resolved)))
    grads = nm.grad_of(out.tape, index)
    traces = []
    for b in range(len(samples)):
        tr = _trace_from_batch(model, out, b)
        tr.records = [
            replace(r, gradA=grads[f"r{k}"][b]) for k, r in enumerate(tr.records)
        ]
        tr.target = resolved[b]
        traces.append(tr)
    return traces
