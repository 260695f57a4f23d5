"""Glue between package traces and the list-based oracles."""

import numpy as np

from attn_relevance.models import (
    Architecture,
    AttentionRecord,
    ForwardTrace,
    ModelConfig,
    RecordKind,
    SyntheticSample,
    build_model,
    trace_batch,
)
from attn_relevance.models.config import CLS_ID

import oracles


def _pair(rec):
    return rec.A.tolist(), rec.gradA.tolist()


def oracle_state(trace, variant="Full"):
    """Run the architecture's straight-line oracle over a trace's raw arrays."""
    arch = trace.architecture
    by = {}
    for rec in trace.records:
        by.setdefault(rec.layer_index, {})[rec.kind] = rec
    layers = [by[k] for k in sorted(by)]
    if arch is Architecture.PURE_SELF:
        n = trace.sizes["t"] + trace.sizes["i"]
        return oracles.pure_self([_pair(l[RecordKind.SELF_JOINT]) for l in layers], n, variant)
    if arch is Architecture.SELF_PLUS_CO:
        spec = [
            {
                "tt": _pair(l[RecordKind.SELF_TEXT]),
                "ii": _pair(l[RecordKind.SELF_IMAGE]),
                "ti": _pair(l[RecordKind.CROSS_TEXT_FROM_IMAGE]),
                "it": _pair(l[RecordKind.CROSS_IMAGE_FROM_TEXT]),
            }
            for l in layers
        ]
        return oracles.self_plus_co(spec, trace.sizes["t"], trace.sizes["i"], variant)
    enc = [_pair(l[RecordKind.ENCODER_SELF]) for l in layers]
    dec = [{"dd": _pair(l[RecordKind.DECODER_SELF]), "de": _pair(l[RecordKind.DECODER_CROSS])} for l in layers]
    return oracles.encoder_decoder(enc, dec, trace.sizes["e"], trace.sizes["d"], variant)


def small_config(arch, layers, heads=2, tokens=4, seed=0):
    if arch == "EncoderDecoder":
        return ModelConfig(
            architecture=arch, layers=layers, heads=heads, head_dim=4, text_tokens=0,
            image_tokens=tokens, queries=min(tokens, 3), classes=min(tokens, 3) + 1, image_vocab=8, seed=seed,
        )
    return ModelConfig(
        architecture=arch, layers=layers, heads=heads, head_dim=4, text_tokens=tokens,
        image_tokens=tokens, classes=3, text_vocab=8, image_vocab=8, seed=seed,
    )


def random_sample(config, rng):
    image = tuple(int(v) for v in rng.integers(1, config.image_vocab, size=config.image_tokens))
    if config.is_detection:
        return SyntheticSample(image=image, grid=1)
    words = rng.integers(3, config.text_vocab, size=config.text_tokens - 1)
    return SyntheticSample(image=image, text=(CLS_ID, *(int(v) for v in words)), label=0)


def random_model_trace(rng, arch, layers=None, tokens=None):
    """A (trace, target) pair from a freshly initialized small model."""
    layers = layers or int(rng.integers(1, 4))
    tokens = tokens or int(rng.integers(2, 5))
    cfg = small_config(arch, layers, heads=int(rng.integers(1, 3)), tokens=tokens, seed=int(rng.integers(1 << 30)))
    model = build_model(cfg)
    sample = random_sample(cfg, rng)
    if cfg.is_detection:
        target = (int(rng.integers(cfg.queries)), int(rng.integers(cfg.classes)))
    else:
        target = int(rng.integers(cfg.classes))
    return trace_batch(model, [sample], [target])[0]


def synthetic_trace(rng, arch, layers, heads, sizes, grad_scale=1.0):
    """A trace built from random row-stochastic maps and random gradients."""
    from attn_relevance.models.config import ARCH_KINDS, KIND_DOMAINS

    kinds = ARCH_KINDS[Architecture(arch)]
    dims = dict(sizes)
    if arch == "PureSelf":
        dims["j"] = sizes["t"] + sizes["i"]
    records = []
    order = {
        "PureSelf": [[RecordKind.SELF_JOINT]] * layers,
        "SelfPlusCo": [[RecordKind.SELF_TEXT, RecordKind.SELF_IMAGE,
                        RecordKind.CROSS_TEXT_FROM_IMAGE, RecordKind.CROSS_IMAGE_FROM_TEXT]] * layers,
    }
    if arch == "EncoderDecoder":
        seq = [(RecordKind.ENCODER_SELF, l) for l in range(layers)]
        seq += [(k, l) for l in range(layers) for k in (RecordKind.DECODER_SELF, RecordKind.DECODER_CROSS)]
    else:
        seq = [(k, l) for l, ks in enumerate(order[arch]) for k in ks]
    for kind, layer in seq:
        assert kind in kinds
        s, q = KIND_DOMAINS[kind]
        logits = rng.normal(size=(heads, dims[s], dims[q])) * 2
        A = np.exp(logits - logits.max(-1, keepdims=True))
        A /= A.sum(-1, keepdims=True)
        G = rng.normal(size=A.shape) * grad_scale
        records.append(AttentionRecord(kind, layer, A, G))
    return ForwardTrace(Architecture(arch), records, np.zeros(3), dims)
