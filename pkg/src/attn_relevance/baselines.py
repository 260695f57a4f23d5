"""Comparison attribution methods sharing the trace interface.

Every method returns a :class:`~attn_relevance.relevancy.RelevancyState` with
the same map names and shapes that :func:`~attn_relevance.relevancy.propagate`
produces for the trace, so the CLS / query extraction works unchanged.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import PropagationOrderError, RejectedInput
from .models.config import ARCH_KINDS, KIND_DOMAINS, Architecture, RecordKind
from .models.network import ForwardTrace
from .relevancy import RelevancyState, Variant, head_average, propagate, state_for


class MethodId(str, Enum):
    OURS = "Ours"
    RAW_ATTENTION = "RawAttention"
    ROLLOUT = "Rollout"
    GRAD_CAM = "GradCam"
    TRANS_ATTR = "TransAttrNoLrp"


def as_method(m) -> MethodId:
    try:
        return MethodId(m)
    except ValueError:
        raise RejectedInput(f"unknown method {m!r}; choose from {[x.value for x in MethodId]}") from None


def _last(trace: ForwardTrace, kind):
    kind = RecordKind(kind)
    recs = [r for r in trace.records if r.kind is kind]
    if not recs:
        raise RejectedInput(f"trace has no {kind.value} record")
    return recs[-1]


def _map_kinds(arch: Architecture) -> dict[str, RecordKind]:
    return {"".join(KIND_DOMAINS[k]): k for k in ARCH_KINDS[arch]}


def raw_attention(trace: ForwardTrace, kind) -> np.ndarray:
    """Head mean of the last attention map of ``kind``."""
    return _last(trace, kind).A.mean(axis=0)


def raw_attention_state(trace: ForwardTrace) -> RelevancyState:
    state = state_for(trace)
    for key, kind in _map_kinds(trace.architecture).items():
        state.maps[key] = raw_attention(trace, kind)
    return state


def rollout_self(records) -> np.ndarray:
    """Rollout over self-attention records: product of row-normalized (Ā + I)."""
    n = records[0].A.shape[-1]
    joint = np.eye(n)
    for rec in records:
        m = rec.A.mean(axis=0) + np.eye(n)
        m = m / m.sum(axis=-1, keepdims=True)
        joint = m @ joint
    return joint


def rollout(trace: ForwardTrace) -> RelevancyState:
    """Self maps by rollout; cross maps by ``R_ss^T Ā_last R_qq``.

    Ā here is the uniform head mean, so the result does not depend on the
    explained target.
    """
    state = state_for(trace)
    kinds = _map_kinds(trace.architecture)
    for key, kind in kinds.items():
        if key[0] == key[1]:
            recs = [r for r in trace.records if r.kind is kind]
            if recs:
                state.maps[key] = rollout_self(recs)
    for key, kind in kinds.items():
        if key[0] != key[1]:
            s, q = key
            last = raw_attention(trace, kind)
            state.maps[key] = state.maps[s + s].T @ last @ state.maps[q + q]
    return state


def gradcam_attention(trace: ForwardTrace, kind) -> np.ndarray:
    """Grad-CAM over the heads of the last map of ``kind``.

    Each head is weighted by the mean of its gradient; the weighted sum is
    clamped at zero.
    """
    rec = _last(trace, kind)
    if rec.gradA is None:
        raise PropagationOrderError("Grad-CAM needs attention gradients; run backward_fill first")
    weights = rec.gradA.mean(axis=(-2, -1))
    return np.clip(np.tensordot(weights, rec.A, axes=(0, 0)), 0.0, None)


def gradcam_state(trace: ForwardTrace) -> RelevancyState:
    state = state_for(trace)
    for key, kind in _map_kinds(trace.architecture).items():
        state.maps[key] = gradcam_attention(trace, kind)
    return state


def trans_attr(trace: ForwardTrace) -> RelevancyState:
    """Gradient-weighted self-attention recursion, last-map cross relevance.

    Self maps follow ``R_ss += Ā R_ss`` over every self-attention record (no
    propagation into cross maps); each cross map is the gradient-weighted head
    average of the last map of its kind.
    """
    state = state_for(trace)
    for rec in trace.records:
        s, q = KIND_DOMAINS[rec.kind]
        if s == q:
            Abar = head_average(rec.A, rec.gradA)
            state.maps[s + s] = state.maps[s + s] + Abar @ state.maps[s + s]
    for key, kind in _map_kinds(trace.architecture).items():
        if key[0] != key[1]:
            rec = _last(trace, kind)
            state.maps[key] = head_average(rec.A, rec.gradA)
    return state


def relevance_state(trace: ForwardTrace, method, variant=Variant.FULL) -> RelevancyState:
    method = as_method(method)
    if method is MethodId.OURS:
        return propagate(trace, variant)
    if Variant(variant) is not Variant.FULL:
        raise RejectedInput(f"variant {Variant(variant).value} only applies to {MethodId.OURS.value}")
    if method is MethodId.RAW_ATTENTION:
        return raw_attention_state(trace)
    if method is MethodId.ROLLOUT:
        return rollout(trace)
    if method is MethodId.GRAD_CAM:
        return gradcam_state(trace)
    return trans_attr(trace)


NEEDS_GRADIENTS = {MethodId.OURS, MethodId.GRAD_CAM, MethodId.TRANS_ATTR}

# Variants that only change the co-attention rules leave a pure self-attention
# model untouched, so asking for them there is almost certainly a mistake.
CROSS_ONLY_VARIANTS = {Variant.NO_NORMALIZATION, Variant.NO_SELF_ATT_IN_CROSS}


def check_compatible(method, variant, architecture) -> None:
    """Reject method / variant / architecture combinations with no distinct meaning."""
    method, variant, arch = as_method(method), Variant(variant), Architecture(architecture)
    if method is not MethodId.OURS and variant is not Variant.FULL:
        raise RejectedInput(f"variant {variant.value} only applies to {MethodId.OURS.value}, not {method.value}")
    if arch is Architecture.PURE_SELF and variant in CROSS_ONLY_VARIANTS:
        raise RejectedInput(
            f"method {method.value} with variant {variant.value} is incompatible with architecture "
            f"{arch.value}: it has no co-attention layers"
        )
