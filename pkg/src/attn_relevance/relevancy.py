"""Relevancy propagation over a recorded forward trace.

Relevancy maps are keyed by their two domain letters: ``"tt"``, ``"ii"``,
``"ti"``, ``"it"`` for the co-attention model, ``"ee"``, ``"dd"``, ``"de"``
for the encoder-decoder and ``"jj"`` for the joint text ++ image sequence of
the pure self-attention model.  Map ``"sq"`` row ``m`` scores how much each
token of domain ``q`` contributes to token ``m`` of domain ``s``.

Per attention record the heads are reduced to one map ``Abar`` by
gradient-weighted, positively clamped averaging; self-attention records then
update ``R_ss`` (and any ``R_sq``) multiplicatively, and co-attention records
add ``Rbar_ss^T Abar Rbar_qq`` to ``R_sq`` and ``Abar R_qs`` to ``R_ss``,
where ``Rbar`` is the row-normalized self map.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .errors import PropagationOrderError, RejectedInput, TraceError
from .models.config import ARCH_KINDS, KIND_DOMAINS, Architecture, RecordKind
from .models.network import AttentionRecord, ForwardTrace

ZERO_ROW_EPS = 1e-12


class Variant(str, Enum):
    FULL = "Full"
    NO_NORMALIZATION = "NoNormalization"
    NO_AGGREGATION = "NoAggregation"
    NO_SELF_ATT_IN_CROSS = "NoSelfAttInCross"


def as_variant(v) -> Variant:
    try:
        return Variant(v)
    except ValueError:
        raise RejectedInput(f"unknown variant {v!r}; choose from {[x.value for x in Variant]}") from None


@dataclass
class RelevancyState:
    architecture: Architecture
    sizes: dict[str, int]
    maps: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.maps[key]

    def copy(self) -> "RelevancyState":
        return RelevancyState(self.architecture, dict(self.sizes), {k: v.copy() for k, v in self.maps.items()})

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.maps.items()}


def init_state(architecture, **counts: int) -> RelevancyState:
    """Self maps start at the identity, cross maps at zero.

    Pass ``t=`` and ``i=`` for the classification architectures (pure
    self-attention gets one identity over ``t + i`` joint tokens) or ``e=`` and
    ``d=`` for the encoder-decoder.
    """
    arch = Architecture(architecture)
    needed = ("e", "d") if arch is Architecture.ENCODER_DECODER else ("t", "i")
    if set(counts) != set(needed):
        raise RejectedInput(f"{arch.value} needs token counts {needed}, got {sorted(counts)}")
    for name, n in counts.items():
        if int(n) < 1:
            raise RejectedInput(f"token count {name}={n} must be >= 1")
    sizes = {k: int(v) for k, v in counts.items()}
    if arch is Architecture.PURE_SELF:
        sizes["j"] = sizes["t"] + sizes["i"]
        maps = {"jj": np.eye(sizes["j"])}
    elif arch is Architecture.SELF_PLUS_CO:
        t, i = sizes["t"], sizes["i"]
        maps = {"tt": np.eye(t), "ii": np.eye(i), "ti": np.zeros((t, i)), "it": np.zeros((i, t))}
    else:
        e, d = sizes["e"], sizes["d"]
        # the encoder never sees the decoder, so there is no "ed" map
        maps = {"ee": np.eye(e), "dd": np.eye(d), "de": np.zeros((d, e))}
    return RelevancyState(arch, sizes, maps)


def state_for(trace: ForwardTrace) -> RelevancyState:
    counts = {k: v for k, v in trace.sizes.items() if k != "j"}
    return init_state(trace.architecture, **counts)


def head_average(A, gradA) -> np.ndarray:
    """Mean over heads of ``max(gradA * A, 0)``; heads are axis ``-3``."""
    if gradA is None:
        raise PropagationOrderError("attention gradient missing; run backward_fill first")
    A = np.asarray(A, dtype=np.float64)
    gradA = np.asarray(gradA, dtype=np.float64)
    if A.shape != gradA.shape or A.ndim < 3:
        raise RejectedInput(f"A {A.shape} and gradA {gradA.shape} must match and be [h, s, q]")
    return np.clip(gradA * A, 0.0, None).mean(axis=-3)


def normalize_self(R, eps: float = ZERO_ROW_EPS) -> np.ndarray:
    """Row-normalize ``R - I`` and add the identity back.

    Rows of ``R - I`` whose sum is ``<= eps`` are left at zero.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.ndim < 2 or R.shape[-1] != R.shape[-2]:
        raise RejectedInput(f"normalize_self needs a square map, got {R.shape}")
    eye = np.eye(R.shape[-1])
    hat = R - eye
    sums = hat.sum(axis=-1, keepdims=True)
    ok = sums > eps
    normed = np.where(ok, hat / np.where(ok, sums, 1.0), 0.0)
    return normed + eye


def _combine(old, new, variant: Variant):
    return new if variant is Variant.NO_AGGREGATION else old + new


def apply_self(state: RelevancyState, Abar, s: str, variant=Variant.FULL) -> RelevancyState:
    """Self-attention update for domain ``s``.

    ``R_ss += Abar R_ss`` and, for every existing cross map ``R_sq``,
    ``R_sq += Abar R_sq``.  ``NoAggregation`` replaces instead of adding.
    """
    variant = as_variant(variant)
    key = s + s
    if key not in state.maps:
        raise RejectedInput(f"no self map {key!r} in a {state.architecture.value} state")
    Abar = np.asarray(Abar, dtype=np.float64)
    if Abar.shape != state.maps[key].shape:
        raise RejectedInput(f"Abar {Abar.shape} does not match R_{key} {state.maps[key].shape}")
    out = state.copy()
    for name, R in state.maps.items():
        if name[0] == s:
            out.maps[name] = _combine(R, Abar @ R, variant)
    return out


def apply_cross(
    state: RelevancyState,
    Abar,
    s: str,
    q: str,
    variant=Variant.FULL,
    source: RelevancyState | None = None,
) -> RelevancyState:
    """Co-attention update for queries from ``s`` attending to keys in ``q``.

    ``R_sq += Rbar_ss^T Abar Rbar_qq`` and ``R_ss += Abar R_qs`` (the second
    only when ``R_qs`` exists).  Right-hand sides are read from ``source``
    (default: ``state``), so two co-attention directions of one layer can be
    fed the same snapshot.
    """
    variant = as_variant(variant)
    src = state if source is None else source
    sq, ss, qq, qs = s + q, s + s, q + q, q + s
    if sq not in state.maps or ss not in state.maps or qq not in state.maps:
        raise RejectedInput(f"state has no maps for co-attention {s}<-{q}")
    Abar = np.asarray(Abar, dtype=np.float64)
    if Abar.shape != state.maps[sq].shape:
        raise RejectedInput(f"Abar {Abar.shape} does not match R_{sq} {state.maps[sq].shape}")
    if variant is Variant.NO_SELF_ATT_IN_CROSS:
        add_sq = Abar
    elif variant is Variant.NO_NORMALIZATION:
        add_sq = src.maps[ss].T @ Abar @ src.maps[qq]
    else:
        add_sq = normalize_self(src.maps[ss]).T @ Abar @ normalize_self(src.maps[qq])
    out = state.copy()
    out.maps[sq] = _combine(src.maps[sq], add_sq, variant)
    if qs in state.maps:
        out.maps[ss] = _combine(src.maps[ss], Abar @ src.maps[qs], variant)
    return out


def _check_trace(trace: ForwardTrace) -> None:
    allowed = ARCH_KINDS[trace.architecture]
    for k, rec in enumerate(trace.records):
        if rec.kind not in allowed:
            raise TraceError(f"record {k} of kind {rec.kind.value} cannot occur in {trace.architecture.value}")
        if rec.gradA is None:
            raise PropagationOrderError(f"record {k} has no gradient; run backward_fill first")


StepHook = Callable[[int, AttentionRecord, RelevancyState], None]


def propagate(trace: ForwardTrace, variant=Variant.FULL, on_step: StepHook | None = None) -> RelevancyState:
    """Run the update rules over ``trace`` in execution order.

    Self records apply :func:`apply_self` to their domain; co-attention records
    apply :func:`apply_cross`.  Co-attention records of the same layer that
    follow each other all read the state as it was before the first of them.
    ``on_step(k, record, state)`` is called after every record.
    """
    variant = as_variant(variant)
    _check_trace(trace)
    state = state_for(trace)
    snapshot, snapshot_layer = None, None
    for k, rec in enumerate(trace.records):
        s, q = KIND_DOMAINS[rec.kind]
        Abar = head_average(rec.A, rec.gradA)
        if s == q:
            snapshot = None
            state = apply_self(state, Abar, s, variant)
        else:
            if snapshot is None or snapshot_layer != rec.layer_index:
                snapshot, snapshot_layer = state, rec.layer_index
            state = apply_cross(state, Abar, s, q, variant, source=snapshot)
        if on_step is not None:
            on_step(k, rec, state)
    return state


def extract_cls(state: RelevancyState, cls_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Text and image scores from the CLS row; the CLS entry itself is zeroed."""
    arch = state.architecture
    if arch is Architecture.ENCODER_DECODER:
        raise RejectedInput("extract_cls needs a classification architecture")
    t = state.sizes["t"]
    if not 0 <= cls_index < t:
        raise RejectedInput(f"cls index {cls_index} outside the {t} text tokens")
    if arch is Architecture.PURE_SELF:
        row = state.maps["jj"][cls_index]
        text, image = row[:t].copy(), row[t:].copy()
    else:
        text = state.maps["tt"][cls_index].copy()
        image = state.maps["ti"][cls_index].copy()
    text[cls_index] = 0.0
    return text, image


def extract_query(state: RelevancyState, j: int) -> np.ndarray:
    """Row ``j`` of ``R_de``: encoder-token relevance for decoder query ``j``."""
    if state.architecture is not Architecture.ENCODER_DECODER:
        raise RejectedInput("extract_query needs an encoder-decoder state")
    d = state.sizes["d"]
    if not 0 <= j < d:
        raise RejectedInput(f"query {j} out of range [0, {d})")
    return state.maps["de"][j].copy()


def records_of(trace: ForwardTrace, kind: RecordKind) -> list[AttentionRecord]:
    return [r for r in trace.records if r.kind is RecordKind(kind)]
