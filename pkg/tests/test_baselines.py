import numpy as np
import pytest

from attn_relevance.baselines import (
    MethodId,
    as_method,
    check_compatible,
    gradcam_attention,
    raw_attention,
    relevance_state,
    rollout,
    rollout_self,
    trans_attr,
)
from attn_relevance.errors import PropagationOrderError, RejectedInput
from attn_relevance.models import AttentionRecord, RecordKind, trace_batch
from attn_relevance.relevancy import Variant, propagate

from helpers import random_model_trace, synthetic_trace

ARCHS = ["PureSelf", "SelfPlusCo", "EncoderDecoder"]
SIZES = {"PureSelf": {"t": 2, "i": 3}, "SelfPlusCo": {"t": 3, "i": 2}, "EncoderDecoder": {"e": 3, "d": 2}}


class TestRawAttention:
    def test_single_layer(self, rng):
        tr = synthetic_trace(rng, "PureSelf", 1, 2, SIZES["PureSelf"])
        np.testing.assert_allclose(raw_attention(tr, "SelfJoint"), tr.records[0].A.mean(0))

    def test_single_head(self, rng):
        tr = synthetic_trace(rng, "PureSelf", 2, 1, SIZES["PureSelf"])
        np.testing.assert_array_equal(raw_attention(tr, "SelfJoint"), tr.records[-1].A[0])

    def test_two_heads(self, rng):
        tr = synthetic_trace(rng, "PureSelf", 2, 2, SIZES["PureSelf"])
        A = tr.records[-1].A
        np.testing.assert_allclose(raw_attention(tr, "SelfJoint"), (A[0] + A[1]) / 2)

    def test_kind_absent(self, rng):
        tr = synthetic_trace(rng, "PureSelf", 1, 1, SIZES["PureSelf"])
        with pytest.raises(RejectedInput):
            raw_attention(tr, "DecoderCross")


class TestRollout:
    def test_uniform_single_layer(self):
        A = np.full((1, 3, 3), 1 / 3)
        expected = (A[0] + np.eye(3)) / (A[0] + np.eye(3)).sum(-1, keepdims=True)
        np.testing.assert_allclose(rollout_self([AttentionRecord(RecordKind.SELF_JOINT, 0, A)]), expected)

    def test_identity_every_layer(self):
        recs = [AttentionRecord(RecordKind.SELF_JOINT, l, np.eye(3)[None].repeat(2, 0)) for l in range(3)]
        np.testing.assert_allclose(rollout_self(recs), np.eye(3))

    def test_cross_with_identity_self(self, rng):
        tr = synthetic_trace(rng, "SelfPlusCo", 1, 2, SIZES["SelfPlusCo"])
        for rec in tr.records:
            if rec.kind in (RecordKind.SELF_TEXT, RecordKind.SELF_IMAGE):
                n = rec.A.shape[-1]
                rec.A = np.eye(n)[None].repeat(2, 0)
        state = rollout(tr)
        np.testing.assert_allclose(state["ti"], tr.records[2].A.mean(0))

    @pytest.mark.parametrize("arch", ARCHS)
    def test_gradient_free(self, arch, rng):
        tr = synthetic_trace(rng, arch, 2, 2, SIZES[arch])
        a = rollout(tr)
        for rec in tr.records:
            rec.gradA = rng.normal(size=rec.A.shape)
        b = rollout(tr)
        assert all(np.array_equal(a[k], b[k]) for k in a.maps)

    def test_identical_across_targets(self, trained_vqa, vqa_data):
        s = vqa_data[1][0]
        a, b = trace_batch(trained_vqa, [s, s], [0, 3])
        ra, rb = relevance_state(a, "Rollout"), relevance_state(b, "Rollout")
        assert all(np.array_equal(ra[k], rb[k]) for k in ra.maps)


class TestGradCam:
    def test_negative_gradients(self, rng):
        tr = synthetic_trace(rng, "PureSelf", 1, 2, SIZES["PureSelf"])
        tr.records[0].gradA = -np.abs(tr.records[0].gradA) - 0.1
        np.testing.assert_array_equal(gradcam_attention(tr, "SelfJoint"), 0.0)

    def test_uniform_positive_gradient(self, rng):
        tr = synthetic_trace(rng, "PureSelf", 1, 1, SIZES["PureSelf"])
        tr.records[0].gradA = np.full_like(tr.records[0].A, 0.7)
        np.testing.assert_allclose(gradcam_attention(tr, "SelfJoint"), 0.7 * tr.records[0].A[0])

    def test_equal_heads_proportional_to_mean(self, rng):
        tr = synthetic_trace(rng, "PureSelf", 1, 1, SIZES["PureSelf"])
        A = tr.records[0].A
        tr.records[0].A = np.concatenate([A, A])
        tr.records[0].gradA = np.full_like(tr.records[0].A, 0.3)
        out = gradcam_attention(tr, "SelfJoint")
        np.testing.assert_allclose(out / out.sum(), A[0] / A[0].sum())

    def test_missing_gradient(self, rng):
        tr = synthetic_trace(rng, "PureSelf", 1, 1, SIZES["PureSelf"])
        tr.records[0].gradA = None
        with pytest.raises(PropagationOrderError):
            gradcam_attention(tr, "SelfJoint")


class TestTransAttr:
    def test_pure_self_equals_ours(self, rng):
        for _ in range(20):
            tr = random_model_trace(rng, "PureSelf")
            np.testing.assert_allclose(trans_attr(tr)["jj"], propagate(tr)["jj"], atol=1e-12, rtol=0)

    def test_zero_gradients(self, rng):
        tr = synthetic_trace(rng, "SelfPlusCo", 2, 2, SIZES["SelfPlusCo"], grad_scale=0.0)
        s = trans_attr(tr)
        assert np.array_equal(s["tt"], np.eye(3)) and np.array_equal(s["ii"], np.eye(2))
        assert not s["ti"].any() and not s["it"].any()

    def test_differs_from_ours_on_cross(self, trained_vqa, vqa_data):
        tr = trace_batch(trained_vqa, vqa_data[1][:1], [0])[0]
        assert np.abs(trans_attr(tr)["ti"] - propagate(tr)["ti"]).max() > 1e-6


class TestDispatch:
    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("method", [m.value for m in MethodId])
    def test_shapes_match_propagate(self, arch, method, rng):
        tr = synthetic_trace(rng, arch, 2, 2, SIZES[arch])
        ours = propagate(tr)
        got = relevance_state(tr, method)
        assert {k: v.shape for k, v in got.maps.items()} == {k: v.shape for k, v in ours.maps.items()}

    def test_variant_only_for_ours(self, rng):
        tr = synthetic_trace(rng, "SelfPlusCo", 1, 1, SIZES["SelfPlusCo"])
        with pytest.raises(RejectedInput):
            relevance_state(tr, "Rollout", Variant.NO_AGGREGATION)

    def test_unknown_method(self):
        with pytest.raises(RejectedInput):
            as_method("AttentionFlow")

    def test_incompatibility_message_names_both(self):
        with pytest.raises(RejectedInput, match="NoSelfAttInCross.*PureSelf"):
            check_compatible("Ours", "NoSelfAttInCross", "PureSelf")
        check_compatible("Ours", "NoAggregation", "PureSelf")
        check_compatible("GradCam", "Full", "EncoderDecoder")
