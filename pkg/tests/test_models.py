import dataclasses
import math

import numpy as np
import pytest

from attn_relevance.errors import ConfigError, RejectedInput, TrainingError
from attn_relevance.models import (
    ModelConfig,
    RecordKind,
    SyntheticSample,
    accuracy,
    backward_fill,
    build_model,
    forward,
    gen_detection_task,
    gen_vqa_task,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    train,
)
from attn_relevance.models.config import CLS_ID, SEP_ID
from attn_relevance.models.data import IMAGE_KEYS, TEXT_KEYS, class_symbols, vqa_label
from attn_relevance.relevancy import extract_cls, propagate

import oracles
from helpers import random_sample, small_config


def _params_equal(a, b):
    return a.params.keys() == b.params.keys() and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


class TestConfig:
    def test_rejects_bad_heads(self):
        with pytest.raises(ConfigError):
            ModelConfig(heads=0)

    def test_encoder_decoder_needs_no_object_class(self):
        with pytest.raises(ConfigError):
            ModelConfig(architecture="EncoderDecoder", image_tokens=9, queries=2, classes=2)

    def test_classification_rejects_queries(self):
        with pytest.raises(ConfigError):
            ModelConfig(architecture="SelfPlusCo", queries=2)

    def test_round_trip(self):
        cfg = ModelConfig(architecture="PureSelf", seed=5)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.digest() == ModelConfig.from_dict(cfg.to_dict()).digest()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depth": 3})


class TestBuildAndForward:
    @pytest.mark.parametrize("arch", ["PureSelf", "SelfPlusCo", "EncoderDecoder"])
    def test_deterministic_init(self, arch):
        cfg = small_config(arch, layers=2)
        assert _params_equal(build_model(cfg), build_model(cfg))
        other = build_model(dataclasses.replace(cfg, seed=cfg.seed + 1))
        assert not _params_equal(build_model(cfg), other)

    @pytest.mark.parametrize("layers", [1, 2, 3])
    def test_self_plus_co_record_counts(self, layers, rng):
        cfg = small_config("SelfPlusCo", layers)
        tr = forward(build_model(cfg), random_sample(cfg, rng))
        cross = [r for r in tr.records if r.kind in (RecordKind.CROSS_TEXT_FROM_IMAGE, RecordKind.CROSS_IMAGE_FROM_TEXT)]
        assert len(cross) == 2 * layers
        assert [r.kind for r in tr.records[:4]] == [
            RecordKind.SELF_TEXT,
            RecordKind.SELF_IMAGE,
            RecordKind.CROSS_TEXT_FROM_IMAGE,
            RecordKind.CROSS_IMAGE_FROM_TEXT,
        ]

    def test_encoder_decoder_has_no_encoder_cross(self, rng):
        cfg = small_config("EncoderDecoder", 2)
        tr = forward(build_model(cfg), random_sample(cfg, rng))
        kinds = {r.kind for r in tr.records}
        assert kinds == {RecordKind.ENCODER_SELF, RecordKind.DECODER_SELF, RecordKind.DECODER_CROSS}
        assert tr.logits.shape == (cfg.queries, cfg.classes)

    @pytest.mark.parametrize("arch", ["PureSelf", "SelfPlusCo", "EncoderDecoder"])
    def test_kinds_are_a_function_of_config(self, arch, rng):
        cfg = small_config(arch, 2)
        model = build_model(cfg)
        a = forward(model, random_sample(cfg, rng))
        b = forward(model, random_sample(cfg, rng))
        assert [(r.kind, r.layer_index) for r in a.records] == model.record_kinds()
        assert [(r.kind, r.layer_index) for r in b.records] == model.record_kinds()

    @pytest.mark.parametrize("arch", ["PureSelf", "SelfPlusCo", "EncoderDecoder"])
    def test_rows_stochastic(self, arch, rng):
        cfg = small_config(arch, 3)
        tr = forward(build_model(cfg), random_sample(cfg, rng))
        for r in tr.records:
            assert np.all(r.A >= 0)
            np.testing.assert_allclose(r.A.sum(-1), 1.0, atol=1e-12)

    def test_identical_samples_identical_traces(self, rng):
        cfg = small_config("SelfPlusCo", 2)
        model = build_model(cfg)
        s = random_sample(cfg, rng)
        a, b = forward(model, s), forward(model, s)
        assert np.array_equal(a.logits, b.logits)
        assert all(np.array_equal(x.A, y.A) for x, y in zip(a.records, b.records))

    def test_large_scale_query_key_gives_identity(self):
        cfg = ModelConfig(architecture="PureSelf", layers=1, heads=1, head_dim=4, text_tokens=2, image_tokens=2, text_vocab=8, image_vocab=8)
        model = build_model(cfg)
        P = model.params
        # orthogonal one-hot embeddings and Q = K = 20 x make QK^T diagonal-dominant
        for key in ("text_pos", "image_pos", "segment"):
            P[key][:] = 0.0
        P["text_embed"][:] = 0.0
        P["image_embed"][:] = 0.0
        P["text_embed"][1, 0] = P["text_embed"][3, 1] = 1.0
        P["image_embed"][4, 2] = P["image_embed"][5, 3] = 1.0
        P["joint0.attn.wq"] = 20.0 * np.eye(4)
        P["joint0.attn.wk"] = 20.0 * np.eye(4)
        tr = forward(model, SyntheticSample(image=(4, 5), text=(1, 3), label=0))
        A = tr.records[0].A[0]
        np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-12)
        assert np.all(np.diag(A) > 0.99)

    def test_hand_evaluated_single_head(self):
        cfg = ModelConfig(architecture="PureSelf", layers=1, heads=1, head_dim=3, text_tokens=1, image_tokens=1, classes=2, text_vocab=4, image_vocab=4, seed=7)
        model = build_model(cfg)
        P = {k: v.tolist() for k, v in model.params.items()}
        sample = SyntheticSample(image=(2,), text=(1,), label=0)
        x = [
            [a + b + c for a, b, c in zip(P["text_embed"][1], P["text_pos"][0], P["segment"][0])],
            [a + b + c for a, b, c in zip(P["image_embed"][2], P["image_pos"][0], P["segment"][1])],
        ]

        def lin(v, name):
            return [[s + b for s, b in zip(row, P[f"{name}.b"])] for row in oracles.mm(v, P[f"{name}.w"])]

        Q = [[s + b for s, b in zip(r, P["joint0.attn.bq"])] for r in oracles.mm(x, P["joint0.attn.wq"])]
        K = [[s + b for s, b in zip(r, P["joint0.attn.bk"])] for r in oracles.mm(x, P["joint0.attn.wk"])]
        V = [[s + b for s, b in zip(r, P["joint0.attn.bv"])] for r in oracles.mm(x, P["joint0.attn.wv"])]
        A = [oracles.softmax([v / math.sqrt(3) for v in row]) for row in oracles.mm(Q, oracles.T(K))]
        O = oracles.mm(oracles.mm(A, V), P["joint0.attn.wo"])
        h = [[a + o + b for a, o, b in zip(ra, ro, P["joint0.attn.bo"])] for ra, ro in zip(x, O)]
        f = [[a + math.tanh(z) for a, z in zip(ra, rz)] for ra, rz in zip(h, lin(h, "joint0.ffn"))]
        logits = lin([f[0]], "cls")[0]

        tr = forward(model, sample)
        np.testing.assert_allclose(tr.records[0].A[0], A, atol=1e-10)
        np.testing.assert_allclose(tr.logits, logits, atol=1e-10)

    def test_token_count_mismatch(self, rng):
        cfg = small_config("SelfPlusCo", 1)
        with pytest.raises(RejectedInput):
            forward(build_model(cfg), SyntheticSample(image=(1,) * (cfg.image_tokens + 1), text=(1,) * cfg.text_tokens))


class TestBackward:
    def test_target_out_of_range(self, rng):
        cfg = small_config("SelfPlusCo", 1)
        model = build_model(cfg)
        tr = forward(model, random_sample(cfg, rng))
        with pytest.raises(RejectedInput):
            backward_fill(model, tr, cfg.classes)

    def test_detection_target_forms(self, rng):
        cfg = small_config("EncoderDecoder", 1)
        model = build_model(cfg)
        tr = forward(model, random_sample(cfg, rng))
        with pytest.raises(RejectedInput):
            backward_fill(model, tr, (cfg.queries, 0))
        q = backward_fill(model, tr, 1)
        assert q.target[0] == 1 and q.target[1] == int(np.argmax(tr.logits[1, :-1]))

    def test_gradient_shapes(self, rng):
        cfg = small_config("SelfPlusCo", 2)
        model = build_model(cfg)
        tr = backward_fill(model, forward(model, random_sample(cfg, rng)), 0)
        assert all(r.gradA.shape == r.A.shape for r in tr.records)

    def test_structurally_unreachable_record_has_zero_gradient(self, rng):
        # the image stream after the last co-attention never reaches the text CLS classifier
        cfg = small_config("SelfPlusCo", 2)
        model = build_model(cfg)
        tr = backward_fill(model, forward(model, random_sample(cfg, rng)), 0)
        last_it = [r for r in tr.records if r.kind is RecordKind.CROSS_IMAGE_FROM_TEXT][-1]
        assert np.all(last_it.gradA == 0)
        assert np.any([np.any(r.gradA != 0) for r in tr.records])

    def test_decoder_cross_with_zero_values_cuts_encoder(self, rng):
        cfg = small_config("EncoderDecoder", 1)
        model = build_model(cfg)
        model.params["dec0.cross.wv"][:] = 0.0
        model.params["dec0.cross.wo"][:] = 0.0
        tr = backward_fill(model, forward(model, random_sample(cfg, rng)), (0, 0))
        enc = [r for r in tr.records if r.kind is RecordKind.ENCODER_SELF]
        assert all(np.all(r.gradA == 0) for r in enc)

    def test_class_specificity(self, trained_vqa, vqa_data):
        _, test = vqa_data
        found_grad, found_argmax = False, False
        for s in test[:50]:
            a = backward_fill(trained_vqa, forward(trained_vqa, s), 0)
            b = backward_fill(trained_vqa, forward(trained_vqa, s), 3)
            found_grad |= any(not np.allclose(x.gradA, y.gradA) for x, y in zip(a.records, b.records))
            ia, ib = extract_cls(propagate(a))[1], extract_cls(propagate(b))[1]
            found_argmax |= int(np.argmax(ia)) != int(np.argmax(ib))
        assert found_grad and found_argmax


class TestData:
    def test_vqa_seed_deterministic(self):
        assert gen_vqa_task(4, 20) == gen_vqa_task(4, 20)
        assert gen_vqa_task(4, 20) != gen_vqa_task(5, 20)

    @pytest.mark.parametrize("n", [0, -3])
    def test_rejects_non_positive(self, n):
        with pytest.raises(RejectedInput):
            gen_vqa_task(0, n)
        with pytest.raises(RejectedInput):
            gen_detection_task(0, n)

    def test_layout_and_label(self):
        for s in gen_vqa_task(9, 200):
            assert s.text[0] == CLS_ID and s.text[-1] == SEP_ID
            assert s.text[s.gt_text] in TEXT_KEYS and s.image[s.gt_image] in IMAGE_KEYS
            assert s.label == vqa_label(s.text[s.gt_text], s.image[s.gt_image])
            # designated tokens are the only keys present
            assert sum(v in TEXT_KEYS for v in s.text[1:-1]) == 1
            assert sum(v in IMAGE_KEYS for v in s.image) == 1

    def test_label_ignores_other_tokens(self, rng):
        for s in gen_vqa_task(10, 50):
            words = list(s.text[1:-1])
            others = [k for k in range(len(words)) if k + 1 != s.gt_text]
            perm = rng.permutation([words[k] for k in others])
            for k, v in zip(others, perm):
                words[k] = int(v)
            assert vqa_label(words[s.gt_text - 1], s.image[s.gt_image]) == s.label

    def test_flipping_designated_token_flips_label(self):
        for s in gen_vqa_task(11, 50):
            sym = s.text[s.gt_text]
            k = TEXT_KEYS.index(sym)
            flipped = TEXT_KEYS[k ^ 1]
            assert vqa_label(flipped, s.image[s.gt_image]) != s.label
            sym = s.image[s.gt_image]
            flipped = IMAGE_KEYS[IMAGE_KEYS.index(sym) ^ 1]
            assert vqa_label(s.text[s.gt_text], flipped) != s.label

    def test_detection_objects(self):
        data = gen_detection_task(3, 100, grid=8, classes=3)
        assert data == gen_detection_task(3, 100, grid=8, classes=3)
        for s in data:
            assert 1 <= len(s.objects) <= 3
            assert len({o.class_id for o in s.objects}) == len(s.objects)
            img = np.array(s.image).reshape(8, 8)
            covered = np.zeros((8, 8), dtype=int)
            for o in s.objects:
                m = o.mask(8)
                covered += m
                r0, c0, r1, c1 = o.box
                assert m.sum() == o.area == (r1 - r0) * (c1 - c0)
                assert set(img[m.astype(bool)].tolist()) <= set(class_symbols(o.class_id))
                big = o.mask(8, patch=4)
                assert big.shape == (32, 32) and big.sum() == 16 * o.area
            assert covered.max() <= 1
            assert set(img[covered == 0].tolist()) <= {1, 2, 3}

    def test_dataset_round_trip(self, tmp_path):
        for data in (gen_vqa_task(1, 5), gen_detection_task(1, 5)):
            path = tmp_path / "d.jsonl"
            save_dataset(data, path)
            assert load_dataset(path) == data


class TestTraining:
    def test_zero_epochs_unchanged(self):
        cfg = small_config("SelfPlusCo", 1)
        cfg = dataclasses.replace(cfg, text_tokens=6, image_tokens=8, text_vocab=12, image_vocab=12, classes=4)
        model = build_model(cfg)
        assert _params_equal(train(model, gen_vqa_task(0, 10), 0, 0.02), model)

    def test_fixed_seed_identical_weights(self):
        cfg = ModelConfig(layers=1)
        data = gen_vqa_task(0, 64)
        assert _params_equal(train(build_model(cfg), data, 2, 0.02), train(build_model(cfg), data, 2, 0.02))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        cfg = ModelConfig(layers=1)
        with pytest.raises(TrainingError):
            train(build_model(cfg), gen_vqa_task(0, 64), 3, 1e6)

    def test_architecture_data_mismatch(self):
        with pytest.raises(ConfigError):
            train(build_model(ModelConfig()), gen_detection_task(0, 4), 1, 0.02)

    def test_trained_accuracy(self, trained_vqa, vqa_data):
        train_set, test = vqa_data
        assert accuracy(trained_vqa, train_set) >= 0.95
        assert accuracy(trained_vqa, test) >= 0.95

    def test_detection_trains(self, trained_det, det_data):
        assert accuracy(trained_det, det_data[1]) >= 0.9

    def test_checkpoint_round_trip(self, tmp_path, trained_vqa):
        path = tmp_path / "m.json"
        save_checkpoint(trained_vqa, path)
        again = load_checkpoint(path)
        assert again.config == trained_vqa.config and _params_equal(again, trained_vqa)
        save_checkpoint(again, tmp_path / "m2.json")
        assert path.read_bytes() == (tmp_path / "m2.json").read_bytes()

    def test_checkpoint_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ConfigError):
            load_checkpoint(path)
