import warnings

import numpy as np
import pytest

from attn_relevance.models import ModelConfig, build_model, gen_detection_task, gen_vqa_task, train
from attn_relevance.models.data import detection_vocab

# filled by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


VQA_CONFIG = ModelConfig(architecture="SelfPlusCo", layers=2, heads=2, head_dim=8, text_tokens=6, image_tokens=8)
DET_CONFIG = ModelConfig(
    architecture="EncoderDecoder",
    layers=2,
    heads=2,
    head_dim=8,
    text_tokens=0,
    image_tokens=64,
    queries=3,
    classes=4,
    image_vocab=detection_vocab(3),
)


@pytest.fixture(scope="session")
def vqa_data():
    return gen_vqa_task(1, 2000), gen_vqa_task(2, 500)


@pytest.fixture(scope="session")
def trained_vqa(vqa_data):
    train_set, _ = vqa_data
    return train(build_model(VQA_CONFIG), train_set, epochs=10, lr=0.02)


@pytest.fixture(scope="session")
def det_data():
    return gen_detection_task(1, 1000), gen_detection_task(2, 200)


@pytest.fixture(scope="session")
def trained_det(det_data):
    train_set, _ = det_data
    return train(build_model(DET_CONFIG), train_set, epochs=20, lr=0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_degenerate_heatmaps():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="constant relevancy heatmap")
        yield
