import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ccvqa import tensor as T
from ccvqa.config import ModelConfig
from ccvqa.synth import DESK_OPTIONS, build_dataset
from ccvqa.target_encoders import Vocabulary

settings.register_profile("ccvqa", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ccvqa")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**over) -> ModelConfig:
    base = dict(d=8, heads=2, video_layers=1, question_layers=1, fusion_layers=1, clip_layers=1, clip_width=8,
                clip_heads=2, frames=2, image_size=8, patch=4, question_len=6, prompt_len=12, keyframes=1,
                mlp_ratio=2)
    base.update(over)
    return ModelConfig(**base)


QUESTIONS = ["what color is the shape", "what shape is shown", "how does the shape move"]
ANSWERS = ["red", "blue", "circle", "left"]


@pytest.fixture
def tiny_vocab():
    return Vocabulary.build(QUESTIONS + ANSWERS + ["question answer"])


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """24 videos rendered at 16 px with the desk question set."""
    root = tmp_path_factory.mktemp("small")
    build_dataset(24, root, seed=3, size=16, frames=4, **DESK_OPTIONS)
    return root


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """The 200-video, 8-answer desk dataset used by the learning checks."""
    root = tmp_path_factory.mktemp("desk")
    build_dataset(200, root, seed=0, **DESK_OPTIONS)
    return root
