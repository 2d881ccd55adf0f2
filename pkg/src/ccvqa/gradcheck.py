"""End-to-end finite-difference check of the QA loss over random small geometries."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .fusion import CCVQA, forward_ccvqa, qa_loss
from .target_encoders import Vocabulary

TOLERANCE = 1e-4

_WORDS = "red green blue yellow circle square triangle left right up down".split()


@dataclass
class GradcheckResult:
    seed: int
    max_rel_error: float
    n_params: int
    geometry: dict
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def random_geometry(rng: np.random.Generator) -> ModelConfig:
    heads = int(rng.choice([1, 2]))
    patch = int(rng.choice([4, 8]))
    return ModelConfig(
        d=4 * heads * int(rng.integers(1, 3)),
        heads=heads,
        video_layers=1,
        question_layers=1,
        fusion_layers=int(rng.integers(1, 3)),
        clip_layers=1,
        clip_width=int(rng.choice([4, 8])),
        clip_heads=int(rng.choice([1, 2])),
        frames=int(rng.integers(2, 4)),
        image_size=patch * int(rng.integers(1, 3)),
        patch=patch,
        question_len=int(rng.integers(3, 6)),
        prompt_len=int(rng.integers(9, 12)),
        keyframes=int(rng.integers(1, 3)),
        mlp_ratio=2,
        fusion_weights=str(rng.choice(["full", "diagonal"])),
    )


def build_case(seed: int):
    """A float64 model with an unfrozen CLIP branch and a random batch."""
    rng = np.random.default_rng(seed)
    cfg = random_geometry(rng)
    n_answers = int(rng.integers(2, 5))
    answers = list(rng.choice(_WORDS, size=n_answers, replace=False))
    questions = ["what color is the shape", "how does the shape move"]
    vocab = Vocabulary.build(questions + answers + ["question answer"])
    with T.default_dtype(np.float64):
        model = CCVQA(cfg, answers, vocab, seed=seed)
        model.set_clip_frozen(False)
        b = int(rng.integers(2, 4))
        s = cfg.image_size
        batch = model.make_batch(
            rng.random((b, cfg.frames, s, s, 3)),
            rng.random((b, cfg.keyframes, s, s, 3)),
            [questions[i % 2] for i in range(b)],
            rng.integers(0, n_answers, size=b),
        )
    return model, batch, cfg


def check_seed(seed: int, coords_per_param: int = 2, mode: str = "full") -> GradcheckResult:
    t0 = time.perf_counter()
    model, batch, cfg = build_case(seed)
    params = model.parameters()
    with T.default_dtype(np.float64):
        err = T.finite_diff_check(lambda: qa_loss(forward_ccvqa(model, batch, mode), batch.targets), params,
                                  coords_per_param=coords_per_param, seed=seed)
    return GradcheckResult(seed, err, len(params), cfg.__dict__.copy(), time.perf_counter() - t0)


def run_gradcheck(seeds: int = 20, start: int = 0, coords_per_param: int = 2) -> list[GradcheckResult]:
    return [check_seed(s, coords_per_param) for s in range(start, start + seeds)]
