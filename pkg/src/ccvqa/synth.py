"""Procedural VideoQA data: one coloured shape moving over a plain background.

Questions come from fixed templates covering the what/who/when/where/how
categories and every answer is a single word. Videos are written as
zero-padded numeric frame files; each split is described by a JSON
manifest::

    {"answers": [...], "split": "train",
     "records": [{"frames": "videos/00007", "question": "...", "answer": 3, "qtype": "how"}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError
from .keyframe import write_image
from .target_encoders import Vocabulary

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.85, 0.15, 0.8),
    "orange": (1.0, 0.55, 0.05),
    "purple": (0.5, 0.2, 0.65),
}
BACKGROUNDS = {
    "black": (0.05, 0.05, 0.05),
    "gray": (0.5, 0.5, 0.5),
    "white": (0.97, 0.97, 0.97),
}
SHAPES = ("circle", "square", "triangle")
MOTIONS = ("left", "right", "up", "down", "static")
PHASES = ("always", "early", "late")

# key -> (question type, template)
QUESTIONS = {
    "color": ("what", "what color is the shape"),
    "shape": ("what", "what shape is shown"),
    "motion": ("how", "how does the shape move"),
    "where": ("where", "where does the shape end up"),
    "who": ("who", "who is {color}"),
    "when": ("when", "when does the shape move"),
}
QTYPES = ("what", "who", "when", "where", "how")
DEFAULT_FRACTIONS = (0.61, 0.13, 0.26)


@dataclass
class SynthVideoSpec:
    shape: str = "circle"
    color: str = "red"
    motion: str = "right"
    background: str = "black"
    frames: int = 8
    size: int = 32
    seed: int = 0
    phase: str = "always"

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ConfigError(f"unknown color {self.color!r}")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"unknown background {self.background!r}")
        if self.motion not in MOTIONS:
            raise ConfigError(f"unknown motion {self.motion!r}")
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.frames < 1 or self.size < 8:
            raise ConfigError("need at least 1 frame and 8 pixels")


@dataclass
class QAPair:
    question: str
    answer: str
    qtype: str
    answer_index: int = -1


@dataclass
class Record:
    frames: str
    question: str
    answer: int
    qtype: str


@dataclass
class DatasetManifest:
    answers: list[str]
    records: list[Record] = field(default_factory=list)
    split: str = "train"
    root: Path | None = None

    def frames_path(self, record: Record) -> Path:
        p = Path(record.frames)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_json(self) -> dict:
        return {
            "answers": list(self.answers),
            "records": [
                {"frames": r.frames, "question": r.question, "answer": r.answer, "qtype": r.qtype} for r in self.records
            ],
            "split": self.split,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise IngestionError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        records = [Record(r["frames"], r["question"], int(r["answer"]), r["qtype"]) for r in data["records"]]
        return cls(list(data["answers"]), records, data.get("split", path.stem), path.parent)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _trajectory(spec: SynthVideoSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    s = spec.size
    r = shape_radius(s)
    lo, hi = r + 1.0, s - r - 2.0
    mid = rng.uniform(lo, hi)
    a, b = rng.uniform(lo, lo + 0.15 * (hi - lo)), rng.uniform(hi - 0.15 * (hi - lo), hi)
    if spec.motion == "right":
        start, end = (a, mid), (b, mid)
    elif spec.motion == "left":
        start, end = (b, mid), (a, mid)
    elif spec.motion == "down":
        start, end = (mid, a), (mid, b)
    elif spec.motion == "up":
        start, end = (mid, b), (mid, a)
    else:
        p = (rng.uniform(lo, hi), rng.uniform(lo, hi))
        start = end = p
    return np.array(start), np.array(end)


def _progress(spec: SynthVideoSpec) -> np.ndarray:
    n = spec.frames
    if n == 1:
        return np.zeros(1)
    t = np.arange(n) / (n - 1)
    if spec.phase == "early":
        return np.minimum(1.0, 2.0 * t)
    if spec.phase == "late":
        return np.maximum(0.0, 2.0 * t - 1.0)
    return t


def shape_radius(size: int) -> float:
    return 0.25 * size


def _coverage(shape: str, cx: float, cy: float, radius: float, size: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] from a signed distance with a 1-pixel ramp."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        sdf = np.hypot(dx, dy) - radius
    elif shape == "square":
        sdf = np.maximum(np.abs(dx), np.abs(dy)) - radius * 0.85
    else:
        # upward triangle: intersection of three half-planes
        h = radius
        edges = [
            dy - h * 0.75,
            (math.sqrt(3) / 2) * dx - 0.5 * dy - h * 0.5,
            -(math.sqrt(3) / 2) * dx - 0.5 * dy - h * 0.5,
        ]
        sdf = np.max(np.stack(edges), axis=0)
    return np.clip(0.5 - sdf, 0.0, 1.0)


def render_video(spec: SynthVideoSpec) -> tuple[np.ndarray, np.ndarray]:
    """Frames (T, S, S, 3) and the shape centre per frame (T, 2) as (x, y)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    start, end = _trajectory(spec, rng)
    prog = _progress(spec)
    centres = start[None, :] + (end - start)[None, :] * prog[:, None]
    fg = np.array(PALETTE[spec.color])
    bg = np.array(BACKGROUNDS[spec.background])
    radius = shape_radius(spec.size)
    frames = np.empty((spec.frames, spec.size, spec.size, 3))
    for i, (cx, cy) in enumerate(centres):
        a = _coverage(spec.shape, cx, cy, radius, spec.size)[..., None]
        frames[i] = bg * (1.0 - a) + fg * a
    return frames, centres


def generate_video(spec: SynthVideoSpec, out_dir, fmt: str = "ppm") -> Path:
    out_dir = Path(out_dir)
    frames, _ = render_video(spec)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, rgb in enumerate(frames):
            write_image(out_dir / f"{i:03d}.{fmt}", rgb)
    except OSError as exc:
        raise IngestionError(f"cannot write frames to {out_dir}: {exc}") from exc
    return out_dir


def end_region(spec: SynthVideoSpec) -> str:
    _, centres = render_video(spec)
    x, y = centres[-1]
    half = spec.size / 2
    return ("top" if y < half else "bottom") + ("left" if x < half else "right")


def generate_qa(spec: SynthVideoSpec, questions=tuple(QUESTIONS)) -> list[QAPair]:
    out = []
    for key in questions:
        qtype, template = QUESTIONS[key]
        if key == "color":
            answer = spec.color
        elif key in ("shape", "who"):
            answer = spec.shape
        elif key == "motion":
            answer = spec.motion
        elif key == "where":
            answer = end_region(spec)
        elif key == "when":
            answer = "never" if spec.motion == "static" else spec.phase
        else:
            raise ConfigError(f"unknown question key {key!r}")
        out.append(QAPair(template.format(color=spec.color, shape=spec.shape), answer, qtype))
    return out


def caption_for_pretraining(spec: SynthVideoSpec) -> str:
    return f"a {spec.color} {spec.shape}"


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def _balanced(options, n, rng):
    seq = np.tile(np.arange(len(options)), -(-n // len(options)))[:n]
    return [options[i] for i in rng.permutation(seq)]


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return n_train, n_val, n - n_train - n_val


def make_specs(n_videos, seed, colors=tuple(PALETTE), shapes=SHAPES, motions=MOTIONS, phases=PHASES,
               frames=8, size=32) -> list[SynthVideoSpec]:
    """Seeded specs whose colour/shape/motion/phase marginals are balanced."""
    rng = np.random.default_rng(seed)
    cols = _balanced(list(colors), n_videos, rng)
    shps = _balanced(list(shapes), n_videos, rng)
    mots = _balanced(list(motions), n_videos, rng)
    phs = _balanced(list(phases), n_videos, rng)
    bgs = [list(BACKGROUNDS)[i] for i in rng.integers(len(BACKGROUNDS), size=n_videos)]
    seeds = rng.integers(2**31 - 1, size=n_videos)
    return [
        SynthVideoSpec(shps[i], cols[i], mots[i], bgs[i], frames, size, int(seeds[i]), phs[i])
        for i in range(n_videos)
    ]


def build_dataset(n_videos: int, out_dir, fractions=DEFAULT_FRACTIONS, seed: int = 0,
                  questions=tuple(QUESTIONS), colors=tuple(PALETTE), shapes=SHAPES, motions=MOTIONS,
                  phases=PHASES, frames: int = 8, size: int = 32, fmt: str = "ppm"):
    """Render ``n_videos`` videos and write train/val/test manifests under ``out_dir``.

    The answer vocabulary is the sorted set of training answers; validation
    and test records whose answer never occurs in training are dropped.
    Also writes ``vocab.json`` (word vocabulary for questions, prompts and
    captions) and ``pretrain_pairs.json`` (captions of the training videos).
    Returns the three manifests.
    """
    counts = split_counts(n_videos, fractions)
    out_dir = Path(out_dir)
    specs = make_specs(n_videos, seed, colors, shapes, motions, phases, frames, size)
    order = np.random.default_rng(seed + 1).permutation(n_videos)
    bounds = np.cumsum(counts)
    split_of = {}
    for pos, vid in enumerate(order):
        split_of[int(vid)] = "train" if pos < bounds[0] else ("val" if pos < bounds[1] else "test")

    qa = {}
    for vid, spec in enumerate(specs):
        generate_video(spec, out_dir / "videos" / f"{vid:05d}", fmt)
        qa[vid] = generate_qa(spec, questions)

    answers = sorted({p.answer for vid, pairs in qa.items() if split_of[vid] == "train" for p in pairs})
    index = {a: i for i, a in enumerate(answers)}
    manifests = {}
    for split in ("train", "val", "test"):
        records = []
        for vid in range(n_videos):
            if split_of[vid] != split:
                continue
            for p in qa[vid]:
                if p.answer in index:
                    records.append(Record(f"videos/{vid:05d}", p.question, index[p.answer], p.qtype))
        manifests[split] = DatasetManifest(answers, records, split, out_dir)
        manifests[split].save(out_dir / f"{split}.json")

    texts = [p.question for pairs in qa.values() for p in pairs]
    texts += [caption_for_pretraining(s) for s in specs]
    texts += answers + ["question answer"]
    Vocabulary.build(texts).save(out_dir / "vocab.json")

    pairs = [
        {"frames": f"videos/{vid:05d}", "caption": caption_for_pretraining(specs[vid])}
        for vid in range(n_videos)
        if split_of[vid] == "train"
    ]
    (out_dir / "pretrain_pairs.json").write_text(json.dumps(pairs, indent=1) + "\n")
    return manifests["train"], manifests["val"], manifests["test"]


DESK_OPTIONS = {
    "questions": ("color", "shape"),
    "colors": ("red", "green", "blue", "yellow", "magenta"),
    "motions": ("left", "right", "up", "down"),
    "phases": ("always",),
}
"""Generator options giving an 8-answer space (5 colours + 3 shapes); motion varies as a nuisance factor."""
