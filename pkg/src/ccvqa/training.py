"""Training, evaluation and ablation runs over a generated dataset directory.

A dataset directory (see :func:`ccvqa.synth.build_dataset`) holds
``train.json``/``val.json``/``test.json`` manifests, ``vocab.json`` and
``pretrain_pairs.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .clip import ClipModel, contrastive_pretrain
from .config import MODES, TrainConfig
from .errors import ConfigError, IngestionError
from .fusion import CCVQA, decode_answer, qa_loss
from .keyframe import load_frames, resize_rgb, select_keyframes
from .optim import AdamW, lr_schedule
from .synth import DatasetManifest
from .target_encoders import Vocabulary, sample_frames

log = logging.getLogger(__name__)

ABLATION_LABELS = {
    "no_clip": "CCVQA w/o CLIP",
    "no_crossdomain": "CCVQA w/o Cross-domain Learning",
    "full": "CCVQA",
}


@dataclass
class Sample:
    clip: np.ndarray  # (T, S, S, 3)
    keyframes: np.ndarray  # (K, S, S, 3)
    question: str
    target: int
    qtype: str
    frames: str
    video: np.ndarray | None = None  # every frame, resized; source for temporal jitter


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    top1: float | None
    per_qtype: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    loss: float | None = None
    wall_time: float = 0.0
    mode: str = "full"
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_video(path, cfg: TrainConfig):
    frames = load_frames(path)
    if not frames:
        raise IngestionError(f"no frames in {path}")
    m = cfg.model
    seed = zlib.crc32(str(Path(path).name).encode())
    clip = sample_frames(frames, m.frames, seed=seed, size=m.image_size).frames
    video = np.stack([resize_rgb(f.rgb, m.image_size) for f in sorted(frames, key=lambda f: f.index)])
    sel = select_keyframes(frames, m.keyframes, seed=cfg.keyframe_seed)
    by_index = {f.index: f for f in frames}
    keys = [resize_rgb(by_index[i].rgb, m.image_size) for i in sel.indices]
    while len(keys) < m.keyframes:
        keys.append(keys[-1])
    return clip, np.stack(keys), video


def prepare_samples(manifest: DatasetManifest, cfg: TrainConfig, cache: dict | None = None) -> list[Sample]:
    cache = {} if cache is None else cache
    samples = []
    for i, rec in enumerate(manifest.records):
        path = manifest.frames_path(rec)
        key = str(path)
        if key not in cache:
            if not path.is_dir():
                raise IngestionError(f"record {i} ({manifest.split}): frames directory {path} not found")
            cache[key] = load_video(path, cfg)
        clip, keys, video = cache[key]
        samples.append(Sample(clip, keys, rec.question, rec.answer, rec.qtype, rec.frames, video))
    return samples


def load_splits(data_dir) -> dict[str, DatasetManifest]:
    data_dir = Path(data_dir)
    return {s: DatasetManifest.load(data_dir / f"{s}.json") for s in ("train", "val", "test")}


def check_manifests(manifests: dict[str, DatasetManifest], num_answers: int | None = None) -> list[str]:
    answers = manifests["train"].answers
    for name, m in manifests.items():
        if m.answers != answers:
            raise ConfigError(f"{name} manifest answer space differs from train")
        bad = [r for r in m.records if not 0 <= r.answer < len(answers)]
        if bad:
            raise ConfigError(f"{name} manifest has answer index {bad[0].answer} outside 0..{len(answers) - 1}")
    if num_answers is not None and num_answers != len(answers):
        raise ConfigError(f"model head has {num_answers} answers but the manifest has {len(answers)}")
    return answers


def make_batch(model: CCVQA, samples: list[Sample]):
    return model.make_batch(
        [s.clip for s in samples],
        [s.keyframes for s in samples],
        [s.question for s in samples],
        [s.target for s in samples],
    )


# ---------------------------------------------------------------------------
# CLIP branch pretraining
# ---------------------------------------------------------------------------


def _clip_signature(cfg: TrainConfig, vocab: Vocabulary) -> str:
    m = cfg.model
    key = {
        "d": m.d, "w": m.clip_width, "heads": m.heads, "clip_heads": m.clip_heads, "layers": m.clip_layers,
        "image": m.image_size, "patch": m.patch, "prompt_len": m.prompt_len, "mlp": m.mlp_ratio,
        "steps": cfg.clip_pretrain_steps, "lr": cfg.clip_pretrain_lr, "batch": cfg.clip_pretrain_batch,
        "temp_mult": cfg.clip_temperature_lr_mult, "seed": cfg.clip_pretrain_seed,
        "vocab": vocab.to_json(), "precision": cfg.precision,
    }
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]


def build_clip(cfg: TrainConfig, vocab: Vocabulary, seed: int) -> ClipModel:
    m = cfg.model
    clip = ClipModel(len(vocab), m.d, m.clip_width, m.heads, m.clip_heads, m.clip_layers, m.image_size, m.patch,
                     m.prompt_len, np.random.default_rng(10_000 + seed), vocab.pad_id, m.mlp_ratio)
    clip.assign_names("clip.")
    return clip


def pretrain_clip(cfg: TrainConfig, data_dir, vocab: Vocabulary | None = None, steps: int | None = None,
                  log_fn=None):
    """Contrastively pretrain a CLIP branch on frames of the training videos.

    Returns ``(state_dict, loss_history)``; state keys are relative to the
    CLIP module.
    """
    data_dir = Path(data_dir)
    vocab = vocab or Vocabulary.load(data_dir / "vocab.json")
    steps = cfg.clip_pretrain_steps if steps is None else steps
    entries = json.loads((data_dir / "pretrain_pairs.json").read_text())
    pairs = []
    for e in entries:
        # the caption holds for every frame, so all of them serve as images
        pairs.extend((f, e["caption"]) for f in load_frames(data_dir / e["frames"]))
    with T.default_dtype(cfg.precision):
        clip = build_clip(cfg, vocab, cfg.clip_pretrain_seed)
        history = contrastive_pretrain(clip, pairs, vocab, steps, cfg.clip_pretrain_batch,
                                       seed=cfg.clip_pretrain_seed, lr=cfg.clip_pretrain_lr,
                                       temperature_lr_mult=cfg.clip_temperature_lr_mult,
                                       image_size=cfg.model.image_size, log_every=50 if log_fn else 0, log=log_fn)
    return clip.state_dict(), history


def clip_checkpoint_path(cfg: TrainConfig, data_dir, vocab: Vocabulary) -> Path:
    return Path(data_dir) / f"clip-{_clip_signature(cfg, vocab)}.ckpt"


def load_or_pretrain_clip(cfg: TrainConfig, data_dir, vocab: Vocabulary, log_fn=None) -> dict:
    path = clip_checkpoint_path(cfg, data_dir, vocab)
    if path.exists():
        tensors, _ = load_checkpoint(path)
        return tensors
    state, history = pretrain_clip(cfg, data_dir, vocab, log_fn=log_fn)
    save_checkpoint(path, state, {"kind": "clip", "loss_history": history, "config": cfg.to_dict()})
    return state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Trainer:
    """Mini-batch AdamW training with linear learning-rate decay."""

    def __init__(self, model: CCVQA, cfg: TrainConfig, total_steps: int):
        self.model = model
        self.cfg = cfg
        self.total_steps = total_steps
        self.params = model.trainable_parameters()
        self.opt = AdamW(self.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                         betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.epoch = 0
        self.meta: dict = {}

    def jitter(self, sample: Sample) -> np.ndarray:
        """A fresh time-ordered draw of T frames from the sample's full video."""
        if sample.video is None:
            return sample.clip
        n, t = len(sample.video), len(sample.clip)
        picks = np.sort(self.rng.choice(n, size=t, replace=n < t))
        return sample.video[picks]

    def train_step(self, samples: list[Sample]) -> float:
        if self.cfg.resample_frames:
            samples = [replace(s, clip=self.jitter(s)) for s in samples]
        batch = make_batch(self.model, samples)
        self.model.zero_grad()
        logits, _ = self.model(batch, self.cfg.mode)
        loss = qa_loss(logits, batch.targets)
        T.backward(loss)
        lr = lr_schedule(self.step_count, self.total_steps, self.cfg.learning_rate, self.cfg.lr_floor)
        self.opt.step(lr)
        self.step_count += 1
        return float(loss.data)

    def train_epoch(self, samples: list[Sample]) -> float:
        order = self.rng.permutation(len(samples))
        bs = self.cfg.batch_size
        losses, sizes = [], []
        for start in range(0, len(order), bs):
            chunk = [samples[i] for i in order[start : start + bs]]
            losses.append(self.train_step(chunk))
            sizes.append(len(chunk))
        self.epoch += 1
        return float(np.average(losses, weights=sizes)) if losses else float("nan")

    # -- persistence --------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> Path:
        tensors = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        names = [p.name for p in self.params]
        for name, m, v in zip(names, self.opt.m, self.opt.v):
            tensors[f"adam_m/{name}"] = m
            tensors[f"adam_v/{name}"] = v
        meta = {
            "format": FORMAT_VERSION,
            "config": self.cfg.to_dict(),
            "answers": self.model.answers,
            "vocab": self.model.vocab.to_json(),
            "epoch": self.epoch,
            "step": self.step_count,
            "total_steps": self.total_steps,
            "adam_t": self.opt.t,
            "trainable": names,
            "rng_state": self.rng.bit_generator.state,
            "dtype": str(np.dtype(T.get_default_dtype())),
        }
        meta.update(extra or {})
        return save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["config"])
        vocab = Vocabulary.from_json(meta["vocab"])
        with T.default_dtype(cfg.precision):
            model = CCVQA(cfg.model, meta["answers"], vocab, seed=cfg.seed)
        model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
        trainable = set(meta["trainable"])
        for name, p in model.named_parameters():
            p.requires_grad = name in trainable
        trainer = cls(model, cfg, meta["total_steps"])
        trainer.opt.load_state({
            "t": meta["adam_t"],
            "m": [tensors[f"adam_m/{p.name}"] for p in trainer.params],
            "v": [tensors[f"adam_v/{p.name}"] for p in trainer.params],
        })
        trainer.rng.bit_generator.state = meta["rng_state"]
        trainer.step_count = meta["step"]
        trainer.epoch = meta["epoch"]
        trainer.meta = meta
        return trainer


def evaluate(model: CCVQA, samples: list[Sample], mode: str = "full", split: str = "test", batch_size: int = 64,
             predictor=None) -> MetricsRecord:
    """Top-1 accuracy overall and per question type.

    ``predictor``, when given, maps a list of samples to predicted answer
    indices and replaces the model (test hook).
    """
    t0 = time.perf_counter()
    preds, losses = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        if predictor is not None:
            preds.append(np.asarray(predictor(chunk), dtype=np.int64))
            continue
        batch = make_batch(model, chunk)
        with T.no_grad():
            logits, _ = model(batch, mode)
            losses.append(float(qa_loss(logits, batch.targets).data) * len(chunk))
        preds.append(np.atleast_1d(decode_answer(logits)))
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    targets = np.array([s.target for s in samples], dtype=np.int64)
    correct = preds == targets
    per_qtype, counts = {}, {}
    for qt in sorted({s.qtype for s in samples}):
        sel = np.array([s.qtype == qt for s in samples])
        counts[qt] = int(sel.sum())
        per_qtype[qt] = float(correct[sel].mean())
    return MetricsRecord(
        epoch=0,
        split=split,
        top1=float(correct.mean()) if len(samples) else 0.0,
        per_qtype=per_qtype,
        counts=counts,
        loss=sum(losses) / len(samples) if losses else None,
        wall_time=time.perf_counter() - t0,
        mode=mode,
    )


@dataclass
class TrainResult:
    model: CCVQA
    trainer: Trainer
    history: list[MetricsRecord]
    best_epoch: int
    test: MetricsRecord | None
    checkpoint: Path | None


def build_model(cfg: TrainConfig, data_dir, answers, vocab, clip_state=None, log_fn=None) -> CCVQA:
    model = CCVQA(cfg.model, answers, vocab, seed=cfg.seed)
    if cfg.mode != "no_clip":
        if clip_state is None:
            clip_state = load_or_pretrain_clip(cfg, data_dir, vocab, log_fn=log_fn)
        model.clip.load_state_dict(clip_state)
    model.set_clip_frozen(cfg.clip_frozen or cfg.mode == "no_clip")
    return model


def train(cfg: TrainConfig, data_dir, out=None, clip_state=None, emit=None, sample_cache=None) -> TrainResult:
    """Train one model; ``emit`` receives each :class:`MetricsRecord` as it is produced.

    The checkpoint with the best validation top-1 (earliest on ties) is
    written to ``out`` (if given) and restored before the test evaluation.
    """
    cfg.validate()
    data_dir = Path(data_dir)
    emit = emit or (lambda rec: None)
    with T.default_dtype(cfg.precision):
        manifests = load_splits(data_dir)
        answers = check_manifests(manifests)
        vocab = Vocabulary.load(data_dir / "vocab.json")
        model = build_model(cfg, data_dir, answers, vocab, clip_state)
        check_manifests(manifests, model.num_answers)
        cache = {} if sample_cache is None else sample_cache
        data = {k: prepare_samples(m, cfg, cache) for k, m in manifests.items()}

        steps_per_epoch = math.ceil(len(data["train"]) / cfg.batch_size)
        trainer = Trainer(model, cfg, steps_per_epoch * cfg.epochs)
        history: list[MetricsRecord] = []
        out = Path(out) if out is not None else None
        if cfg.epochs == 0:
            if out is not None:
                trainer.save(out, {"best_epoch": 0, "data_dir": str(data_dir)})
            return TrainResult(model, trainer, history, 0, None, out)

        best_top1, best_epoch, best_state = -1.0, 0, None
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            train_loss = trainer.train_epoch(data["train"])
            rec = MetricsRecord(epoch, "train", None, loss=train_loss,
                                wall_time=time.perf_counter() - t0, mode=cfg.mode, seed=cfg.seed)
            history.append(rec)
            emit(rec)
            val = evaluate(model, data["val"], cfg.mode, "val")
            val.epoch, val.seed = epoch, cfg.seed
            history.append(val)
            emit(val)
            if val.top1 > best_top1:
                best_top1, best_epoch = val.top1, epoch
                best_state = model.state_dict()
                if out is not None:
                    trainer.save(out, {"best_epoch": epoch, "val_top1": val.top1, "data_dir": str(data_dir)})
        model.load_state_dict(best_state)
        test = evaluate(model, data["test"], cfg.mode, "test")
        test.epoch, test.seed = best_epoch, cfg.seed
        emit(test)
        return TrainResult(model, trainer, history, best_epoch, test, out)


def load_model(path):
    """Rebuild a model from a training checkpoint; returns ``(model, config, meta)``."""
    trainer = Trainer.load(path)
    return trainer.model, trainer.cfg, trainer.meta


def evaluate_checkpoint(path, split: str = "test", data_dir=None) -> MetricsRecord:
    model, cfg, meta = load_model(path)
    data_dir = Path(data_dir or meta.get("data_dir", "."))
    with T.default_dtype(cfg.precision):
        manifest = DatasetManifest.load(data_dir / f"{split}.json")
        if manifest.answers != model.answers:
            raise ConfigError(f"{split} manifest answer space does not match the checkpoint")
        check_manifests({"train": manifest}, model.num_answers)
        samples = prepare_samples(manifest, cfg)
        rec = evaluate(model, samples, cfg.mode, split)
    rec.epoch, rec.seed = meta.get("best_epoch", meta["epoch"]), cfg.seed
    return rec


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def run_ablation(cfg: TrainConfig, data_dir, seeds=None, modes=MODES, emit=None, out_dir=None) -> list[dict]:
    """Train every mode for every seed on identical data; one row per (mode, seed)."""
    data_dir = Path(data_dir)
    seeds = list(cfg.seeds if seeds is None else seeds)
    vocab = Vocabulary.load(data_dir / "vocab.json")
    clip_state = None
    if any(m != "no_clip" for m in modes):
        clip_state = load_or_pretrain_clip(cfg, data_dir, vocab)
    cache: dict = {}
    rows = []
    for mode in modes:
        for seed in seeds:
            run_cfg = cfg.replace(mode=mode, seed=seed)
            out = None if out_dir is None else Path(out_dir) / f"{mode}-seed{seed}.ckpt"
            t0 = time.perf_counter()
            res = train(run_cfg, data_dir, out=out, clip_state=clip_state, sample_cache=cache)
            row = {
                "mode": mode,
                "label": ABLATION_LABELS[mode],
                "seed": seed,
                "top1": res.test.top1,
                "per_qtype": res.test.per_qtype,
                "best_epoch": res.best_epoch,
                "wall_time": time.perf_counter() - t0,
                "clip_grads_touched": any(p.grad is not None for p in res.model.clip.parameters()),
            }
            rows.append(row)
            if emit is not None:
                emit(row)
    return rows


def summarize_ablation(rows: list[dict]) -> dict[str, dict]:
    out = {}
    for mode in MODES:
        vals = [r["top1"] for r in rows if r["mode"] == mode]
        if vals:
            out[mode] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals), "values": vals}
    return out


def format_ablation_table(rows: list[dict]) -> str:
    """Aligned text table: one row per mode with mean and std of test top-1 (%)."""
    summary = summarize_ablation(rows)
    label_w = max(len(v) for v in ABLATION_LABELS.values())
    lines = [f"{'Method':<{label_w}}  {'top-1 mean (%)':>14}  {'std':>6}  per-seed",
             "-" * (label_w + 42)]
    for mode in ("no_clip", "no_crossdomain", "full"):
        if mode not in summary:
            continue
        s = summary[mode]
        seeds = " ".join(f"{100 * v:.1f}" for v in s["values"])
        lines.append(f"{ABLATION_LABELS[mode]:<{label_w}}  {100 * s['mean']:>14.1f}  {100 * s['std']:>6.1f}  {seeds}")
    return "\n".join(lines)
