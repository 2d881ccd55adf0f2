"""General-domain branch: a small CLIP-style dual encoder.

The image tower is a ViT over key frames, the text tower encodes
question/answer prompts. Both project their class token into a shared
unit-norm space where a learned temperature scales cosine similarities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import LayerNorm, Linear, Module, TransformerEncoder
from .target_encoders import SequenceFeatures, TextEncoder, Vocabulary, extract_patches, num_patches, split_words, tokenize
from .tensor import Parameter, Tensor

LOG_SCALE_MIN = math.log(1e-2)
LOG_SCALE_MAX = math.log(1e2)

PROMPT_TEMPLATE = "question: {question} answer: {answer}."


@dataclass
class Prompt:
    text: str
    answer_index: int


@dataclass
class PromptFeatures:
    tokens: Tensor  # (C, N_t, w)

    @property
    def cls(self) -> Tensor:
        return self.tokens[..., 0, :]

    @property
    def num_candidates(self) -> int:
        return self.tokens.shape[-3]


def build_prompts(question: str, answers) -> list[Prompt]:
    answers = list(answers)
    if len(answers) < 2:
        raise ContractError(f"need at least 2 answer candidates, got {len(answers)}")
    return [Prompt(PROMPT_TEMPLATE.format(question=question, answer=a), i) for i, a in enumerate(answers)]


class ClipImageEncoder(Module):
    """ViT: patch projection, [CLS] token, positional embedding, transformer."""

    def __init__(self, d, heads, layers, image_size, patch, rng, mlp_ratio=4):
        self.patch = patch
        self.image_size = image_size
        self.n_patches = num_patches(image_size, patch)
        self.proj = Linear(patch * patch * 3, d, rng)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, (1, d)))
        self.pos = Parameter(rng.normal(0.0, 0.02, (1 + self.n_patches, d)))
        self.ln_pre = LayerNorm(d)
        self.encoder = TransformerEncoder(d, heads, layers, rng, mlp_ratio)

    def forward(self, images) -> SequenceFeatures:
        images = np.asarray(images)
        if images.shape[-3] != self.image_size or images.shape[-2] != self.image_size:
            raise ConfigError(f"expected {self.image_size}px frames, got {images.shape[-3:-1]}")
        lead = images.shape[:-3]
        patches = self.proj(Tensor(extract_patches(images, self.patch)))
        d = patches.shape[-1]
        cls = T.broadcast_to(self.cls_token, lead + (1, d))
        x = T.concat([cls, patches], axis=-2) + self.pos
        return SequenceFeatures(self.encoder(self.ln_pre(x)))


class ClipModel(Module):
    def __init__(self, vocab_size, d, w, heads, text_heads, layers, image_size, patch, prompt_len, rng, pad_id=0, mlp_ratio=4):
        self.image = ClipImageEncoder(d, heads, layers, image_size, patch, rng, mlp_ratio)
        self.text = TextEncoder(vocab_size, w, text_heads, layers, prompt_len, rng, pad_id, mlp_ratio)
        self.image_head = Linear(d, w, rng, bias=False)
        self.text_head = Linear(w, w, rng, bias=False)
        self.log_scale = Parameter(np.zeros(()))
        self.prompt_len = prompt_len

    # -- encoders -------------------------------------------------------------
    def encode_image(self, images) -> SequenceFeatures:
        return self.image(images)

    def encode_text(self, ids) -> PromptFeatures:
        return PromptFeatures(self.text(ids).tokens)

    def image_embed(self, feats: SequenceFeatures) -> Tensor:
        return T.l2_normalize(self.image_head(feats.cls))

    def text_embed(self, feats: PromptFeatures) -> Tensor:
        return T.l2_normalize(self.text_head(feats.cls))

    def temperature(self) -> Tensor:
        return T.exp(T.clamp(self.log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX))

    def tokenize_prompts(self, texts, vocab: Vocabulary) -> np.ndarray:
        """Prompt ids; truncation is refused since it would cut the answer word off."""
        for t in texts:
            if len(split_words(t)) > self.prompt_len - 1:
                raise ContractError(f"prompt {t!r} does not fit in prompt_len={self.prompt_len}")
        return np.stack([tokenize(t, vocab, self.prompt_len - 1) for t in texts])

    def contrastive_loss(self, images, text_ids) -> Tensor:
        img = self.image_embed(self.encode_image(images))
        txt = self.text_embed(self.encode_text(text_ids))
        return info_nce(similarity_matrix(img, txt, self.temperature()))


def similarity_matrix(image_vecs, text_vecs, temperature, check: bool = False) -> Tensor:
    """``temperature * image_vecs @ text_vecs.T``; rows must be unit norm."""
    image_vecs, text_vecs = T.as_tensor(image_vecs), T.as_tensor(text_vecs)
    if check or T._DEBUG:
        for name, v in (("image", image_vecs), ("text", text_vecs)):
            norms = np.linalg.norm(v.data, axis=-1)
            if not np.allclose(norms, 1.0, atol=1e-5):
                raise ContractError(f"{name} vectors are not unit norm (norms {norms.min():.6g}..{norms.max():.6g})")
    return T.matmul(image_vecs, text_vecs.transpose()) * temperature


def info_nce(sim) -> Tensor:
    """Symmetric InfoNCE: mean of image->text and text->image cross-entropy."""
    sim = T.as_tensor(sim)
    b = sim.shape[0]
    if b < 2:
        raise ConfigError("contrastive batch needs at least 2 pairs")
    labels = np.arange(b)
    return (T.cross_entropy(sim, labels) + T.cross_entropy(sim.transpose(), labels)) * 0.5


def contrastive_pretrain(clip: ClipModel, pairs, vocab: Vocabulary, steps: int, batch: int, seed: int = 0,
                         lr: float = 3e-3, weight_decay: float = 0.0, image_size: int | None = None,
                         log_every: int = 0, log=None, temperature_lr_mult: float = 10.0):
    """Train ``clip`` on (image, caption) pairs; returns the per-step loss history.

    Each batch holds ``batch`` distinct captions (one image each), so no
    in-batch negative shares its positive's caption.

    The log-temperature gets its own step size, ``lr * temperature_lr_mult``.
    Starting from a scale of 1, cosine logits cannot separate a batch well
    (B=8 bottoms out near a loss of 1.17), and Adam moves a scalar by about
    ``lr`` per step, so at the shared rate the scale barely grows in a short run.
    """
    from .keyframe import resize_rgb
    from .optim import AdamW

    if batch < 2:
        raise ConfigError("contrastive batch needs at least 2 pairs")
    by_caption: dict[str, list[np.ndarray]] = {}
    for image, caption in pairs:
        rgb = image.rgb if hasattr(image, "rgb") else np.asarray(image)
        if image_size is not None:
            rgb = resize_rgb(rgb, image_size)
        by_caption.setdefault(caption, []).append(rgb)
    captions = sorted(by_caption)
    if len(captions) < 2:
        raise ConfigError("contrastive pretraining needs at least 2 distinct captions")
    batch = min(batch, len(captions))
    caption_ids = clip.tokenize_prompts(captions, vocab)
    dtype = T.get_default_dtype()

    rng = np.random.default_rng(seed)
    params = [p for p in clip.trainable_parameters() if p is not clip.log_scale]
    opts = [AdamW(params, lr=lr, weight_decay=weight_decay)]
    if clip.log_scale.requires_grad:
        opts.append(AdamW([clip.log_scale], lr=lr * temperature_lr_mult, weight_decay=0.0))
    history = []
    for step in range(steps):
        pick = np.sort(rng.choice(len(captions), size=batch, replace=False))
        images = np.stack([
            by_caption[captions[i]][rng.integers(len(by_caption[captions[i]]))] for i in pick
        ]).astype(dtype)
        clip.zero_grad()
        loss = clip.contrastive_loss(images, caption_ids[pick])
        T.backward(loss)
        for opt in opts:
            opt.step()
        history.append(float(loss.data))
        if log is not None and log_every and (step + 1) % log_every == 0:
            log({"step": step + 1, "loss": history[-1]})
    return history


def matched_pair_rate(clip: ClipModel, images, text_ids) -> float:
    """Fraction of rows whose matched similarity beats the mean mismatched one."""
    with T.no_grad():
        img = clip.image_embed(clip.encode_image(images)).data
        txt = clip.text_embed(clip.encode_text(text_ids)).data
    sim = img @ txt.T
    b = sim.shape[0]
    off = (sim.sum(axis=1) - np.diag(sim)) / (b - 1)
    return float((np.diag(sim) > off).mean())
