"""Target-domain encoders: a divided space-time video transformer and a
BERT-style question encoder, plus the tokenizer and frame sampler they use."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .keyframe import Frame, resize_rgb
from .nn import Embedding, LayerNorm, Linear, MLP, Module, MultiHeadAttention, TransformerEncoder
from .tensor import Parameter, Tensor


@dataclass
class SequenceFeatures:
    """Encoded sequence ``(..., 1+N, width)``; position 0 is the class token."""

    tokens: Tensor
    mask: np.ndarray | None = None  # (..., 1+N) True where the token is real

    @property
    def cls(self) -> Tensor:
        return self.tokens[..., 0, :]

    @property
    def length(self) -> int:
        return self.tokens.shape[-2] - 1

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def key_mask(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return np.ones(self.tokens.shape[:-1], dtype=bool)


# ---------------------------------------------------------------------------
# vocabulary and tokenizer
# ---------------------------------------------------------------------------

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
_WORD = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, words=()):
        self.itos: list[str] = [PAD, CLS, UNK]
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        words = sorted({w for t in texts for w in split_words(t)})
        return cls(words)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def cls_id(self) -> int:
        return self.stoi[CLS]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def lookup(self, word: str) -> int:
        return self.stoi.get(word, self.unk_id)

    def to_json(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocabulary":
        if tokens[:3] != [PAD, CLS, UNK]:
            raise ValueError("vocabulary must start with [PAD], [CLS], [UNK]")
        return cls(tokens[3:])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"tokens": self.to_json()}, indent=1))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text())["tokens"])


def tokenize(text: str, vocab: Vocabulary, length: int) -> np.ndarray:
    """``[CLS]`` + word ids, padded or truncated to ``1 + length``."""
    ids = [vocab.cls_id] + [vocab.lookup(w) for w in split_words(text)]
    ids = ids[: 1 + length]
    ids += [vocab.pad_id] * (1 + length - len(ids))
    return np.array(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# video clips
# ---------------------------------------------------------------------------


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, S, S, 3)
    indices: list[int]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def sample_frames(video: list[Frame], num_frames: int, seed: int = 0, size: int | None = None) -> VideoClip:
    """Draw ``num_frames`` frames uniformly (without replacement when possible), kept in time order."""
    if not video:
        raise ContractError("cannot sample from an empty video")
    video = sorted(video, key=lambda f: f.index)
    rng = np.random.default_rng(seed)
    n = len(video)
    if n == num_frames:
        picks = np.arange(n)
    else:
        picks = np.sort(rng.choice(n, size=num_frames, replace=n < num_frames))
    frames = []
    for i in picks:
        rgb = video[i].rgb
        frames.append(resize_rgb(rgb, size) if size is not None else rgb)
    return VideoClip(frames=np.stack(frames), indices=[video[i].index for i in picks])


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., S, S, 3) -> (..., N, patch*patch*3) with N = (S/patch)^2, row-major patches."""
    *lead, h, w, c = images.shape
    if h != w:
        raise ConfigError(f"frames must be square, got {h}x{w}")
    if h % patch:
        raise ConfigError(f"frame size {h} not divisible by patch size {patch}")
    g = h // patch
    x = images.reshape(*lead, g, patch, g, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., g, g, patch, patch, c)
    return x.reshape(*lead, g * g, patch * patch * c)


def num_patches(image_size: int, patch: int) -> int:
    if image_size % patch:
        raise ConfigError(f"frame size {image_size} not divisible by patch size {patch}")
    return (image_size // patch) ** 2


# ---------------------------------------------------------------------------
# video encoder
# ---------------------------------------------------------------------------


class DividedBlock(Module):
    """Temporal attention over same-patch tokens, spatial attention per frame, then MLP."""

    def __init__(self, d, heads, rng, mlp_ratio=4):
        self.ln_t = LayerNorm(d)
        self.attn_t = MultiHeadAttention(d, heads, rng)
        self.ln_s = LayerNorm(d)
        self.attn_s = MultiHeadAttention(d, heads, rng)
        self.ln_m = LayerNorm(d)
        self.mlp = MLP(d, d * mlp_ratio, rng)

    def forward(self, x, cls):
        # x: (B, T, N, d); cls: (B, d)
        b, t, n, d = x.shape
        xt = x.swapaxes(1, 2)
        xt = xt + self.attn_t(self.ln_t(xt))
        x = xt.swapaxes(1, 2)

        c = T.broadcast_to(T.reshape(cls, (b, 1, 1, d)), (b, t, 1, d))
        s = T.concat([c, x], axis=2)
        s = s + self.attn_s(self.ln_s(s))
        cls = T.mean(s[:, :, 0, :], axis=1)
        x = s[:, :, 1:, :]

        x = x + self.mlp(self.ln_m(x))
        cls = cls + self.mlp(self.ln_m(cls))
        return x, cls


class TimeSformer(Module):
    def __init__(self, d, heads, layers, image_size, patch, max_frames, rng, mlp_ratio=4):
        self.patch = patch
        self.image_size = image_size
        self.n_patches = num_patches(image_size, patch)
        self.proj = Linear(patch * patch * 3, d, rng)
        self.pos_spatial = Parameter(rng.normal(0.0, 0.02, (self.n_patches, d)))
        self.pos_temporal = Parameter(rng.normal(0.0, 0.02, (max_frames, 1, d)))
        self.cls_token = Parameter(rng.normal(0.0, 0.02, (d,)))
        self.blocks = [DividedBlock(d, heads, rng, mlp_ratio) for _ in range(layers)]
        self.ln_f = LayerNorm(d)

    def patchify(self, frames: np.ndarray) -> Tensor:
        """(B, T, S, S, 3) -> (B, T, N_v, d) patch tokens with positional embeddings."""
        frames = np.asarray(frames)
        if frames.shape[-3] != self.image_size:
            raise ConfigError(f"expected {self.image_size}px frames, got {frames.shape[-3]}")
        t = frames.shape[-4]
        if t > self.pos_temporal.shape[0]:
            raise ConfigError(f"{t} frames exceed the temporal table of {self.pos_temporal.shape[0]}")
        patches = Tensor(extract_patches(frames, self.patch))
        tokens = self.proj(patches) + self.pos_spatial
        return tokens + self.pos_temporal[:t]

    def forward(self, frames) -> SequenceFeatures:
        frames = np.asarray(frames)
        single = frames.ndim == 4
        if single:
            frames = frames[None]
        x = self.patchify(frames)
        b, _, _, d = x.shape
        cls = T.broadcast_to(self.cls_token, (b, d))
        for block in self.blocks:
            x, cls = block(x, cls)
        fused = T.mean(x, axis=1)  # temporal fusion
        tokens = self.ln_f(T.concat([T.reshape(cls, (b, 1, d)), fused], axis=1))
        if single:
            tokens = tokens[0]
        return SequenceFeatures(tokens)


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------


class TextEncoder(Module):
    """Token + learnable position embedding, layer norm, masked transformer.

    Used for questions (target domain) and for prompts in the CLIP branch.
    """

    def __init__(self, vocab_size, d, heads, layers, max_len, rng, pad_id=0, mlp_ratio=4):
        self.pad_id = pad_id
        self.tok = Embedding(vocab_size, d, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, (max_len, d)))
        self.ln_emb = LayerNorm(d)
        self.encoder = TransformerEncoder(d, heads, layers, rng, mlp_ratio)

    def forward(self, ids) -> SequenceFeatures:
        ids = np.asarray(ids, dtype=np.int64)
        length = ids.shape[-1]
        if length > self.pos.shape[0]:
            raise ConfigError(f"sequence of {length} exceeds position table of {self.pos.shape[0]}")
        mask = ids != self.pad_id
        x = self.ln_emb(self.tok(ids) + self.pos[:length])
        return SequenceFeatures(self.encoder(x, mask=mask), mask=mask)


BertEncoder = TextEncoder
