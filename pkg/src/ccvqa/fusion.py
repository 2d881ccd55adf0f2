"""Cross-domain learning head and the end-to-end CCVQA model.

Four class tokens are produced per sample, each an ``a``-vector with one
coordinate per candidate answer (``a == C``):

* ``h_qv`` / ``h_qk``: one shared transformer over the concatenation of the
  question sequence with the video (resp. key-frame) sequence, followed by a
  per-branch affine head on the class token.
* ``h_tv`` / ``h_tk``: per-candidate dot products between projected prompt
  class tokens and the projected video (resp. key-frame) class token.

The tokens are combined by a learned affine fusion into answer logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .clip import ClipModel, build_prompts
from .config import MODES, ModelConfig
from .errors import ConfigError, ContractError
from .nn import Linear, Module, TransformerEncoder
from .target_encoders import SequenceFeatures, TextEncoder, TimeSformer, Vocabulary, tokenize
from .tensor import Parameter, Tensor

HEAD_INIT_STD = 0.02


@dataclass
class FusionTokens:
    h_qv: Tensor
    h_qk: Tensor | None = None
    h_tv: Tensor | None = None
    h_tk: Tensor | None = None


@dataclass
class Batch:
    frames: np.ndarray  # (B, T, S, S, 3)
    keyframes: np.ndarray  # (B, K, S, S, 3)
    question_ids: np.ndarray  # (B, 1+N_q)
    questions: list[str]
    targets: np.ndarray | None = None

    def __len__(self):
        return self.frames.shape[0]


class SharedTransformer(Module):
    """Transformer applied to ``[H_q ; H_x]`` with segment embeddings.

    The same instance serves both question/video and question/key-frame
    pairs. Setting ``bypass`` skips the transformer body (test hook).
    """

    def __init__(self, d, heads, layers, rng, mlp_ratio=4):
        self.segment = Parameter(rng.normal(0.0, 0.02, (2, d)))
        self.body = TransformerEncoder(d, heads, layers, rng, mlp_ratio)
        self.bypass = False

    def forward(self, text: SequenceFeatures, visual: SequenceFeatures) -> Tensor:
        if text.width != visual.width:
            raise ConfigError(f"width mismatch: question {text.width} vs visual {visual.width}")
        x = T.concat([text.tokens + self.segment[0], visual.tokens + self.segment[1]], axis=-2)
        if self.bypass:
            return x[..., 0, :]
        mask = np.concatenate([text.key_mask(), visual.key_mask()], axis=-1)
        return self.body(x, mask=mask)[..., 0, :]


class FusionWeights(Module):
    """``H = W1 h_qv + W2 h_qk + W3 h_tv + W4 h_tk + b``."""

    def __init__(self, a: int, diagonal: bool = False):
        self.diagonal = diagonal
        init = np.ones(a) if diagonal else np.eye(a)
        self.W1 = Parameter(init)
        self.W2 = Parameter(init)
        self.W3 = Parameter(init)
        self.W4 = Parameter(init)
        self.b = Parameter(np.zeros(a))

    def apply(self, W, h):
        if self.diagonal:
            return h * W
        return _rowwise(h, lambda x: T.matmul(x, W.transpose()))

    def forward(self, tokens: FusionTokens) -> Tensor:
        out = None
        for W, h in ((self.W1, tokens.h_qv), (self.W2, tokens.h_qk), (self.W3, tokens.h_tv), (self.W4, tokens.h_tk)):
            if h is None:
                continue
            term = self.apply(W, h)
            out = term if out is None else out + term
        if out is None:
            raise ContractError("no fusion tokens supplied")
        return out + self.b


def fuse(tokens: FusionTokens, weights: FusionWeights) -> Tensor:
    return weights(tokens)


def _rowwise(x, fn):
    """Apply ``fn`` to a (B, n) view of ``x``; 1-D inputs come back 1-D."""
    if x.ndim == 1:
        return T.reshape(fn(T.reshape(x, (1, -1))), (-1,))
    return fn(x)


def dot_interaction(prompt_proj, visual_proj) -> Tensor:
    """Row-wise dot products of prompt rows with the visual vector.

    (C, w) with (w,) -> (C,); (C, w) with (B, w) -> (B, C) (prompts shared);
    (B, C, w) with (B, w) -> (B, C).
    """
    prompt_proj, visual_proj = T.as_tensor(prompt_proj), T.as_tensor(visual_proj)
    if prompt_proj.shape[-1] != visual_proj.shape[-1]:
        raise ConfigError(f"projection widths differ: {prompt_proj.shape[-1]} vs {visual_proj.shape[-1]}")
    if prompt_proj.ndim == 2:
        return _rowwise(visual_proj, lambda v: T.matmul(v, prompt_proj.transpose()))
    out = T.matmul(prompt_proj, T.reshape(visual_proj, visual_proj.shape + (1,)))
    return T.reshape(out, out.shape[:-1])


def decode_answer(logits) -> np.ndarray | int:
    """Argmax over answers; ties go to the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.isfinite(arr).all():
        raise ContractError("logits must be finite")
    out = np.argmax(arr, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def qa_loss(logits, targets) -> Tensor:
    """Softmax cross-entropy over the answer space (mean over the batch)."""
    return T.cross_entropy(logits, targets)


class CCVQA(Module):
    def __init__(self, cfg: ModelConfig, answers, vocab: Vocabulary, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.answers = list(answers)
        self.vocab = vocab
        C = len(self.answers)
        if C < 2:
            raise ConfigError("answer space needs at least 2 candidates")
        rng = np.random.default_rng(seed)
        d, w = cfg.d, cfg.clip_width
        self.video = TimeSformer(d, cfg.heads, cfg.video_layers, cfg.image_size, cfg.patch, cfg.frames, rng, cfg.mlp_ratio)
        self.question = TextEncoder(len(vocab), d, cfg.heads, cfg.question_layers, cfg.question_len + 1, rng,
                                    vocab.pad_id, cfg.mlp_ratio)
        # CLIP weights come from their own seed so every mode/seed can share one pretrained branch
        self.clip = ClipModel(len(vocab), d, w, cfg.heads, cfg.clip_heads, cfg.clip_layers, cfg.image_size,
                              cfg.patch, cfg.prompt_len, np.random.default_rng(10_000 + seed), vocab.pad_id,
                              cfg.mlp_ratio)
        self.shared = SharedTransformer(d, cfg.heads, cfg.fusion_layers, rng, cfg.mlp_ratio)
        # small output-side inits so the fused logits start near zero (loss near ln C)
        self.head_qv = Linear(d, C, rng, std=HEAD_INIT_STD)
        self.head_qk = Linear(d, C, rng, std=HEAD_INIT_STD)
        self.proj_t = Linear(w, w, rng)
        self.proj_v = Linear(d, w, rng, std=HEAD_INIT_STD)
        self.proj_k = Linear(d, w, rng, std=HEAD_INIT_STD)
        self.fusion = FusionWeights(C, diagonal=cfg.fusion_weights == "diagonal")
        self.assign_names()
        self._prompt_cache: dict[str, np.ndarray] = {}
        self._prompt_ids: dict[str, np.ndarray] = {}

    @property
    def num_answers(self) -> int:
        return len(self.answers)

    # -- CLIP branch management -------------------------------------------------
    @property
    def clip_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.clip.parameters())

    def set_clip_frozen(self, frozen: bool) -> None:
        self.clip.set_requires_grad(not frozen)
        self.clear_prompt_cache()

    def clear_prompt_cache(self) -> None:
        self._prompt_cache.clear()

    def to(self, dtype):
        super().to(dtype)
        self.clear_prompt_cache()
        return self

    def load_state_dict(self, state, strict=True):
        super().load_state_dict(state, strict)
        self.clear_prompt_cache()

    def prompt_ids(self, question: str) -> np.ndarray:
        ids = self._prompt_ids.get(question)
        if ids is None:
            texts = [p.text for p in build_prompts(question, self.answers)]
            ids = self.clip.tokenize_prompts(texts, self.vocab)
            self._prompt_ids[question] = ids
        return ids

    def prompt_class_tokens(self, questions) -> Tensor:
        """(B, C, w) prompt class tokens; cached per prompt string while CLIP is frozen."""
        unique = list(dict.fromkeys(questions))
        where = np.array([unique.index(q) for q in questions])
        if self.clip_frozen:
            missing = []
            for q in unique:
                for p in build_prompts(q, self.answers):
                    if p.text not in self._prompt_cache:
                        missing.append((p.text, q, p.answer_index))
            if missing:
                ids = np.stack([self.prompt_ids(q)[i] for _, q, i in missing])
                with T.no_grad():
                    cls = self.clip.encode_text(ids).cls.data
                for (text, _, _), row in zip(missing, cls):
                    self._prompt_cache[text] = row
            table = np.stack([
                np.stack([self._prompt_cache[p.text] for p in build_prompts(q, self.answers)]) for q in unique
            ])
            return Tensor(table[where], dtype=table.dtype)
        ids = np.concatenate([self.prompt_ids(q) for q in unique])
        cls = self.clip.encode_text(ids).cls
        cls = T.reshape(cls, (len(unique), self.num_answers, cls.shape[-1]))
        return T.take(cls, where, axis=0)

    # -- the four encoders --------------------------------------------------------
    def encode_qv(self, H_q: SequenceFeatures, H_v: SequenceFeatures) -> Tensor:
        return self.head_qv(self.shared(H_q, H_v))

    def encode_qk(self, H_q: SequenceFeatures, H_k: SequenceFeatures) -> Tensor:
        return self.head_qk(self.shared(H_q, H_k))

    def interact_tv(self, t_cls, H_v: SequenceFeatures) -> Tensor:
        return dot_interaction(self.proj_t(t_cls), self.proj_v(H_v.cls))

    def interact_tk(self, t_cls, H_k: SequenceFeatures) -> Tensor:
        return dot_interaction(self.proj_t(t_cls), self.proj_k(H_k.cls))

    def encode_keyframes(self, keyframes) -> SequenceFeatures:
        """(B, K, S, S, 3) -> H_k averaged over the K key frames."""
        keyframes = np.asarray(keyframes)
        b, k = keyframes.shape[:2]
        feats = self.clip.encode_image(keyframes.reshape((b * k,) + keyframes.shape[2:]))
        tokens = feats.tokens
        tokens = T.reshape(tokens, (b, k) + tokens.shape[1:])
        return SequenceFeatures(T.mean(tokens, axis=1))

    def forward(self, batch: Batch, mode: str = "full"):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        H_v = self.video(batch.frames)
        H_q = self.question(batch.question_ids)
        tokens = FusionTokens(h_qv=self.encode_qv(H_q, H_v))
        if mode != "no_clip":
            H_k = self.encode_keyframes(batch.keyframes)
            t_cls = self.prompt_class_tokens(batch.questions)
            tokens.h_tk = self.interact_tk(t_cls, H_k)
            if mode == "full":
                tokens.h_qk = self.encode_qk(H_q, H_k)
                tokens.h_tv = self.interact_tv(t_cls, H_v)
        return self.fusion(tokens), tokens

    def make_batch(self, clips, keyframes, questions, targets=None) -> Batch:
        dtype = T.get_default_dtype()
        ids = np.stack([tokenize(q, self.vocab, self.cfg.question_len) for q in questions])
        return Batch(
            frames=np.asarray(clips, dtype=dtype),
            keyframes=np.asarray(keyframes, dtype=dtype),
            question_ids=ids,
            questions=list(questions),
            targets=None if targets is None else np.asarray(targets, dtype=np.int64),
        )


def forward_ccvqa(model: CCVQA, batch: Batch, mode: str = "full") -> Tensor:
    return model(batch, mode)[0]
