import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccvqa import tensor as T
from ccvqa.errors import ConfigError, ContractError
from ccvqa.fusion import (
    CCVQA,
    FusionTokens,
    FusionWeights,
    decode_answer,
    dot_interaction,
    forward_ccvqa,
    fuse,
    qa_loss,
)
from ccvqa.gradcheck import build_case
from ccvqa.target_encoders import SequenceFeatures, Vocabulary

from conftest import tiny_config

ANSWERS = ["red", "blue", "green", "circle"]
QUESTIONS = ["what color is the shape", "what shape is shown"]


def tiny_model(seed=0, answers=ANSWERS, **cfg):
    vocab = Vocabulary.build(QUESTIONS + list(answers) + ["question answer"])
    return CCVQA(tiny_config(**cfg), answers, vocab, seed=seed)


def tiny_batch(model, rng, b=3):
    s, c = model.cfg.image_size, model.cfg
    return model.make_batch(
        rng.random((b, c.frames, s, s, 3)),
        rng.random((b, c.keyframes, s, s, 3)),
        [QUESTIONS[i % 2] for i in range(b)],
        rng.integers(0, model.num_answers, size=b),
    )


def encode_all(model, batch):
    H_v = model.video(batch.frames)
    H_q = model.question(batch.question_ids)
    H_k = model.encode_keyframes(batch.keyframes)
    t_cls = model.prompt_class_tokens(batch.questions)
    return H_q, H_v, H_k, t_cls


class TestShapes:
    @pytest.mark.parametrize("seed", range(60))
    def test_random_geometry(self, seed):
        model, batch, cfg = build_case(1000 + seed)
        b, C = len(batch), model.num_answers
        with T.default_dtype(np.float64):
            H_q, H_v, H_k, _ = encode_all(model, batch)
            H_t = model.clip.encode_text(model.prompt_ids(batch.questions[0]))
            logits, tokens = model(batch)
        n_v = (cfg.image_size // cfg.patch) ** 2
        assert H_q.tokens.shape == (b, 1 + cfg.question_len, cfg.d)
        assert H_v.tokens.shape == (b, 1 + n_v, cfg.d)
        assert H_k.tokens.shape == (b, 1 + n_v, cfg.d)
        assert H_t.tokens.shape == (C, cfg.prompt_len, cfg.clip_width)
        for tok in (tokens.h_qv, tokens.h_qk, tokens.h_tv, tokens.h_tk, logits):
            assert tok.shape == (b, C)
            assert np.isfinite(tok.data).all()


class TestSharedTransformer:
    def test_bypass_linear_path(self, f64, rng):
        model = tiny_model()
        model.shared.bypass = True
        model.shared.segment.data[:] = 0.0
        C, d = model.num_answers, model.cfg.d
        model.head_qv.weight.data[:] = np.eye(d)[:, :C]
        model.head_qv.bias.data[:] = 0.0
        batch = tiny_batch(model, rng)
        H_q, H_v, _, _ = encode_all(model, batch)
        np.testing.assert_array_equal(model.encode_qv(H_q, H_v).data, H_q.cls.data[:, :C])

    def test_same_parameter_objects(self, rng):
        model = tiny_model()
        batch = tiny_batch(model, rng)
        H_q, H_v, H_k, _ = encode_all(model, batch)
        reached = []
        for fn, H in ((model.encode_qv, H_v), (model.encode_qk, H_k)):
            model.zero_grad()
            T.backward(fn(H_q, H).sum())
            reached.append({id(p) for p in model.shared.parameters() if p.grad is not None})
        body = {id(p) for p in model.shared.parameters()}
        assert reached[0] == reached[1] == body
        assert model.head_qv.weight is not model.head_qk.weight
        ids = [id(p) for p in model.parameters()]
        assert len(ids) == len(set(ids))

    def test_perturbation_reaches_both_branches(self, rng):
        model = tiny_model()
        batch = tiny_batch(model, rng)
        H_q, H_v, H_k, _ = encode_all(model, batch)
        qv, qk = model.encode_qv(H_q, H_v).data, model.encode_qk(H_q, H_k).data
        w = model.shared.body.blocks[0].attn.wv.weight
        w.data += rng.normal(size=w.shape).astype(w.dtype)
        assert np.abs(model.encode_qv(H_q, H_v).data - qv).max() > 1e-4
        assert np.abs(model.encode_qk(H_q, H_k).data - qk).max() > 1e-4

    def test_gradient_is_sum_of_branch_gradients(self, f64, rng):
        model = tiny_model()
        batch = tiny_batch(model, rng)
        with T.no_grad():
            H_q, H_v, H_k, _ = encode_all(model, batch)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        params = model.shared.parameters()

        def grads(use_qv, use_qk):
            model.zero_grad()
            loss = 0.0
            if use_qv:
                loss = loss + (model.encode_qv(H_q, H_v) * a).sum()
            if use_qk:
                loss = loss + (model.encode_qk(H_q, H_k) * b).sum()
            T.backward(loss)
            return [p.grad.copy() for p in params]

        both, qv, qk = grads(True, True), grads(True, False), grads(False, True)
        for name, g, g1, g2 in zip([n for n, _ in model.shared.named_parameters()], both, qv, qk):
            np.testing.assert_allclose(g, g1 + g2, rtol=0, atol=1e-13, err_msg=name)

    def test_head_gradient_is_outer_product(self, f64, rng):
        model = tiny_model()
        batch = tiny_batch(model, rng)
        model.zero_grad()
        logits, tokens = model(batch)
        T.backward(qa_loss(logits, batch.targets))
        with T.no_grad():
            H_q, H_v, _, _ = encode_all(model, batch)
            cls = model.shared(H_q, H_v).data
        p = np.exp(logits.data - logits.data.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(len(batch)), batch.targets] -= 1.0
        g_head = p / len(batch)  # W1 = I, so dL/dh_qv equals dL/dH
        np.testing.assert_allclose(model.head_qv.weight.grad, cls.T @ g_head, atol=1e-12)
        err = T.finite_diff_check(lambda: qa_loss(forward_ccvqa(model, batch), batch.targets),
                                  [model.head_qv.weight], coords_per_param=50)
        assert err < 1e-4

    def test_width_mismatch(self, rng):
        model = tiny_model()
        text = SequenceFeatures(T.Tensor(rng.normal(size=(1, 3, 8))))
        vis = SequenceFeatures(T.Tensor(rng.normal(size=(1, 3, 4))))
        with pytest.raises(ConfigError):
            model.shared(text, vis)


def linear_loop(x, W, b):
    return np.array([sum(x[i] * W[i, j] for i in range(len(x))) + b[j] for j in range(W.shape[1])])


def interaction_oracle(model, t_cls, v_cls, proj_v):
    B, C, _ = t_cls.shape
    out = np.zeros((B, C))
    for i in range(B):
        pv = linear_loop(v_cls[i], proj_v.weight.data, proj_v.bias.data)
        for c in range(C):
            pt = linear_loop(t_cls[i, c], model.proj_t.weight.data, model.proj_t.bias.data)
            out[i, c] = sum(pt[k] * pv[k] for k in range(len(pv)))
    return out


class TestDotInteraction:
    def test_zero_visual_projection(self, f64, rng):
        model = tiny_model()
        batch = tiny_batch(model, rng)
        _, H_v, _, t_cls = encode_all(model, batch)
        model.proj_v.weight.data[:] = 0.0
        assert np.array_equal(model.interact_tv(t_cls, H_v).data, np.zeros((3, 4)))

    def test_orthonormal_rows_give_one_hot(self, f64):
        w, C, c = 6, 4, 2
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(w, w)))
        prompts = q[:C]
        np.testing.assert_allclose(dot_interaction(prompts, prompts[c]).data, np.eye(C)[c], atol=1e-14)

    def test_against_loops(self, f64):
        for k in range(100):
            rng = np.random.default_rng(k)
            C = int(rng.integers(2, 6))
            model = tiny_model(seed=k, answers=["red", "blue", "green", "circle", "square"][:C])
            b = int(rng.integers(1, 4))
            t_cls = rng.normal(size=(b, C, model.cfg.clip_width))
            v_cls = rng.normal(size=(b, model.cfg.d))
            H = SequenceFeatures(T.Tensor(np.concatenate([v_cls[:, None], rng.normal(size=(b, 2, 8))], axis=1)))
            tv = model.interact_tv(T.Tensor(t_cls), H).data
            tk = model.interact_tk(T.Tensor(t_cls), H).data
            np.testing.assert_allclose(tv, interaction_oracle(model, t_cls, v_cls, model.proj_v), atol=1e-10)
            np.testing.assert_allclose(tk, interaction_oracle(model, t_cls, v_cls, model.proj_k), atol=1e-10)

    def test_shared_prompts(self, f64, rng):
        p, v = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
        np.testing.assert_allclose(dot_interaction(p, v).data, v @ p.T, atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ConfigError):
            dot_interaction(np.ones((4, 3)), np.ones(5))


def random_weights(rng, a, diagonal=False):
    fw = FusionWeights(a, diagonal)
    for p in fw.parameters():
        p.data[...] = rng.normal(size=p.shape)
    return fw


def random_tokens(rng, shape):
    return FusionTokens(*(T.Tensor(rng.normal(size=shape)) for _ in range(4)))


class TestFuse:
    def test_identity_weights_sum_tokens(self, f64):
        fw = FusionWeights(3)
        toks = FusionTokens(*(T.Tensor(np.array(v, dtype=float)) for v in
                              ([1, 2, 3], [0.5, 0, -1], [10, 20, 30], [-4, 0.25, 8])))
        assert np.array_equal(fuse(toks, fw).data, np.array([7.5, 22.25, 40.0]))

    def test_zero_tokens_give_bias(self, f64, rng):
        fw = random_weights(rng, 4)
        zero = FusionTokens(*(T.Tensor(np.zeros(4)) for _ in range(4)))
        assert np.array_equal(fuse(zero, fw).data, fw.b.data)

    @pytest.mark.parametrize("diagonal", [False, True])
    @pytest.mark.parametrize("shape", [(5,), (3, 5)])
    def test_affine(self, f64, diagonal, shape):
        rng = np.random.default_rng(7)
        for _ in range(20):
            fw = random_weights(rng, 5, diagonal)
            x, y = random_tokens(rng, shape), random_tokens(rng, shape)
            al, be = rng.normal(size=2)
            mix = FusionTokens(*(T.Tensor(al * u.data + be * v.data) for u, v in
                                 zip((x.h_qv, x.h_qk, x.h_tv, x.h_tk), (y.h_qv, y.h_qk, y.h_tv, y.h_tk))))
            lhs = fuse(mix, fw).data
            rhs = al * fuse(x, fw).data + be * fuse(y, fw).data - (al + be - 1) * fw.b.data
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_missing_tokens_skipped(self, f64):
        fw = FusionWeights(2)
        assert np.array_equal(fuse(FusionTokens(T.Tensor(np.array([1.0, 2.0]))), fw).data, [1.0, 2.0])

    def test_nothing_to_fuse(self):
        with pytest.raises(ContractError):
            FusionWeights(2)(FusionTokens(None))


class TestDecode:
    def test_examples(self):
        assert decode_answer(np.array([0.1, 0.9])) == 1
        assert decode_answer(np.zeros(5)) == 0
        assert decode_answer(np.array([[0.0, 1.0], [3.0, 1.0]])).tolist() == [1, 0]

    def test_non_finite(self):
        with pytest.raises(ContractError):
            decode_answer(np.array([np.nan, 1.0]))

    # logits on a 0.01 grid: every map below stays strictly increasing in floating point, so no new ties appear
    @given(st.lists(st.integers(-2000, 2000).map(lambda v: v / 100), min_size=2, max_size=8),
           st.floats(-1e3, 1e3))
    def test_shift_and_monotone_invariance(self, xs, c):
        x = np.array(xs)
        k = decode_answer(x)
        assert x[k] == x.max() and k == int(np.flatnonzero(x == x.max())[0])
        for y in (x + c, np.exp(x / 20), x**3, np.arctan(x)):
            assert decode_answer(y) == k


class TestLoss:
    @pytest.mark.parametrize("C", [2, 8, 100])
    def test_uniform_logits(self, f64, C):
        assert abs(qa_loss(np.zeros(C), 1).item() - math.log(C)) < 1e-12

    def test_saturation(self, f64):
        z = np.zeros(8)
        z[3] = 20.0
        assert qa_loss(z, 3).item() < 1e-3

    def test_gradient_closed_form(self, f64, rng):
        z = T.Parameter(rng.normal(size=6))
        T.backward(qa_loss(z, 4))
        expect = np.exp(z.data) / np.exp(z.data).sum() - np.eye(6)[4]
        np.testing.assert_allclose(z.grad, expect, atol=1e-10)

    def test_bad_target(self):
        with pytest.raises(ContractError):
            qa_loss(np.zeros(3), 3)


class TestModes:
    def test_unknown_mode(self, rng):
        model = tiny_model()
        with pytest.raises(ConfigError):
            model(tiny_batch(model, rng), "clip_only")

    def test_no_clip_ignores_clip_parameters(self, rng):
        model = tiny_model()
        batch = tiny_batch(model, rng)
        before = forward_ccvqa(model, batch, "no_clip").data
        for p in model.clip.parameters():
            p.data += rng.normal(size=p.shape)
        model.clear_prompt_cache()
        assert np.array_equal(forward_ccvqa(model, batch, "no_clip").data, before)

    def test_no_crossdomain_h_qv_ignores_keyframes(self, rng):
        model = tiny_model()
        batch = tiny_batch(model, rng)
        _, tokens = model(batch, "no_crossdomain")
        assert tokens.h_qk is None and tokens.h_tv is None and tokens.h_tk is not None
        batch.keyframes = rng.random(batch.keyframes.shape).astype(batch.keyframes.dtype)
        _, changed = model(batch, "no_crossdomain")
        assert np.array_equal(changed.h_qv.data, tokens.h_qv.data)
        assert not np.array_equal(changed.h_tk.data, tokens.h_tk.data)

    def test_full_mode_uses_keyframes(self, rng):
        model = tiny_model()
        batch = tiny_batch(model, rng)
        a = forward_ccvqa(model, batch).data
        batch.keyframes = rng.random(batch.keyframes.shape).astype(batch.keyframes.dtype)
        assert not np.array_equal(forward_ccvqa(model, batch).data, a)


class TestPromptCache:
    def test_encodes_each_prompt_once(self, rng, monkeypatch):
        model = tiny_model()
        model.set_clip_frozen(True)
        calls = []
        real = model.clip.encode_text
        monkeypatch.setattr(model.clip, "encode_text", lambda ids: calls.append(len(ids)) or real(ids))
        batch = tiny_batch(model, rng)
        first = model.prompt_class_tokens(batch.questions).data
        second = model.prompt_class_tokens(batch.questions[::-1]).data
        assert calls == [2 * model.num_answers]
        np.testing.assert_array_equal(second, first[::-1])

    def test_unfrozen_branch_is_not_cached(self, rng):
        model = tiny_model()
        model.set_clip_frozen(False)
        out = model.prompt_class_tokens(QUESTIONS)
        assert out.requires_grad and not model._prompt_cache

    def test_cached_matches_direct(self, rng):
        model = tiny_model()
        model.set_clip_frozen(True)
        cached = model.prompt_class_tokens(QUESTIONS).data
        model.set_clip_frozen(False)
        direct = model.prompt_class_tokens(QUESTIONS).data
        np.testing.assert_allclose(cached, direct, atol=1e-6)


def test_needs_two_answers():
    with pytest.raises(ConfigError):
        tiny_model(answers=["red"])


def test_initial_loss_near_chance(rng):
    model = tiny_model(answers=["red", "blue", "green", "yellow", "magenta", "circle", "square", "triangle"])
    batch = tiny_batch(model, rng, b=8)
    assert abs(qa_loss(forward_ccvqa(model, batch), batch.targets).item() - math.log(8)) < 0.5
