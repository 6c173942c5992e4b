import math

import numpy as np
import pytest

from hepco.nncore import cross_entropy, finite_diff_check
from hepco.promptmodel import (
    CheckpointFormatError,
    FrozenAttention,
    PromptState,
    attention_weights,
    classify_latent,
    classify_latent_backward,
    compose_prompt,
    mask_logits,
    prompted_backward,
    prompted_forward,
)


def _state(keys, prompts, c=2):
    keys = np.asarray(keys, dtype=float)
    prompts = np.asarray(prompts, dtype=float)
    d = keys.shape[1]
    return PromptState(keys, prompts, np.zeros((d, c)), np.zeros(c))


def _forward_oracle(tokens, query, state, attn):
    """Per-position loops: prefix keys/values from the composed prompt, then tokens."""
    m, length, d, _ = state.shape
    h = length // 2
    w = []
    for k in state.keys:
        den = np.linalg.norm(query) * np.linalg.norm(k)
        w.append(0.0 if den == 0 else float(query @ k) / den)
    p = sum(wi * pi for wi, pi in zip(w, state.prompts))
    key_rows = [p[i] for i in range(h)] + list(tokens)
    val_rows = [p[h + i] for i in range(h)] + list(tokens)
    qv = query @ attn.wq
    scores = [float((r @ attn.wk) @ qv) / math.sqrt(d) for r in key_rows]
    mx = max(scores)
    e = [math.exp(s - mx) for s in scores]
    z = sum(e)
    ctx = sum((ei / z) * (r @ attn.wv) for ei, r in zip(e, val_rows))
    return (ctx @ attn.wo) @ state.weight + state.bias


@pytest.fixture
def small():
    rng = np.random.default_rng(0)
    d, c = 6, 3
    st = PromptState.init(4, 4, d, c, rng, head_scale=0.5)
    attn = FrozenAttention.init(d, rng, identity_value=False)
    tokens = rng.normal(size=(5, 3, d))
    return st, attn, tokens, tokens.mean(axis=1)


class TestCompose:
    def test_single_aligned_key(self):
        p, cos = compose_prompt(np.array([1.0, 0.0]), _state([[1, 0]], [[[2, 3], [4, 5]]]))
        np.testing.assert_allclose(p, [[2, 3], [4, 5]])
        np.testing.assert_allclose(cos, [1.0])

    def test_two_keys_half_weight(self):
        s = _state([[1, 0], [0, 1]], [[[1, 0], [1, 0]], [[0, 1], [0, 1]]])
        p, _ = compose_prompt(np.array([1.0, 1.0]) / math.sqrt(2), s)
        r = 1 / math.sqrt(2)
        np.testing.assert_allclose(p, [[r, r], [r, r]], atol=1e-15)

    def test_orthogonal_key_gives_zero(self):
        p, _ = compose_prompt(np.array([1.0, 0.0]), _state([[0, 1]], [[[7, 7], [7, 7]]]))
        np.testing.assert_array_equal(p, np.zeros((2, 2)))

    def test_negative_weights_kept(self):
        _, cos = compose_prompt(np.array([1.0, 0.0]), _state([[-1, 0]], [[[1, 1], [1, 1]]]))
        assert cos[0] == pytest.approx(-1.0)

    @pytest.mark.parametrize("alpha", [1e-3, 0.5, 7.0, 1e3])
    def test_query_scale_invariance(self, alpha):
        rng = np.random.default_rng(1)
        s = PromptState.init(5, 2, 4, 2, rng)
        q = rng.normal(size=4)
        np.testing.assert_allclose(compose_prompt(alpha * q, s)[0], compose_prompt(q, s)[0], atol=1e-12)

    def test_pool_permutation_invariance(self, small):
        st, attn, tokens, q = small
        perm = np.array([2, 0, 3, 1])
        shuffled = PromptState(st.keys[perm], st.prompts[perm], st.weight, st.bias)
        np.testing.assert_allclose(prompted_forward(tokens, q, shuffled, attn),
                                   prompted_forward(tokens, q, st, attn), atol=1e-12)


class TestForward:
    def test_matches_loop_oracle(self, small):
        st, attn, tokens, q = small
        out = prompted_forward(tokens, q, st, attn)
        for i in range(len(tokens)):
            np.testing.assert_allclose(out[i], _forward_oracle(tokens[i], q[i], st, attn), atol=1e-12)

    def test_single_sample(self, small):
        st, attn, tokens, q = small
        np.testing.assert_allclose(prompted_forward(tokens[0], q[0], st, attn),
                                   prompted_forward(tokens, q, st, attn)[0], atol=1e-14)

    def test_zero_prompts_are_token_attention_with_null_prefix_slots(self, small):
        # zero prefixes score 0 and carry zero values: they only add L/2 units of mass
        st, attn, tokens, q = small
        zero = PromptState(st.keys, np.zeros_like(st.prompts), st.weight, st.bias)
        d, h = tokens.shape[2], st.prompts.shape[1] // 2
        for i in range(len(tokens)):
            s = np.array([(x @ attn.wk) @ (q[i] @ attn.wq) for x in tokens[i]]) / math.sqrt(d)
            e = np.exp(s)
            ctx = (e[:, None] * (tokens[i] @ attn.wv)).sum(axis=0) / (e.sum() + h)
            expected = (ctx @ attn.wo) @ st.weight + st.bias
            np.testing.assert_allclose(prompted_forward(tokens[i], q[i], zero, attn), expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self, small):
        st, attn, tokens, q = small
        a = attention_weights(tokens, q, st, attn)
        assert a.shape == (5, 2 + 3)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)

    def test_dim_mismatch(self, small):
        st, attn, tokens, q = small
        with pytest.raises(ValueError):
            prompted_forward(tokens[:, :, :4], q[:, :4], st, attn)

    def test_attention_is_read_only(self):
        attn = FrozenAttention.init(4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            attn.wq[0, 0] = 1.0


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_prompt_and_head_grads(self, seed):
        rng = np.random.default_rng(seed)
        st = PromptState.init(3, 4, 5, 3, rng, head_scale=0.5)
        attn = FrozenAttention.init(5, rng, identity_value=False)
        tokens = rng.normal(size=(4, 2, 5))
        q, y = tokens.mean(axis=1), rng.integers(0, 3, size=4)
        logits, cache = prompted_forward(tokens, q, st, attn, with_cache=True)
        _, dl = cross_entropy(logits, y)
        g = prompted_backward(dl / 4, cache, st, attn)

        def f(p):
            return cross_entropy(prompted_forward(tokens, q, PromptState.from_params(p), attn), y)[0].mean()

        assert finite_diff_check(f, st.params(), g) < 1e-4

    def test_attention_grads(self, small):
        st, attn, tokens, q = small
        y = np.array([0, 1, 2, 0, 1])
        logits, cache = prompted_forward(tokens, q, st, attn, with_cache=True)
        g = prompted_backward(cross_entropy(logits, y)[1] / 5, cache, st, attn, train_attention=True,
                              train_prompts=False)
        assert "keys" not in g

        def f(p):
            return cross_entropy(prompted_forward(tokens, q, st, FrozenAttention.from_params(p)), y)[0].mean()

        assert finite_diff_check(f, attn.params(), {k: g[k] for k in ("wq", "wk", "wv", "wo")}) < 1e-4

    def test_frozen_by_default(self, small):
        st, attn, tokens, q = small
        logits, cache = prompted_forward(tokens, q, st, attn, with_cache=True)
        g = prompted_backward(np.ones_like(logits), cache, st, attn)
        assert set(g) == {"keys", "prompts", "weight", "bias"}

    def test_head_only_is_linear_probe(self, small):
        # with zero prompts the head sees fixed features; its gradient is the linear-model gradient
        st, attn, tokens, q = small
        zero = PromptState(st.keys, np.zeros_like(st.prompts), st.weight, st.bias)
        y = np.array([2, 1, 0, 0, 1])
        logits, cache = prompted_forward(tokens, q, zero, attn, with_cache=True)
        feats = cache.out
        np.testing.assert_allclose(logits, feats @ zero.weight + zero.bias, atol=1e-12)
        _, dl = cross_entropy(logits, y)
        g = prompted_backward(dl, cache, zero, attn, train_prompts=False)
        np.testing.assert_allclose(g["weight"], feats.T @ dl, atol=1e-12)


class TestClassifier:
    def test_classify_latent(self):
        st = PromptState(np.zeros((1, 2)), np.zeros((1, 2, 2)), np.array([[1.0, 0.0], [0.0, 2.0]]),
                         np.array([0.5, -0.5]))
        np.testing.assert_allclose(classify_latent(np.array([1.0, 1.0]), st), [1.5, 1.5])

    def test_classifier_gradient_is_outer_product(self):
        rng = np.random.default_rng(2)
        st = PromptState.init(1, 2, 4, 3, rng)
        z = rng.normal(size=(1, 4))
        _, dl = cross_entropy(classify_latent(z, st), np.array([1]))
        _, dw, db = classify_latent_backward(dl, z, st)
        p = np.exp(classify_latent(z, st)[0]) / np.exp(classify_latent(z, st)[0]).sum()
        np.testing.assert_allclose(dw, np.outer(z[0], p - np.eye(3)[1]), atol=1e-14)
        np.testing.assert_allclose(db, p - np.eye(3)[1], atol=1e-14)

    def test_mask(self):
        out = mask_logits(np.array([1.0, 2.0, 3.0]), np.array([True, False, True]))
        assert out[1] == -np.inf and out[2] == 3.0


class TestState:
    def test_param_count(self):
        st = PromptState.init(2, 2, 4, 3, np.random.default_rng(0))
        # keys 2*4, prompts 2*2*4, weight 4*3, bias 3
        assert st.n_params == 8 + 16 + 12 + 3

    def test_roundtrip(self):
        st = PromptState.init(3, 2, 5, 4, np.random.default_rng(4))
        assert PromptState.from_bytes(st.to_bytes()).equals(st)

    def test_bad_checkpoint(self):
        buf = PromptState.init(1, 2, 2, 2, np.random.default_rng(0)).to_bytes()
        with pytest.raises(CheckpointFormatError):
            PromptState.from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(CheckpointFormatError):
            PromptState.from_bytes(buf[:-8])

    def test_odd_length_rejected(self):
        with pytest.raises(ValueError):
            PromptState(np.zeros((1, 2)), np.zeros((1, 3, 2)), np.zeros((2, 2)), np.zeros(2))
