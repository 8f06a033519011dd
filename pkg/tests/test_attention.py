import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from outlierfree.attention import (
    ModelConfig,
    alibi_bias,
    alibi_bias_row,
    alibi_slopes,
    attention_forward,
    formal_apply,
    init_params,
    model_forward,
    softmax,
    softmax1,
    zero_params,
)
from outlierfree.checkpoint import Checkpoint
from outlierfree.errors import ConfigError, EmptyInput, IndexOutOfRange, SequenceTooLong, ShapeMismatch, TokenOutOfRange
from outlierfree.tensor_core import make_rng

scores = arrays(np.float64, st.integers(1, 64), elements=st.floats(-30, 30, allow_nan=False))


def test_softmax1_examples():
    assert softmax1([0.0]).tolist() == [0.5]
    tiny = softmax1([-1e4, -1e4])
    assert np.all(np.isfinite(tiny)) and tiny.sum() < 1e-300
    p = softmax1(np.log([1.0, 2.0, 3.0]))
    assert np.allclose(p, [1 / 7, 2 / 7, 3 / 7], atol=1e-15)


def test_softmax1_large_scores_stay_finite():
    p = softmax1([800.0, 799.0])
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1.0) < 1e-12


def test_softmax_examples():
    assert softmax([0.0]).tolist() == [1.0]
    for c in (-50.0, 0.0, 7.0):
        assert np.allclose(softmax([c] * 4), 0.25, atol=1e-15)
    assert np.allclose(softmax(np.log([1.0, 3.0])), [0.25, 0.75], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(scores)
def test_softmax1_relation_to_softmax(s):
    z = np.sum(np.exp(s))
    assert np.allclose(softmax1(s), softmax(s) * z / (1 + z), rtol=1e-12, atol=1e-300)
    assert softmax1(s).sum() < 1.0
    assert abs(softmax(s).sum() - 1.0) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(scores)
def test_softmax1_preserves_order(s):
    p = softmax1(s)
    i, j = np.triu_indices(len(s), 1)
    assert np.all((s[i] < s[j]) <= (p[i] <= p[j]))
    assert np.all((s[i] > s[j]) <= (p[i] >= p[j]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 32), elements=st.floats(-5, 5, allow_nan=False)))
def test_softmax1_vanishes_under_negative_shift(s):
    assert softmax1(s - 50.0).sum() < 1e-6
    assert abs(softmax(s - 50.0).sum() - 1.0) <= 1e-12


def test_alibi_row_examples():
    assert alibi_bias_row(2, 5, 1.0).tolist() == [-2, -1, 0, -1, -2]
    assert alibi_bias_row(0, 1, 3.0).tolist() == [0]
    assert alibi_bias_row(0, 4, 0.5).tolist() == [0, -0.5, -1, -1.5]
    with pytest.raises(IndexOutOfRange):
        alibi_bias_row(5, 5, 1.0)


def test_alibi_slopes():
    assert np.allclose(alibi_slopes(8), [2.0 ** -k for k in range(1, 9)])
    assert np.allclose(alibi_slopes(1), [2.0 ** -8])
    with pytest.raises(ConfigError):
        ModelConfig(heads=0)


def test_alibi_matrix_symmetric_zero_diagonal():
    b = alibi_bias(4, 7)
    for h in range(4):
        assert np.array_equal(b[h], b[h].T)
        assert np.all(np.diag(b[h]) == 0)
        assert np.array_equal(b[h][3], alibi_bias_row(3, 7, alibi_slopes(4)[h]))


def test_config_rejects_alibi_in_formal_mode():
    with pytest.raises(ConfigError):
        ModelConfig(block_mode="formal", alibi=True)
    assert ModelConfig(block_mode="formal", alibi=False).output_softmax1 is True
    assert ModelConfig().output_softmax1 is False


def _cfg(mode, variant, d=4, h=2, alibi=None):
    if alibi is None:
        alibi = mode == "practical"
    return ModelConfig(layers=1, heads=h, model_dim=d, ffn_dim=6, vocab_size=7, max_seq_len=8,
                       variant=variant, block_mode=mode, alibi=alibi)


@pytest.mark.parametrize("mode", ["formal", "practical"])
def test_single_token_zero_scores_halves_value_path(mode):
    out = {}
    for variant in ("softmax", "softmax1"):
        cfg = _cfg(mode, variant)
        params = init_params(cfg, make_rng(0), std=0.5)
        for name in params:
            if name.endswith(("wq", "wk")):
                params[name][:] = 0.0
        z = make_rng(1).normal(size=(4, 1))
        o, probs = attention_forward(z, params, cfg)
        assert np.allclose(probs, 1.0 if variant == "softmax" else 0.5)
        out[variant] = o
    assert np.allclose(out["softmax1"], 0.5 * out["softmax"], atol=1e-15)


@pytest.mark.parametrize("mode", ["formal", "practical"])
@pytest.mark.parametrize("variant", ["softmax", "softmax1"])
def test_zero_value_path_gives_zero_output(mode, variant):
    cfg = _cfg(mode, variant)
    params = init_params(cfg, make_rng(0), std=0.5)
    for name in params:
        if name.endswith("wv"):
            params[name][:] = 0.0
    o, _ = attention_forward(make_rng(2).normal(size=(4, 3)), params, cfg)
    assert np.all(o == 0.0)


def _loop_attention(z, params, cfg):
    # scalar loops only: no matrix products
    D, N = len(z), len(z[0])
    H = cfg.heads
    out = [[0.0] * N for _ in range(D)]
    probs = []
    for h in range(H):
        if cfg.formal:
            pre = f"l0.h{h}."
            wq, wk, wv, wo = (params[pre + n] for n in ("wq", "wk", "wv", "wo"))
            rows = list(range(D))
            scale = 1.0
        else:
            wq, wk, wv, wo = (params["l0." + n] for n in ("wq", "wk", "wv", "wo"))
            dh = D // H
            rows = list(range(h * dh, (h + 1) * dh))
            scale = 1.0 / math.sqrt(dh)

        def proj(w, r, j):
            return sum(w[r][c] * z[c][j] for c in range(D))

        q = {(r, j): proj(wq, r, j) for r in rows for j in range(N)}
        k = {(r, j): proj(wk, r, j) for r in rows for j in range(N)}
        v = {(r, j): proj(wv, r, j) for r in rows for j in range(N)}
        p = [[0.0] * N for _ in range(N)]
        for j in range(N):
            s = []
            for i in range(N):
                val = sum(k[(r, i)] * q[(r, j)] for r in rows) * scale
                if cfg.alibi:
                    val -= 2.0 ** (-8.0 * (h + 1) / H) * abs(i - j)
                s.append(val)
            m = max(s)
            if cfg.variant.value == "softmax1":
                m = max(m, 0.0)
                denom = math.exp(-m) + sum(math.exp(x - m) for x in s)
            else:
                denom = sum(math.exp(x - m) for x in s)
            for i in range(N):
                p[i][j] = math.exp(s[i] - m) / denom
        probs.append(p)
        ctx = {(r, j): sum(v[(r, i)] * p[i][j] for i in range(N)) for r in rows for j in range(N)}
        for d in range(D):
            for j in range(N):
                out[d][j] += sum(wo[d][r] * ctx[(r, j)] for r in rows)
    return np.array(out), np.array(probs)


@pytest.mark.parametrize("mode", ["formal", "practical"])
@pytest.mark.parametrize("variant", ["softmax", "softmax1"])
def test_attention_matches_scalar_loop_oracle(mode, variant):
    cfg = _cfg(mode, variant, d=4, h=2)
    rng = make_rng(7)
    params = init_params(cfg, rng, std=0.7)
    z = rng.normal(size=(4, 3))
    out, probs = attention_forward(z, params, cfg)
    ref_out, ref_probs = _loop_attention(z.tolist(), {k: v.tolist() for k, v in params.items()}, cfg)
    assert np.max(np.abs(out - ref_out)) < 1e-10
    assert np.max(np.abs(probs - ref_probs)) < 1e-12


def test_attention_columns_stochastic_or_substochastic():
    rng = make_rng(9)
    for variant in ("softmax", "softmax1"):
        cfg = _cfg("practical", variant, d=8, h=2)
        params = init_params(cfg, rng, std=1.0)
        _, probs = attention_forward(rng.normal(size=(8, 6)), params, cfg)
        sums = probs.sum(axis=-2)
        if variant == "softmax":
            assert np.all(np.abs(sums - 1) <= 1e-12)
        else:
            assert np.all(sums < 1)


def test_attention_shape_mismatch():
    cfg = _cfg("formal", "softmax1")
    with pytest.raises(ShapeMismatch):
        attention_forward(np.zeros((3, 2)), init_params(cfg, make_rng(0)), cfg)


def test_zero_model_output_probabilities():
    cfg = ModelConfig(layers=1, heads=1, model_dim=4, ffn_dim=4, vocab_size=5, block_mode="formal", alibi=False,
                      variant="softmax1")
    ckpt = Checkpoint(cfg, zero_params(cfg))
    logits, trace = model_forward(np.array([0, 1, 2]), ckpt)
    assert np.all(logits == 0)
    probs = formal_apply(np.zeros((4, 3)), ckpt.params, cfg)
    assert np.allclose(probs, 1 / 6)  # V/(1+V) * 1/V
    assert [p.kind for p in trace] == ["attention_probs", "ffn_output"]


def _transcribed_formal(x, P, cfg, act):
    # one block and output layer written straight from the block definition
    z = x
    attn = sum(P[f"l0.h{h}.wo"] @ P[f"l0.h{h}.wv"] @ z @ act(z.T @ P[f"l0.h{h}.wk"].T @ P[f"l0.h{h}.wq"] @ z)
               for h in range(cfg.heads))
    z1 = P["l0.w2"] @ np.maximum(P["l0.w1"] @ attn + np.outer(P["l0.b1"], np.ones(z.shape[1])), 0) \
        + np.outer(P["l0.b2"], np.ones(z.shape[1]))
    return softmax1(P["head.w"] @ z1, axis=0)


@pytest.mark.parametrize("heads", [1, 3])
@pytest.mark.parametrize("variant", ["softmax", "softmax1"])
def test_formal_model_matches_transcription(heads, variant):
    cfg = ModelConfig(layers=1, heads=heads, model_dim=4, ffn_dim=5, vocab_size=6, block_mode="formal", alibi=False,
                      variant=variant)
    rng = make_rng(heads)
    P = init_params(cfg, rng, std=0.6)
    P["l0.b1"] = rng.normal(size=5)
    P["l0.b2"] = rng.normal(size=4)
    x = rng.uniform(-1, 1, size=(4, 5))
    act = (lambda s: softmax1(s, axis=0)) if variant == "softmax1" else (lambda s: softmax(s, axis=0))
    assert np.max(np.abs(formal_apply(x, P, cfg) - _transcribed_formal(x, P, cfg, act))) < 1e-12


def test_model_forward_records_practical_probes():
    cfg = ModelConfig(layers=2, heads=2, model_dim=8, ffn_dim=8, vocab_size=9, max_seq_len=10)
    ckpt = Checkpoint(cfg, init_params(cfg, make_rng(0)))
    logits, trace = model_forward(np.arange(9), ckpt)
    assert logits.shape == (9, 9)
    kinds = [(p.name, p.kind) for p in trace]
    assert ("l0.ffn_output", "ffn_output") in kinds
    assert ("l1.ln2_output", "layernorm_output") in kinds
    assert ("lnf_output", "layernorm_output") in kinds
    assert sum(k == "attention_probs" for _, k in kinds) == 2


def test_model_forward_input_errors():
    cfg = ModelConfig(layers=1, heads=1, model_dim=4, ffn_dim=4, vocab_size=5, max_seq_len=4)
    ckpt = Checkpoint(cfg, init_params(cfg, make_rng(0)))
    with pytest.raises(EmptyInput):
        model_forward(np.array([], dtype=int), ckpt)
    with pytest.raises(SequenceTooLong):
        model_forward(np.zeros(5, dtype=int), ckpt)
    with pytest.raises(TokenOutOfRange):
        model_forward(np.array([5]), ckpt)
