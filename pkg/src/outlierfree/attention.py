"""Softmax / Softmax1 activations, ALiBi, and the two transformer block flavours.

Activations use column convention throughout: a sequence is a ``D x N`` matrix
whose columns are tokens, and a batch is ``(B, D, N)``. Attention scores are
``S[i, j] = k_i . q_j`` so the probability matrix is normalised over keys
(axis -2): every column belongs to one query.

Two block modes exist:

* ``formal``: no residual, no normalisation, full ``D x D`` projections per
  head, unscaled scores, ReLU feed-forward. Block output is
  ``W2 relu(W1 Attn(Z) + b1) + b2`` and the model output is
  ``act(W_o Z_L)``.
* ``practical``: pre-LayerNorm residual block with ``D/H`` head slices,
  ``1/sqrt(d_head)`` score scaling and optional ALiBi biases.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .errors import (
    ConfigError,
    EmptyInput,
    IndexOutOfRange,
    SequenceTooLong,
    ShapeMismatch,
    TokenOutOfRange,
)
from .trace import ActivationTrace

LN_EPS = 1e-5
# additive score for padded keys; finite so quantisation ranges stay sane
PAD_BIAS = -1e9


class AttentionVariant(str, Enum):
    SOFTMAX = "softmax"
    SOFTMAX1 = "softmax1"


class BlockMode(str, Enum):
    FORMAL = "formal"
    PRACTICAL = "practical"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 32
    ffn_dim: int = 64
    vocab_size: int = 64
    max_seq_len: int = 64
    variant: AttentionVariant = AttentionVariant.SOFTMAX
    block_mode: BlockMode = BlockMode.PRACTICAL
    alibi: bool = True
    output_softmax1: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", AttentionVariant(self.variant))
        object.__setattr__(self, "block_mode", BlockMode(self.block_mode))
        for name in ("layers", "heads", "model_dim", "ffn_dim", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.block_mode is BlockMode.PRACTICAL and self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads in practical mode")
        if self.alibi and self.block_mode is BlockMode.FORMAL:
            raise ConfigError("alibi is only available in practical mode")
        if self.output_softmax1 is None:
            object.__setattr__(self, "output_softmax1", self.block_mode is BlockMode.FORMAL)

    @property
    def head_dim(self) -> int:
        if self.block_mode is BlockMode.FORMAL:
            return self.model_dim
        return self.model_dim // self.heads

    @property
    def formal(self) -> bool:
        return self.block_mode is BlockMode.FORMAL

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["block_mode"] = self.block_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- activations --------------------------------------------------------------


def softmax(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - np.max(s, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax1(scores, axis: int = -1) -> np.ndarray:
    """``exp(S) / (1 + sum exp(S))``.

    The shift is ``max(0, max S)`` so the implicit zero logit is kept.
    """
    s = np.asarray(scores, dtype=np.float64)
    m = np.maximum(np.max(s, axis=axis, keepdims=True), 0.0)
    e = np.exp(s - m)
    return e / (np.exp(-m) + np.sum(e, axis=axis, keepdims=True))


def activation(variant: AttentionVariant, scores, axis: int = -1) -> np.ndarray:
    if AttentionVariant(variant) is AttentionVariant.SOFTMAX1:
        return softmax1(scores, axis)
    return softmax(scores, axis)


def activation_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product; identical for softmax and softmax1."""
    return p * (dp - np.sum(p * dp, axis=axis, keepdims=True))


# -- ALiBi --------------------------------------------------------------------


def alibi_bias_row(i: int, length: int, slope: float) -> np.ndarray:
    if not 0 <= i < length:
        raise IndexOutOfRange(f"token index {i} outside sequence of length {length}")
    if slope < 0:
        raise ValueError("ALiBi slope must be non-negative")
    return -slope * np.abs(np.arange(length) - i).astype(np.float64)


def alibi_slopes(heads: int) -> np.ndarray:
    if heads < 1:
        raise ConfigError("need at least one head")
    h = np.arange(1, heads + 1, dtype=np.float64)
    return 2.0 ** (-8.0 * h / heads)


def alibi_bias(heads: int, length: int) -> np.ndarray:
    """``(H, N, N)`` bias, entry ``[h, i, j] = -m_h |i - j|``."""
    dist = np.abs(np.arange(length)[:, None] - np.arange(length)[None, :]).astype(np.float64)
    return -alibi_slopes(heads)[:, None, None] * dist[None]


# -- parameters ---------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for a configuration."""
    D, F, V = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (D, V)}
    for l in range(cfg.layers):
        p = f"l{l}."
        if cfg.formal:
            for h in range(cfg.heads):
                for w in ("wq", "wk", "wv", "wo"):
                    shapes[f"{p}h{h}.{w}"] = (D, D)
        else:
            shapes[p + "ln1.g"] = (D,)
            shapes[p + "ln1.b"] = (D,)
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + w] = (D, D)
            shapes[p + "ln2.g"] = (D,)
            shapes[p + "ln2.b"] = (D,)
        shapes[p + "w1"] = (F, D)
        shapes[p + "b1"] = (F,)
        shapes[p + "w2"] = (D, F)
        shapes[p + "b2"] = (D,)
    if not cfg.formal:
        shapes["lnf.g"] = (D,)
        shapes["lnf.b"] = (D,)
    shapes["head.w"] = (V, D)
    if not cfg.formal:
        shapes["head.b"] = (V,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, np.ndarray]:
    """Gaussian matrices, zero biases, unit LayerNorm gains."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, std, size=shape)
    return params


def zero_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def check_params(params: dict, cfg: ModelConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise ShapeMismatch(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


# -- hooks --------------------------------------------------------------------


class Hooks:
    """Interception points used by quantisation and calibration.

    ``weight`` sees every linear-layer weight before use, ``act`` sees every
    linear-layer input and the attention-score matrix. Site names end in
    ``qkv_in``, ``scores``, ``o_in``, ``ffn_in``, ``ffn_hidden`` or are
    ``head_in``. Activations arrive as ``(B, C, N)`` (or ``(B, H, N, N)`` for
    scores) with channels on axis -2.
    """

    def weight(self, name: str, w: np.ndarray) -> np.ndarray:
        return w

    def act(self, site: str, x: np.ndarray) -> np.ndarray:
        return x


IDENTITY_HOOKS = Hooks()


def weight_consumers(cfg: ModelConfig) -> dict[str, str]:
    """Map each linear weight to the activation site it consumes."""
    out = {}
    for l in range(cfg.layers):
        p = f"l{l}."
        if cfg.formal:
            for h in range(cfg.heads):
                for w in ("wq", "wk", "wv"):
                    out[f"{p}h{h}.{w}"] = p + "qkv_in"
                out[f"{p}h{h}.wo"] = f"{p}h{h}.o_in"
        else:
            for w in ("wq", "wk", "wv"):
                out[p + w] = p + "qkv_in"
            out[p + "wo"] = p + "o_in"
        out[p + "w1"] = p + "ffn_in"
        out[p + "w2"] = p + "ffn_hidden"
    out["head.w"] = "head_in"
    return out


# -- forward ------------------------------------------------------------------


@dataclass
class ForwardResult:
    hidden: np.ndarray  # (B, D, N) final representation fed to the head
    logits: np.ndarray  # (B, V, N)
    trace: ActivationTrace | None
    cache: dict | None


def output_probs(logits: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return softmax1(logits, axis=-2) if cfg.output_softmax1 else softmax(logits, axis=-2)


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-2, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g[:, None] * xhat + b[:, None], (xhat, inv)


def _practical_attention(z, params, cfg, l, hooks, cache, trace, key_bias=None):
    p = f"l{l}."
    B, D, N = z.shape
    H, dh = cfg.heads, cfg.head_dim
    y = hooks.act(p + "qkv_in", z)
    wq = hooks.weight(p + "wq", params[p + "wq"])
    wk = hooks.weight(p + "wk", params[p + "wk"])
    wv = hooks.weight(p + "wv", params[p + "wv"])
    wo = hooks.weight(p + "wo", params[p + "wo"])
    q = (wq @ y).reshape(B, H, dh, N)
    k = (wk @ y).reshape(B, H, dh, N)
    v = (wv @ y).reshape(B, H, dh, N)
    s = hooks.act(p + "scores", np.swapaxes(k, -1, -2) @ q / math.sqrt(dh))
    if cfg.alibi:
        s = s + alibi_bias(H, N)[None]
    if key_bias is not None:
        s = s + key_bias
    prob = activation(cfg.variant, s, axis=-2)
    ctx = (v @ prob).reshape(B, D, N)
    ctx_q = hooks.act(p + "o_in", ctx)
    out = wo @ ctx_q
    if trace is not None:
        trace.add(p + "attention_probs", "attention_probs", l, prob)
    if cache is not None:
        cache.update({p + "y": y, p + "q": q, p + "k": k, p + "v": v, p + "prob": prob, p + "ctx": ctx_q})
    return out


def _formal_attention(z, params, cfg, l, hooks, cache, trace, key_bias=None):
    p = f"l{l}."
    B, D, N = z.shape
    H = cfg.heads
    y = hooks.act(p + "qkv_in", z)
    wq = np.stack([hooks.weight(f"{p}h{h}.wq", params[f"{p}h{h}.wq"]) for h in range(H)])
    wk = np.stack([hooks.weight(f"{p}h{h}.wk", params[f"{p}h{h}.wk"]) for h in range(H)])
    wv = np.stack([hooks.weight(f"{p}h{h}.wv", params[f"{p}h{h}.wv"]) for h in range(H)])
    wo = np.stack([hooks.weight(f"{p}h{h}.wo", params[f"{p}h{h}.wo"]) for h in range(H)])
    yb = y[:, None]
    q = wq[None] @ yb  # (B, H, D, N)
    k = wk[None] @ yb
    v = wv[None] @ yb
    s = hooks.act(p + "scores", np.swapaxes(k, -1, -2) @ q)
    if key_bias is not None:
        s = s + key_bias
    prob = activation(cfg.variant, s, axis=-2)
    ctx = v @ prob
    ctx_q = np.stack([hooks.act(f"{p}h{h}.o_in", ctx[:, h]) for h in range(H)], axis=1)
    out = np.sum(wo[None] @ ctx_q, axis=1)
    if trace is not None:
        trace.add(p + "attention_probs", "attention_probs", l, prob)
    if cache is not None:
        cache.update({p + "y": y, p + "q": q, p + "k": k, p + "v": v, p + "prob": prob, p + "ctx": ctx_q,
                      p + "wq": wq, p + "wk": wk, p + "wv": wv, p + "wo": wo})
    return out


def _ffn(x, params, l, hooks, cache):
    p = f"l{l}."
    xin = hooks.act(p + "ffn_in", x)
    w1 = hooks.weight(p + "w1", params[p + "w1"])
    w2 = hooks.weight(p + "w2", params[p + "w2"])
    u = w1 @ xin + params[p + "b1"][:, None]
    r = hooks.act(p + "ffn_hidden", np.maximum(u, 0.0))
    f = w2 @ r + params[p + "b2"][:, None]
    if cache is not None:
        cache.update({p + "ffn_x": xin, p + "u": u, p + "r": r, p + "w1": w1, p + "w2": w2})
    return f


def forward_hidden(x: np.ndarray, params: dict, cfg: ModelConfig, hooks: Hooks | None = None,
                   record: bool = False, keep_cache: bool = False, valid: np.ndarray | None = None):
    """Run the transformer blocks on embedded input ``x`` of shape (B, D, N).

    ``valid`` (B, N) marks real tokens; padded positions are hidden from every
    query as keys.
    """
    hooks = hooks or IDENTITY_HOOKS
    key_bias = None
    if valid is not None and not np.all(valid):
        key_bias = np.where(valid, 0.0, PAD_BIAS)[:, None, :, None]
    trace = ActivationTrace() if record else None
    cache = {} if keep_cache else None
    z = x
    for l in range(cfg.layers):
        p = f"l{l}."
        if cfg.formal:
            attn = _formal_attention(z, params, cfg, l, hooks, cache, trace, key_bias)
            z = _ffn(attn, params, l, hooks, cache)
            if trace is not None:
                trace.add(p + "ffn_output", "ffn_output", l, z)
        else:
            y1, ln1 = layer_norm(z, params[p + "ln1.g"], params[p + "ln1.b"])
            attn = _practical_attention(y1, params, cfg, l, hooks, cache, trace, key_bias)
            z1 = z + attn
            y2, ln2 = layer_norm(z1, params[p + "ln2.g"], params[p + "ln2.b"])
            f = _ffn(y2, params, l, hooks, cache)
            if cache is not None:
                cache[p + "ln1"] = ln1
                cache[p + "ln2"] = ln2
            if trace is not None:
                trace.add(p + "ln1_output", "layernorm_output", l, y1)
                trace.add(p + "ln2_output", "layernorm_output", l, y2)
                trace.add(p + "ffn_output", "ffn_output", l, f)
            z = z1 + f
    if not cfg.formal:
        z, lnf = layer_norm(z, params["lnf.g"], params["lnf.b"])
        if cache is not None:
            cache["lnf"] = lnf
        if trace is not None:
            trace.add("lnf_output", "layernorm_output", cfg.layers, z)
    return z, trace, cache


def head_logits(hidden: np.ndarray, params: dict, cfg: ModelConfig, hooks: Hooks | None = None,
                cache: dict | None = None) -> np.ndarray:
    hooks = hooks or IDENTITY_HOOKS
    h = hooks.act("head_in", hidden)
    w = hooks.weight("head.w", params["head.w"])
    logits = w @ h
    if not cfg.formal:
        logits = logits + params["head.b"][:, None]
    if cache is not None:
        cache["head_x"] = h
        cache["head_w"] = w
    return logits


def embed(tokens: np.ndarray, params: dict) -> np.ndarray:
    """(B, N) ids -> (B, D, N) embedded columns."""
    return np.transpose(params["embed"][:, tokens], (1, 0, 2))


def validate_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim == 1:
        t = t[None]
    if t.ndim != 2:
        raise ShapeMismatch("tokens must be a sequence or a (batch, length) array")
    if t.shape[1] == 0:
        raise EmptyInput("empty token sequence")
    if t.shape[1] > cfg.max_seq_len:
        raise SequenceTooLong(f"length {t.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if t.min() < 0 or t.max() >= cfg.vocab_size:
        raise TokenOutOfRange("token id outside vocabulary")
    return t


def forward_tokens(tokens, params: dict, cfg: ModelConfig, hooks: Hooks | None = None,
                   record: bool = False, keep_cache: bool = False,
                   valid: np.ndarray | None = None) -> ForwardResult:
    t = validate_tokens(tokens, cfg)
    x = embed(t, params)
    hidden, trace, cache = forward_hidden(x, params, cfg, hooks, record, keep_cache, valid)
    logits = head_logits(hidden, params, cfg, hooks, cache)
    if cache is not None:
        cache["tokens"] = t
        cache["x"] = x
    return ForwardResult(hidden, logits, trace, cache)


def model_forward(tokens, ckpt, hooks: Hooks | None = None):
    """Single-sequence forward: ``(logits (V, N), trace)``."""
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1:
        raise ShapeMismatch("model_forward takes a single token sequence")
    res = forward_tokens(t, ckpt.params, ckpt.config, hooks, record=True)
    return res.logits[0], res.trace


def attention_forward(z, params: dict, cfg: ModelConfig, layer: int = 0, hooks: Hooks | None = None):
    """One attention sub-layer on ``z`` (D x N). Returns ``(out, probs)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != cfg.model_dim:
        raise ShapeMismatch(f"expected ({cfg.model_dim}, N), got {z.shape}")
    trace = ActivationTrace()
    fn = _formal_attention if cfg.formal else _practical_attention
    out = fn(z[None], params, cfg, layer, hooks or IDENTITY_HOOKS, None, trace)
    return out[0], trace.probes[0].tensor[0]


def formal_apply(x, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Model output on raw input ``x`` (D x N) without the embedding lookup."""
    x = np.asarray(x, dtype=np.float64)
    hidden, _, _ = forward_hidden(x[None], params, cfg)
    return output_probs(head_logits(hidden, params, cfg), cfg)[0]
