"""Hand-written reverse pass for ``attention.forward_tokens``.

Mirrors the forward code line by line; the cache produced with
``keep_cache=True`` holds every intermediate needed here. Quantisation hooks
are not differentiated, so gradients are only meaningful for forwards run
without hooks.
"""
from __future__ import annotations

import math

import numpy as np

from .attention import ModelConfig, activation_backward


def _ln_backward(dy, g, saved):
    xhat, inv = saved
    dg = np.sum(dy * xhat, axis=(0, 2))
    db = np.sum(dy, axis=(0, 2))
    dxhat = dy * g[:, None]
    dx = inv * (dxhat - dxhat.mean(axis=-2, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-2, keepdims=True))
    return dx, dg, db


def _outer_sum(d, x):
    """sum_b d[b] @ x[b].T"""
    return np.tensordot(d, x, axes=([0, 2], [0, 2]))


def _ffn_backward(df, params, cache, l, grads):
    p = f"l{l}."
    r, u, x = cache[p + "r"], cache[p + "u"], cache[p + "ffn_x"]
    grads[p + "w2"] = _outer_sum(df, r)
    grads[p + "b2"] = df.sum(axis=(0, 2))
    du = (cache[p + "w2"].T @ df) * (u > 0)
    grads[p + "w1"] = _outer_sum(du, x)
    grads[p + "b1"] = du.sum(axis=(0, 2))
    return cache[p + "w1"].T @ du


def _scores_backward(cache, p, dctx, cfg, scale):
    q, k, v, prob = cache[p + "q"], cache[p + "k"], cache[p + "v"], cache[p + "prob"]
    dv = dctx @ np.swapaxes(prob, -1, -2)
    dprob = np.swapaxes(v, -1, -2) @ dctx
    ds = activation_backward(prob, dprob, axis=-2) * scale
    dq = k @ ds
    dk = q @ np.swapaxes(ds, -1, -2)
    return dq, dk, dv


def _practical_attention_backward(dout, params, cache, cfg, l, grads):
    p = f"l{l}."
    B, D, N = dout.shape
    H, dh = cfg.heads, cfg.head_dim
    y = cache[p + "y"]
    grads[p + "wo"] = _outer_sum(dout, cache[p + "ctx"])
    dctx = (params[p + "wo"].T @ dout).reshape(B, H, dh, N)
    dq, dk, dv = _scores_backward(cache, p, dctx, cfg, 1.0 / math.sqrt(dh))
    dy = np.zeros_like(y)
    for name, d in (("wq", dq), ("wk", dk), ("wv", dv)):
        d = d.reshape(B, D, N)
        grads[p + name] = _outer_sum(d, y)
        dy += params[p + name].T @ d
    return dy


def _formal_attention_backward(dout, params, cache, cfg, l, grads):
    p = f"l{l}."
    y = cache[p + "y"]
    ctx = cache[p + "ctx"]
    wq, wk, wv, wo = cache[p + "wq"], cache[p + "wk"], cache[p + "wv"], cache[p + "wo"]
    dctx = np.swapaxes(wo, -1, -2)[None] @ dout[:, None]
    dq, dk, dv = _scores_backward(cache, p, dctx, cfg, 1.0)
    dy = np.zeros_like(y)
    for h in range(cfg.heads):
        grads[f"{p}h{h}.wo"] = _outer_sum(dout, ctx[:, h])
        grads[f"{p}h{h}.wq"] = _outer_sum(dq[:, h], y)
        grads[f"{p}h{h}.wk"] = _outer_sum(dk[:, h], y)
        grads[f"{p}h{h}.wv"] = _outer_sum(dv[:, h], y)
        dy += wq[h].T @ dq[:, h] + wk[h].T @ dk[:, h] + wv[h].T @ dv[:, h]
    return dy


def backward(params: dict, cfg: ModelConfig, cache: dict, dlogits: np.ndarray | None = None,
             dhidden: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. logits and/or hidden."""
    grads: dict[str, np.ndarray] = {}
    hx = cache["head_x"]
    dz = np.zeros_like(hx) if dhidden is None else np.array(dhidden, dtype=np.float64)
    if dlogits is not None:
        grads["head.w"] = _outer_sum(dlogits, hx)
        if not cfg.formal:
            grads["head.b"] = dlogits.sum(axis=(0, 2))
        dz = dz + cache["head_w"].T @ dlogits
    else:
        grads["head.w"] = np.zeros_like(params["head.w"])
        if not cfg.formal:
            grads["head.b"] = np.zeros_like(params["head.b"])

    if not cfg.formal:
        dz, grads["lnf.g"], grads["lnf.b"] = _ln_backward(dz, params["lnf.g"], cache["lnf"])

    for l in reversed(range(cfg.layers)):
        p = f"l{l}."
        if cfg.formal:
            dattn = _ffn_backward(dz, params, cache, l, grads)
            dz = _formal_attention_backward(dattn, params, cache, cfg, l, grads)
        else:
            dy2 = _ffn_backward(dz, params, cache, l, grads)
            dz1_ln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_backward(dy2, params[p + "ln2.g"], cache[p + "ln2"])
            dz1 = dz + dz1_ln
            dy1 = _practical_attention_backward(dz1, params, cache, cfg, l, grads)
            dz_ln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_backward(dy1, params[p + "ln1.g"], cache[p + "ln1"])
            dz = dz1 + dz_ln

    tokens = cache["tokens"]
    dembed = np.zeros_like(params["embed"])
    cols = np.transpose(dz, (1, 0, 2)).reshape(dz.shape[1], -1)
    np.add.at(dembed.T, tokens.reshape(-1), cols.T)
    grads["embed"] = dembed
    return grads
