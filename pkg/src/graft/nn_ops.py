"""Dense network primitives with paired VJPs.

Conventions: linear layers store W with shape (fan_in, fan_out) and compute
x @ W + b; batch axes lead. Every forward returns (out, tape) so the rollout
backward pass can run without a framework.
"""

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def linear(x, w, b):
    return x @ w + b


def linear_vjp(x, w, d_out):
    """Returns (d_x, d_w, d_b); batch axes of x are summed into d_w/d_b."""
    d_x = d_out @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = d_out.reshape(-1, d_out.shape[-1])
    return d_x, x2.T @ g2, g2.sum(axis=0)


def mlp2(x, w0, b0, w1, b1):
    """Two-layer MLP with GELU: x -> hidden -> out."""
    h = x @ w0 + b0
    a = gelu(h)
    y = a @ w1 + b1
    return y, {"x": x, "h": h, "a": a}


def mlp2_vjp(tape, w0, w1, d_y):
    d_a, d_w1, d_b1 = linear_vjp(tape["a"], w1, d_y)
    d_h = d_a * gelu_grad(tape["h"])
    d_x, d_w0, d_b0 = linear_vjp(tape["x"], w0, d_h)
    return d_x, (d_w0, d_b0, d_w1, d_b1)


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv_std
    return gain * xhat + bias, {"xhat": xhat, "inv_std": inv_std}


def layer_norm_vjp(tape, gain, d_out):
    xhat = tape["xhat"]
    d_xhat = d_out * gain
    mean_d = d_xhat.mean(axis=-1, keepdims=True)
    mean_dx = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    d_x = tape["inv_std"] * (d_xhat - mean_d - xhat * mean_dx)
    flat_out = d_out.reshape(-1, d_out.shape[-1])
    flat_xhat = xhat.reshape(-1, xhat.shape[-1])
    d_gain = (flat_out * flat_xhat).sum(axis=0)
    d_bias = flat_out.sum(axis=0)
    return d_x, d_gain, d_bias


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(probs, d_probs):
    inner = (d_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def _split_heads(x, n_heads):
    """(..., T, D) -> (..., H, T, dh)"""
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, n_heads, d // n_heads)
    return np.moveaxis(x, -2, -3)


def _merge_heads(x):
    """(..., H, T, dh) -> (..., T, D)"""
    x = np.moveaxis(x, -3, -2)
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


def attention(query_src, kv_src, p, n_heads):
    """Multi-head attention; p maps names wq..bo to weight arrays.

    query_src: (..., Tq, D), kv_src: (..., Tk, D). Returns (out, tape).
    """
    q = _split_heads(query_src @ p["wq"] + p["bq"], n_heads)
    k = _split_heads(kv_src @ p["wk"] + p["bk"], n_heads)
    v = _split_heads(kv_src @ p["wv"] + p["bv"], n_heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.einsum("...qd,...kd->...qk", q, k) * scale
    probs = softmax(scores)
    ctx = np.einsum("...qk,...kd->...qd", probs, v)
    merged = _merge_heads(ctx)
    out = merged @ p["wo"] + p["bo"]
    tape = {
        "query_src": query_src,
        "kv_src": kv_src,
        "q": q,
        "k": k,
        "v": v,
        "probs": probs,
        "merged": merged,
        "scale": scale,
    }
    return out, tape


def attention_vjp(tape, p, n_heads, d_out):
    """Returns (d_query_src, d_kv_src, d_params dict)."""
    d_merged, d_wo, d_bo = linear_vjp(tape["merged"], p["wo"], d_out)
    d_ctx = _split_heads(d_merged, n_heads)
    probs, q, k, v = tape["probs"], tape["q"], tape["k"], tape["v"]
    d_probs = np.einsum("...qd,...kd->...qk", d_ctx, v)
    d_v = np.einsum("...qk,...qd->...kd", probs, d_ctx)
    d_scores = softmax_vjp(probs, d_probs) * tape["scale"]
    d_q = np.einsum("...qk,...kd->...qd", d_scores, k)
    d_k = np.einsum("...qk,...qd->...kd", d_scores, q)
    d_query_src, d_wq, d_bq = linear_vjp(tape["query_src"], p["wq"], _merge_heads(d_q))
    d_kv_k, d_wk, d_bk = linear_vjp(tape["kv_src"], p["wk"], _merge_heads(d_k))
    d_kv_v, d_wv, d_bv = linear_vjp(tape["kv_src"], p["wv"], _merge_heads(d_v))
    d_params = {
        "wq": d_wq,
        "bq": d_bq,
        "wk": d_wk,
        "bk": d_bk,
        "wv": d_wv,
        "bv": d_bv,
        "wo": d_wo,
        "bo": d_bo,
    }
    return d_query_src, d_kv_k + d_kv_v, d_params
