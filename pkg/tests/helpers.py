"""Independent reference implementations (oracles) used across the test suite.

Everything here is deliberately naive: explicit loops and full-shaped arrays
with explicit zeroing, sharing no code path with the library implementations.
"""

from __future__ import annotations

import math

import numpy as np

from sbp.layers import MhsaLayer, _merge_heads, _split_heads


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv2d(x, w, stride, padding):
    """Six-loop cross-correlation. x: B,H,W,C; w: k,k,C,Co."""
    b, h, wd, c = x.shape
    k = w.shape[0]
    co = w.shape[3]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((b, ho, wo, co))
    for bi in range(b):
        for oi in range(ho):
            for oj in range(wo):
                for a in range(k):
                    for bb in range(k):
                        for ci in range(c):
                            out[bi, oi, oj, :] += (
                                xp[bi, oi * stride + a, oj * stride + bb, ci]
                                * w[a, bb, ci, :])
    return out


def fd_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f at array x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def softmax_rows(m):
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mhsa_full_reference(layer: MhsaLayer, x, upstream):
    """Straightforward attention backward from first principles."""
    h, d = layer.heads, layer.dim_head
    b, n, c = x.shape
    q = _split_heads(x @ layer.w_q, h, d)
    k = _split_heads(x @ layer.w_k, h, d)
    v = _split_heads(x @ layer.w_v, h, d)
    s = softmax_rows(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d))
    a = s @ v
    da = _split_heads(upstream @ layer.w_o.T, h, d)
    dv = s.transpose(0, 1, 3, 2) @ da
    ds = da @ v.transpose(0, 1, 3, 2)
    dm = s * (ds - (ds * s).sum(axis=-1, keepdims=True))
    dq = dm @ k / math.sqrt(d)
    dk = dm.transpose(0, 1, 3, 2) @ q / math.sqrt(d)
    x2 = x.reshape(b * n, c)
    dw_o = _merge_heads(a).reshape(b * n, h * d).T @ upstream.reshape(b * n, c)
    dq_f = _merge_heads(dq).reshape(b * n, h * d)
    dk_f = _merge_heads(dk).reshape(b * n, h * d)
    dv_f = _merge_heads(dv).reshape(b * n, h * d)
    dx = (dq_f @ layer.w_q.T + dk_f @ layer.w_k.T + dv_f @ layer.w_v.T).reshape(b, n, c)
    return {"dw_q": x2.T @ dq_f, "dw_k": x2.T @ dk_f, "dw_v": x2.T @ dv_f,
            "dw_o": dw_o, "dx": dx}


def mhsa_sbp_reference(layer: MhsaLayer, x, upstream, drop, mode, head_drop=()):
    """Masked attention backward by explicit zeroing of full-shaped tensors.

    query_only: zero dM rows at dropped queries after the softmax Jacobian.
    qkv: zero upstream dA rows, dV rows, and dM rows AND columns at dropped
         tokens.
    head: zero dM and dV entirely for dropped heads; dW_O stays exact.
    """
    h, d = layer.heads, layer.dim_head
    b, n, c = x.shape
    drop = np.asarray(drop, dtype=np.int64)
    q = _split_heads(x @ layer.w_q, h, d)
    k = _split_heads(x @ layer.w_k, h, d)
    v = _split_heads(x @ layer.w_v, h, d)
    s = softmax_rows(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d))
    a = s @ v

    up = np.array(upstream)
    if mode == "qkv":
        up[:, drop, :] = 0.0
    da = _split_heads(up @ layer.w_o.T, h, d)
    x2 = x.reshape(b * n, c)
    dw_o = _merge_heads(a).reshape(b * n, h * d).T @ up.reshape(b * n, c)

    dv = s.transpose(0, 1, 3, 2) @ da
    ds = da @ v.transpose(0, 1, 3, 2)
    dm = s * (ds - (ds * s).sum(axis=-1, keepdims=True))
    if mode == "query_only":
        dm[:, :, drop, :] = 0.0
    elif mode == "qkv":
        dm[:, :, drop, :] = 0.0
        dm[:, :, :, drop] = 0.0
        dv[:, :, drop, :] = 0.0
    elif mode == "head":
        hd_drop = np.asarray(head_drop, dtype=np.int64)
        dm[:, hd_drop, :, :] = 0.0
        dv[:, hd_drop, :, :] = 0.0
    else:
        raise ValueError(mode)
    dq = dm @ k / math.sqrt(d)
    dk = dm.transpose(0, 1, 3, 2) @ q / math.sqrt(d)
    dq_f = _merge_heads(dq).reshape(b * n, h * d)
    dk_f = _merge_heads(dk).reshape(b * n, h * d)
    dv_f = _merge_heads(dv).reshape(b * n, h * d)
    dx = (dq_f @ layer.w_q.T + dk_f @ layer.w_k.T + dv_f @ layer.w_v.T).reshape(b, n, c)
    return {"dw_q": x2.T @ dq_f, "dw_k": x2.T @ dk_f, "dw_v": x2.T @ dv_f,
            "dw_o": dw_o, "dx": dx}


def random_mask(rng, shape, allow_extremes=False):
    from sbp.masks import IndexMask

    total = int(np.prod(shape))
    lo, hi = (0, total) if allow_extremes else (1, max(1, total - 1))
    m = int(rng.integers(lo, hi + 1))
    keep = rng.choice(total, size=m, replace=False)
    return IndexMask.from_keep(shape, keep)
