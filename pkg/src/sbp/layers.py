"""Forward and backward rules for every operator family, in full and masked form.

Each masked (SBP) backward is elementwise-equivalent to running the full
backward after zeroing the upstream activation gradient at dropped indices;
the masked implementations additionally honor the memory contract where one
is declared: they read only kept-index activations.

Token masks address the flat spatial/token grid of a single sample; batched
inputs share one mask across the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ContractViolationError, DimensionError
from .masks import IndexMask
from .tensor_core import Array, as_tensor, gather_rows, matmul

LN_EPS = 1e-6
DROP_MODES = ("query_only", "qkv", "head")


def expand_keep_rows(keep: np.ndarray, batch: int, n: int) -> np.ndarray:
    """Token keep-indices -> row indices of the (batch * n, C) flattening."""
    keep = np.asarray(keep, dtype=np.int64)
    return (np.arange(batch, dtype=np.int64)[:, None] * n + keep[None, :]).reshape(-1)


def zero_dropped_rows(upstream: Array, mask: IndexMask) -> Array:
    """Upstream with rows at dropped indices set to zero (the oracle's first step)."""
    out = np.array(upstream, dtype=np.float64)
    out[mask.drop_array()] = 0.0
    return out


# ---------------------------------------------------------------------------
# Linear / PW-Conv
# ---------------------------------------------------------------------------


@dataclass
class LinearLayer:
    weight: Array  # C_in x C_out
    bias: Array | None = None

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.weight.ndim != 2:
            raise DimensionError(f"linear weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
            if self.bias.shape != (self.weight.shape[1],):
                raise DimensionError("bias length must equal C_out")


def linear_forward(layer: LinearLayer, x: Array) -> Array:
    out = matmul(x, layer.weight)
    if layer.bias is not None:
        out = out + layer.bias
    return out


def linear_backward_full(layer: LinearLayer, x: Array, upstream: Array):
    """Returns (dW, db, dX); db is None when the layer has no bias."""
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    if x.shape[0] != upstream.shape[0] or upstream.shape[1] != layer.weight.shape[1]:
        raise DimensionError(f"backward shapes do not conform: x {x.shape}, up {upstream.shape}")
    dw = matmul(x.T, upstream)
    db = upstream.sum(axis=0) if layer.bias is not None else None
    dx = matmul(upstream, layer.weight.T)
    return dw, db, dx


def linear_backward_sbp(layer: LinearLayer, x: Array, upstream: Array, mask: IndexMask):
    """Masked backward: reads only kept rows of x and upstream; dropped dX rows are 0."""
    x = np.asarray(x)
    if mask.total != x.shape[0]:
        raise DimensionError(f"mask domain {mask.total} != row count {x.shape[0]}")
    if mask.is_full_keep:
        return linear_backward_full(layer, x, upstream)
    keep = mask.keep_array()
    x_k = gather_rows(x, keep)
    up_k = gather_rows(np.asarray(upstream), keep)
    if up_k.shape[1] != layer.weight.shape[1]:
        raise DimensionError("upstream width must equal C_out")
    dw = matmul(x_k.T, up_k)
    db = up_k.sum(axis=0) if layer.bias is not None else None
    dx = np.zeros((x.shape[0], layer.weight.shape[0]))
    if keep.size:
        dx[keep] = matmul(up_k, layer.weight.T)
    return dw, db, dx


# ---------------------------------------------------------------------------
# General 2-D convolution (cross-correlation, zero padding)
# ---------------------------------------------------------------------------


@dataclass
class Conv2dLayer:
    weight: Array  # k x k x C_in x C_out
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.weight.ndim != 4 or self.weight.shape[0] != self.weight.shape[1]:
            raise DimensionError(f"conv weight must be k x k x C_in x C_out, got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigurationError("stride must be >= 1 and padding >= 0")

    @property
    def kernel(self) -> int:
        return int(self.weight.shape[0])


def conv2d_output_grid(layer: Conv2dLayer, h: int, w: int) -> tuple[int, int]:
    k, s, p = layer.kernel, layer.stride, layer.padding
    if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
        raise ConfigurationError(
            f"conv output size is not integral for input {h}x{w}, k={k}, s={s}, pad={p}")
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _im2col(layer: Conv2dLayer, x: Array):
    b, h, w, c = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    ho, wo = conv2d_output_grid(layer, h, w)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, ho, wo, k, k, c))
    for a in range(k):
        for bb in range(k):
            cols[:, :, :, a, bb, :] = xp[:, a:a + s * ho:s, bb:bb + s * wo:s, :]
    return cols, (ho, wo)


def conv2d_forward(layer: Conv2dLayer, x: Array) -> Array:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[3] != layer.weight.shape[2]:
        raise DimensionError(f"conv input must be B x H x W x {layer.weight.shape[2]}")
    b = x.shape[0]
    cols, (ho, wo) = _im2col(layer, x)
    k, c, co = layer.kernel, layer.weight.shape[2], layer.weight.shape[3]
    out = matmul(cols.reshape(b * ho * wo, k * k * c), layer.weight.reshape(k * k * c, co))
    return out.reshape(b, ho, wo, co)


def conv2d_backward_full(layer: Conv2dLayer, x: Array, upstream: Array):
    """Returns (dW, dX). dX is the full correlation of the (stride-interleaved,
    zero-padded) upstream with the 180-degree rotated kernel, realized through
    the column decomposition used by the forward pass."""
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    b, h, w, c = x.shape
    k, s, p, co = layer.kernel, layer.stride, layer.padding, layer.weight.shape[3]
    cols, (ho, wo) = _im2col(layer, x)
    if upstream.shape != (b, ho, wo, co):
        raise DimensionError(f"upstream shape {upstream.shape} != {(b, ho, wo, co)}")
    up_flat = upstream.reshape(b * ho * wo, co)
    cols_flat = cols.reshape(b * ho * wo, k * k * c)
    dw = matmul(cols_flat.T, up_flat).reshape(layer.weight.shape)
    dcols = matmul(up_flat, layer.weight.reshape(k * k * c, co).T)
    dcols = dcols.reshape(b, ho, wo, k, k, c)
    dxp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    for a in range(k):
        for bb in range(k):
            dxp[:, a:a + s * ho:s, bb:bb + s * wo:s, :] += dcols[:, :, :, a, bb, :]
    dx = dxp[:, p:p + h, p:p + w, :]
    return dw, dx


def conv2d_backward_sbp(layer: Conv2dLayer, x: Array, upstream: Array, mask: IndexMask):
    """Full backward with upstream zeroed at dropped output positions.

    For k > stride a dropped position can still receive nonzero dX through its
    neighbors' receptive fields; for stride >= k every input position feeding
    only dropped outputs gets exactly 0 and the rest are exact.
    """
    upstream = as_tensor(upstream)
    b, ho, wo, co = upstream.shape
    if mask.domain_shape != (ho, wo):
        raise DimensionError(f"mask grid {mask.domain_shape} != output grid {(ho, wo)}")
    if mask.is_full_keep:
        return conv2d_backward_full(layer, x, upstream)
    up = upstream.reshape(b, ho * wo, co).copy()
    up[:, mask.drop_array(), :] = 0.0
    return conv2d_backward_full(layer, x, up.reshape(b, ho, wo, co))


# ---------------------------------------------------------------------------
# Multi-head self-attention
# ---------------------------------------------------------------------------


@dataclass
class MhsaLayer:
    heads: int
    dim_head: int
    w_q: Array  # C x (h * d)
    w_k: Array
    w_v: Array
    w_o: Array  # (h * d) x C
    drop_mode: str = "qkv"

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            setattr(self, name, as_tensor(getattr(self, name)))
        hd = self.heads * self.dim_head
        c = self.w_q.shape[0]
        if self.w_q.shape != (c, hd) or self.w_k.shape != (c, hd) or self.w_v.shape != (c, hd):
            raise DimensionError("w_q/w_k/w_v must all be C x (heads * dim_head)")
        if self.w_o.shape != (hd, c):
            raise DimensionError("w_o must be (heads * dim_head) x C")
        if self.drop_mode not in DROP_MODES:
            raise ConfigurationError(f"unknown drop_mode {self.drop_mode!r}")


@dataclass
class MhsaCache:
    x: Array        # B x N x C
    q: Array        # B x h x N x d
    k: Array
    v: Array
    m: Array        # B x h x N x N (pre-softmax logits)
    s: Array        # B x h x N x N (attention weights)
    a: Array        # B x h x N x d (per-head attention output)

    @property
    def shape(self):
        return self.x.shape

    def element_count(self) -> int:
        return sum(t.size for t in (self.x, self.q, self.k, self.v, self.m, self.s, self.a))


def _split_heads(t: Array, heads: int, dim_head: int) -> Array:
    b, n, _ = t.shape
    return t.reshape(b, n, heads, dim_head).transpose(0, 2, 1, 3)


def _merge_heads(t: Array) -> Array:
    b, h, n, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def mhsa_forward(layer: MhsaLayer, x: Array):
    """Scaled dot-product attention over all heads; returns (out, cache)."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] != layer.w_q.shape[0]:
        raise DimensionError(f"mhsa input must be B x N x {layer.w_q.shape[0]}")
    h, d = layer.heads, layer.dim_head
    q = _split_heads(x @ layer.w_q, h, d)
    k = _split_heads(x @ layer.w_k, h, d)
    v = _split_heads(x @ layer.w_v, h, d)
    m = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d)
    m_shift = m - m.max(axis=-1, keepdims=True)
    e = np.exp(m_shift)
    s = e / e.sum(axis=-1, keepdims=True)
    a = s @ v
    out = _merge_heads(a) @ layer.w_o
    return out, MhsaCache(x=x, q=q, k=k, v=v, m=m, s=s, a=a)


@dataclass
class MhsaGrads:
    dw_q: Array
    dw_k: Array
    dw_v: Array
    dw_o: Array
    dx: Array


def _check_cache(layer: MhsaLayer, cache: MhsaCache, upstream: Array):
    b, n, c = cache.x.shape
    if upstream.shape != (b, n, c):
        raise ContractViolationError(
            f"upstream shape {upstream.shape} does not match cache {cache.x.shape}")
    if cache.q.shape != (b, layer.heads, n, layer.dim_head):
        raise ContractViolationError("cache does not belong to this layer")


def mhsa_backward_full(layer: MhsaLayer, cache: MhsaCache, upstream: Array) -> MhsaGrads:
    upstream = as_tensor(upstream)
    _check_cache(layer, cache, upstream)
    h, d = layer.heads, layer.dim_head
    b, n, c = cache.x.shape
    x2 = cache.x.reshape(b * n, c)

    a_c = _merge_heads(cache.a)
    dw_o = a_c.reshape(b * n, h * d).T @ upstream.reshape(b * n, c)
    da = _split_heads(upstream @ layer.w_o.T, h, d)

    dv = cache.s.transpose(0, 1, 3, 2) @ da
    ds = da @ cache.v.transpose(0, 1, 3, 2)
    dm = cache.s * (ds - (ds * cache.s).sum(axis=-1, keepdims=True))
    dq = dm @ cache.k / math.sqrt(d)
    dk = dm.transpose(0, 1, 3, 2) @ cache.q / math.sqrt(d)

    dq_f = _merge_heads(dq).reshape(b * n, h * d)
    dk_f = _merge_heads(dk).reshape(b * n, h * d)
    dv_f = _merge_heads(dv).reshape(b * n, h * d)
    dw_q = x2.T @ dq_f
    dw_k = x2.T @ dk_f
    dw_v = x2.T @ dv_f
    dx = (dq_f @ layer.w_q.T + dk_f @ layer.w_k.T + dv_f @ layer.w_v.T).reshape(b, n, c)
    return MhsaGrads(dw_q, dw_k, dw_v, dw_o, dx)


def sample_head_keep(heads: int, keep_ratio, rng_seed: int) -> tuple[int, ...]:
    """Kept head indices for head-drop mode: ceil((1 - r) * h) heads are dropped."""
    r = float(keep_ratio)
    n_drop = math.ceil((1.0 - r) * heads)
    n_keep = heads - n_drop
    if n_keep < 1:
        return ()
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    return tuple(sorted(int(i) for i in rng.choice(heads, size=n_keep, replace=False)))


def mhsa_backward_sbp(layer: MhsaLayer, cache: MhsaCache, upstream: Array,
                      mask: IndexMask, mode: str | None = None,
                      head_keep: tuple[int, ...] | None = None) -> MhsaGrads:
    """Masked attention backward.

    query_only: zero dM rows at dropped queries; dV and dW_V stay exact.
    qkv: zero dM rows and columns at dropped tokens plus dV/dA rows, so every
         weight gradient is a kept-subset estimate; reads only kept rows of
         Q/K/V/X/A and the kept x kept block of S.
    head: zero the whole gradient of dropped heads (head_keep lists survivors).
    """
    mode = mode or layer.drop_mode
    if mode not in DROP_MODES:
        raise ConfigurationError(f"unknown drop mode {mode!r}")
    upstream = as_tensor(upstream)
    _check_cache(layer, cache, upstream)
    b, n, c = cache.x.shape
    if mode != "head" and mask.total != n:
        raise DimensionError(f"mask domain {mask.total} != token count {n}")
    if mode != "head" and mask.is_full_keep:
        return mhsa_backward_full(layer, cache, upstream)

    h, d = layer.heads, layer.dim_head
    scale = 1.0 / math.sqrt(d)

    if mode == "query_only":
        keep = mask.keep_array()
        x2 = cache.x.reshape(b * n, c)
        a_c = _merge_heads(cache.a)
        dw_o = a_c.reshape(b * n, h * d).T @ upstream.reshape(b * n, c)
        da = _split_heads(upstream @ layer.w_o.T, h, d)
        # Value path is untouched: exact dV and dW_V.
        dv = cache.s.transpose(0, 1, 3, 2) @ da
        da_k = da[:, :, keep, :]
        s_k = cache.s[:, :, keep, :]
        a_k = cache.a[:, :, keep, :]
        ds_k = da_k @ cache.v.transpose(0, 1, 3, 2)
        rowsum = (da_k * a_k).sum(axis=-1, keepdims=True)  # == sum(ds * s) over keys
        dm_k = s_k * (ds_k - rowsum)
        dq_k = dm_k @ cache.k * scale                      # kept query rows
        dk = dm_k.transpose(0, 1, 3, 2) @ cache.q[:, :, keep, :] * scale
        dq = np.zeros_like(cache.q)
        dq[:, :, keep, :] = dq_k
        dq_f = _merge_heads(dq).reshape(b * n, h * d)
        dk_f = _merge_heads(dk).reshape(b * n, h * d)
        dv_f = _merge_heads(dv).reshape(b * n, h * d)
        dw_q = x2.T @ dq_f
        dw_k = x2.T @ dk_f
        dw_v = x2.T @ dv_f
        dx = (dq_f @ layer.w_q.T + dk_f @ layer.w_k.T + dv_f @ layer.w_v.T).reshape(b, n, c)
        return MhsaGrads(dw_q, dw_k, dw_v, dw_o, dx)

    if mode == "qkv":
        keep = mask.keep_array()
        nk = keep.size
        x_k = cache.x[:, keep, :]
        up_k = upstream[:, keep, :]
        a_k = cache.a[:, :, keep, :]
        a_ck = _merge_heads(a_k)
        dw_o = a_ck.reshape(b * nk, h * d).T @ up_k.reshape(b * nk, c)
        da_k = _split_heads(up_k @ layer.w_o.T, h, d)      # kept token rows of dA
        s_kk = cache.s[:, :, keep, :][:, :, :, keep]
        v_k = cache.v[:, :, keep, :]
        k_k = cache.k[:, :, keep, :]
        q_k = cache.q[:, :, keep, :]
        ds_kk = da_k @ v_k.transpose(0, 1, 3, 2)
        # Row sums of ds * s run over ALL keys: <dA_q, A_q> recovers them from
        # the cached per-head outputs without touching dropped columns of S.
        rowsum = (da_k * a_k).sum(axis=-1, keepdims=True)
        dm_kk = s_kk * (ds_kk - rowsum)
        dq_k = dm_kk @ k_k * scale
        dk_k = dm_kk.transpose(0, 1, 3, 2) @ q_k * scale
        dv_k = s_kk.transpose(0, 1, 3, 2) @ da_k
        x2_k = x_k.reshape(b * nk, c)
        dq_f = _merge_heads(dq_k).reshape(b * nk, h * d)
        dk_f = _merge_heads(dk_k).reshape(b * nk, h * d)
        dv_f = _merge_heads(dv_k).reshape(b * nk, h * d)
        dw_q = x2_k.T @ dq_f
        dw_k = x2_k.T @ dk_f
        dw_v = x2_k.T @ dv_f
        dx = np.zeros((b, n, c))
        dx[:, keep, :] = (dq_f @ layer.w_q.T + dk_f @ layer.w_k.T
                          + dv_f @ layer.w_v.T).reshape(b, nk, c)
        return MhsaGrads(dw_q, dw_k, dw_v, dw_o, dx)

    # mode == "head"
    if head_keep is None:
        raise ConfigurationError("head mode needs head_keep (the surviving head indices)")
    hk = np.asarray(sorted(head_keep), dtype=np.int64)
    if hk.size and (hk.min() < 0 or hk.max() >= h):
        raise ConfigurationError("head index out of range")
    if hk.size == h:
        return mhsa_backward_full(layer, cache, upstream)
    x2 = cache.x.reshape(b * n, c)
    a_c = _merge_heads(cache.a)
    dw_o = a_c.reshape(b * n, h * d).T @ upstream.reshape(b * n, c)
    da = _split_heads(upstream @ layer.w_o.T, h, d)
    dq = np.zeros_like(cache.q)
    dk = np.zeros_like(cache.k)
    dv = np.zeros_like(cache.v)
    if hk.size:
        da_h = da[:, hk, :, :]
        s_h = cache.s[:, hk, :, :]
        dv[:, hk, :, :] = s_h.transpose(0, 1, 3, 2) @ da_h
        ds_h = da_h @ cache.v[:, hk, :, :].transpose(0, 1, 3, 2)
        dm_h = s_h * (ds_h - (da_h * cache.a[:, hk, :, :]).sum(axis=-1, keepdims=True))
        dq[:, hk, :, :] = dm_h @ cache.k[:, hk, :, :] * scale
        dk[:, hk, :, :] = dm_h.transpose(0, 1, 3, 2) @ cache.q[:, hk, :, :] * scale
    dq_f = _merge_heads(dq).reshape(b * n, h * d)
    dk_f = _merge_heads(dk).reshape(b * n, h * d)
    dv_f = _merge_heads(dv).reshape(b * n, h * d)
    dw_q = x2.T @ dq_f
    dw_k = x2.T @ dk_f
    dw_v = x2.T @ dv_f
    dx = (dq_f @ layer.w_q.T + dk_f @ layer.w_k.T + dv_f @ layer.w_v.T).reshape(b, n, c)
    return MhsaGrads(dw_q, dw_k, dw_v, dw_o, dx)


# ---------------------------------------------------------------------------
# LayerNorm, GELU, losses
# ---------------------------------------------------------------------------


def layer_norm_forward(x: Array, gamma: Array, beta: Array):
    """Per-token normalization over the last axis; returns (y, cache)."""
    x = as_tensor(x)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    x_hat = (x - mean) * inv_std
    y = gamma * x_hat + beta
    return y, (x_hat, inv_std)


def layer_norm_backward(cache, gamma: Array, upstream: Array):
    """Returns (dgamma, dbeta, dx)."""
    x_hat, inv_std = cache
    upstream = as_tensor(upstream)
    c = x_hat.shape[-1]
    axes = tuple(range(upstream.ndim - 1))
    dgamma = (upstream * x_hat).sum(axis=axes)
    dbeta = upstream.sum(axis=axes)
    dxhat = upstream * gamma
    dx = inv_std * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - x_hat * (dxhat * x_hat).mean(axis=-1, keepdims=True))
    return dgamma, dbeta, dx


def gelu_forward(x: Array) -> Array:
    x = as_tensor(x)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_backward(x: Array, upstream: Array) -> Array:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return upstream * (cdf + x * pdf)


def softmax_xent_loss(logits: Array, labels: np.ndarray):
    """Mean cross-entropy over rows; returns (loss, dlogits) with the 1/B folded in."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("logits must be n x k with n labels")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def mse_loss(pred: Array, target: Array):
    """0.5 * mean over rows of the squared error; returns (loss, dpred)."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError("prediction/target shapes differ")
    n = pred.shape[0]
    diff = pred - target
    return 0.5 * float((diff * diff).sum()) / n, diff / n


# ---------------------------------------------------------------------------
# Network description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpecEntry:
    kind: str               # "embed" | "block" | "mlp_layer" | "conv" | "pool" | "classifier"
    layer_id: str
    options: dict = field(default_factory=dict)
    sbp_enabled: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer descriptors plus the loss kind; the model builder realizes it."""

    layers: tuple[LayerSpecEntry, ...]
    loss: str = "xent"  # "xent" | "mse"

    def __post_init__(self):
        if self.loss not in ("xent", "mse"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if not any(e.kind in ("embed", "block", "mlp_layer", "conv", "classifier")
                   for e in self.layers):
            raise ConfigurationError("network needs at least one parameterized layer")

    def sbp_layers(self):
        """(layer_id, grid_shape) for every SBP-enabled layer, in network order."""
        out = []
        for e in self.layers:
            if e.sbp_enabled:
                out.append((e.layer_id, tuple(e.options["grid"])))
        return out
