"""Network nodes and desk-scale model builders (token MLP, tiny ViT, tiny conv net).

A Model is an ordered list of nodes. Each node knows how to run forward while
recording the activations its backward will need — restricted to kept indices
when a mask is in force — and how to run its backward from that record. Node
records are what the tape stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigurationError, DimensionError
from .layers import (
    Conv2dLayer,
    LayerSpecEntry,
    MhsaLayer,
    NetworkSpec,
    conv2d_backward_full,
    conv2d_backward_sbp,
    conv2d_forward,
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    mhsa_backward_full,
    mhsa_backward_sbp,
    mhsa_forward,
    sample_head_keep,
)
from .masks import IndexMask

Array = np.ndarray


@dataclass
class NodeRecord:
    """One tape entry: whatever a node cached, plus the mask context it ran under."""

    cache: Any
    mask: IndexMask | None
    mode: str | None
    head_keep: tuple[int, ...] | None
    cached_elements: int


def _nbytes_elems(*arrays) -> int:
    return sum(int(a.size) for a in arrays if a is not None)


class Node:
    node_id: str
    kind: str
    sbp_enabled: bool = False
    grid: tuple[int, ...] | None = None  # mask domain, when sbp_enabled

    def params(self) -> dict[str, Array]:
        raise NotImplementedError

    def set_param(self, name: str, value: Array):
        setattr(self, name, value)

    def forward(self, x, mask=None, mode=None, head_keep=None):
        raise NotImplementedError

    def backward(self, rec: NodeRecord, dy):
        raise NotImplementedError

    def estimate_cached(self, batch: int, keep_count: int | None, mode: str | None,
                        head_keep_count: int | None = None) -> int:
        """Analytic cached-element count; keep_count None means no mask (full)."""
        raise NotImplementedError


class TokenEmbedNode(Node):
    """Per-token linear embedding plus a learned positional table."""

    kind = "embed"

    def __init__(self, node_id, n_tokens, c_in, c_out, rng, use_pos=True):
        self.node_id = node_id
        self.n_tokens = n_tokens
        self.w = rng.normal(0.0, 1.0 / math.sqrt(c_in), (c_in, c_out))
        self.b = np.zeros(c_out)
        self.pos = 0.02 * rng.normal(size=(n_tokens, c_out)) if use_pos else None

    def params(self):
        p = {"w": self.w, "b": self.b}
        if self.pos is not None:
            p["pos"] = self.pos
        return p

    def forward(self, x, mask=None, mode=None, head_keep=None):
        orig = x.shape
        if x.ndim == 4:  # B x H x W x C image grid -> token rows
            x = x.reshape(orig[0], orig[1] * orig[2], orig[3])
        b, n, c = x.shape
        if n != self.n_tokens:
            raise DimensionError(f"expected {self.n_tokens} tokens, got {n}")
        y = x.reshape(b * n, c) @ self.w + self.b
        y = y.reshape(b, n, -1)
        if self.pos is not None:
            y = y + self.pos
        return y, NodeRecord((x, orig), None, None, None, _nbytes_elems(x))

    def backward(self, rec, dy):
        x, orig = rec.cache
        b, n, c = x.shape
        dy2 = dy.reshape(b * n, -1)
        grads = {"w": x.reshape(b * n, c).T @ dy2, "b": dy2.sum(axis=0)}
        if self.pos is not None:
            grads["pos"] = dy.sum(axis=0)
        dx = (dy2 @ self.w.T).reshape(orig)
        return grads, dx

    def estimate_cached(self, batch, keep_count, mode):
        return batch * self.n_tokens * self.w.shape[0]


class TokenLinearNode(Node):
    """Linear layer applied per token row; the canonical SBP (PW-Conv) case."""

    kind = "linear"

    def __init__(self, node_id, n_tokens, c_in, c_out, rng, bias=True,
                 sbp_enabled=False, grid=None):
        self.node_id = node_id
        self.n_tokens = n_tokens
        self.w = rng.normal(0.0, 1.0 / math.sqrt(c_in), (c_in, c_out))
        self.b = np.zeros(c_out) if bias else None
        self.sbp_enabled = sbp_enabled
        self.grid = tuple(grid) if grid else (n_tokens,)

    def params(self):
        return {"w": self.w, "b": self.b} if self.b is not None else {"w": self.w}

    def forward(self, x, mask=None, mode=None, head_keep=None):
        b, n, c = x.shape
        y = x.reshape(b * n, c) @ self.w
        if self.b is not None:
            y = y + self.b
        y = y.reshape(b, n, -1)
        if mask is None or mask.is_full_keep:
            return y, NodeRecord((x, None), None, None, None, _nbytes_elems(x))
        x_k = np.ascontiguousarray(x[:, mask.keep_array(), :])
        return y, NodeRecord((x_k, mask.keep_array()), mask, None, None, _nbytes_elems(x_k))

    def backward(self, rec, dy):
        x_cached, keep = rec.cache
        b, n, _ = dy.shape
        c_in = self.w.shape[0]
        if keep is None:
            x2 = x_cached.reshape(b * n, c_in)
            dy2 = dy.reshape(b * n, -1)
            grads = {"w": x2.T @ dy2}
            if self.b is not None:
                grads["b"] = dy2.sum(axis=0)
            return grads, (dy2 @ self.w.T).reshape(b, n, c_in)
        nk = keep.size
        x2 = x_cached.reshape(b * nk, c_in)
        dy_k = np.ascontiguousarray(dy[:, keep, :]).reshape(b * nk, -1)
        grads = {"w": x2.T @ dy_k}
        if self.b is not None:
            grads["b"] = dy_k.sum(axis=0)
        dx = np.zeros((b, n, c_in))
        dx[:, keep, :] = (dy_k @ self.w.T).reshape(b, nk, c_in)
        return grads, dx

    def estimate_cached(self, batch, keep_count, mode):
        rows = self.n_tokens if keep_count is None else keep_count
        return batch * rows * self.w.shape[0]


class GeluNode(Node):
    kind = "gelu"

    def __init__(self, node_id, n_tokens, width, sbp_enabled=False, grid=None):
        self.node_id = node_id
        self.n_tokens = n_tokens
        self.width = width
        self.sbp_enabled = sbp_enabled
        self.grid = tuple(grid) if grid else (n_tokens,)

    def params(self):
        return {}

    def forward(self, x, mask=None, mode=None, head_keep=None):
        y = gelu_forward(x)
        if mask is None or mask.is_full_keep:
            return y, NodeRecord((x, None), None, None, None, _nbytes_elems(x))
        x_k = np.ascontiguousarray(x[:, mask.keep_array(), :])
        return y, NodeRecord((x_k, mask.keep_array()), mask, None, None, _nbytes_elems(x_k))

    def backward(self, rec, dy):
        x_cached, keep = rec.cache
        if keep is None:
            return {}, gelu_backward(x_cached, dy)
        dx = np.zeros_like(dy)
        dx[:, keep, :] = gelu_backward(x_cached, dy[:, keep, :])
        return {}, dx

    def estimate_cached(self, batch, keep_count, mode):
        rows = self.n_tokens if keep_count is None else keep_count
        return batch * rows * self.width


class TransformerBlockNode(Node):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).

    Under SBP the whole block shares one token mask; both branches cache only
    kept token rows (the attention cache restriction depends on the drop mode).
    """

    kind = "block"

    def __init__(self, node_id, n_tokens, embed, heads, mlp_ratio, rng,
                 sbp_enabled=False, grid=None):
        if embed % heads:
            raise ConfigurationError("embed dim must divide evenly over heads")
        self.node_id = node_id
        self.n_tokens = n_tokens
        self.embed = embed
        self.heads = heads
        self.dim_head = embed // heads
        self.hidden = mlp_ratio * embed
        self.sbp_enabled = sbp_enabled
        self.grid = tuple(grid) if grid else (n_tokens,)
        s = 1.0 / math.sqrt(embed)
        self.ln1_g = np.ones(embed)
        self.ln1_b = np.zeros(embed)
        self.w_q = rng.normal(0.0, s, (embed, embed))
        self.w_k = rng.normal(0.0, s, (embed, embed))
        self.w_v = rng.normal(0.0, s, (embed, embed))
        self.w_o = rng.normal(0.0, s, (embed, embed))
        self.ln2_g = np.ones(embed)
        self.ln2_b = np.zeros(embed)
        self.w1 = rng.normal(0.0, s, (embed, self.hidden))
        self.b1 = np.zeros(self.hidden)
        self.w2 = rng.normal(0.0, 1.0 / math.sqrt(self.hidden), (self.hidden, embed))
        self.b2 = np.zeros(embed)

    def params(self):
        return {k: getattr(self, k) for k in
                ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o",
                 "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")}

    def _mhsa(self):
        return MhsaLayer(self.heads, self.dim_head, self.w_q, self.w_k, self.w_v, self.w_o)

    def forward(self, x, mask=None, mode=None, head_keep=None):
        h1, ln1c = layer_norm_forward(x, self.ln1_g, self.ln1_b)
        att, mc = mhsa_forward(self._mhsa(), h1)
        x2 = x + att
        h2, ln2c = layer_norm_forward(x2, self.ln2_g, self.ln2_b)
        b, n, c = x.shape
        u = (h2.reshape(b * n, c) @ self.w1 + self.b1).reshape(b, n, -1)
        g = gelu_forward(u)
        mo = (g.reshape(b * n, -1) @ self.w2 + self.b2).reshape(b, n, c)
        y = x2 + mo

        if mask is None or mask.is_full_keep:
            cache = {"ln1": ln1c, "mhsa": mc, "ln2": ln2c, "h2": h2, "u": u, "g": g}
            count = (_nbytes_elems(*ln1c) + mc.element_count()
                     + _nbytes_elems(*ln2c) + _nbytes_elems(h2, u, g))
            return y, NodeRecord(cache, None, mode, head_keep, count)

        keep = mask.keep_array()
        # MLP branch caches kept token rows only, in every mode.
        ln2_k = (np.ascontiguousarray(ln2c[0][:, keep, :]),
                 np.ascontiguousarray(ln2c[1][:, keep, :]))
        h2_k = np.ascontiguousarray(h2[:, keep, :])
        u_k = np.ascontiguousarray(u[:, keep, :])
        g_k = np.ascontiguousarray(g[:, keep, :])
        # Attention-input LN can be restricted only when the attention backward
        # returns zero input-gradient at dropped rows (the qkv mode).
        if mode == "qkv":
            ln1_c = (np.ascontiguousarray(ln1c[0][:, keep, :]),
                     np.ascontiguousarray(ln1c[1][:, keep, :]))
        else:
            ln1_c = ln1c
        mc_r, mc_count = _restrict_mhsa_cache(mc, mask, mode, head_keep)
        cache = {"ln1": ln1_c, "mhsa": mc_r, "ln2": ln2_k, "h2": h2_k, "u": u_k, "g": g_k}
        count = (_nbytes_elems(*ln1_c) + mc_count
                 + _nbytes_elems(*ln2_k) + _nbytes_elems(h2_k, u_k, g_k))
        return y, NodeRecord(cache, mask, mode, head_keep, count)

    def backward(self, rec, dy):
        cache = rec.cache
        b, n, c = dy.shape
        grads = {}
        if rec.mask is None:
            g_f = cache["g"].reshape(b * n, -1)
            dmo = dy.reshape(b * n, c)
            grads["w2"] = g_f.T @ dmo
            grads["b2"] = dmo.sum(axis=0)
            dg = (dmo @ self.w2.T).reshape(b, n, -1)
            du = gelu_backward(cache["u"], dg)
            du_f = du.reshape(b * n, -1)
            grads["w1"] = cache["h2"].reshape(b * n, c).T @ du_f
            grads["b1"] = du_f.sum(axis=0)
            dh2 = (du_f @ self.w1.T).reshape(b, n, c)
            grads["ln2_g"], grads["ln2_b"], dx2a = layer_norm_backward(
                cache["ln2"], self.ln2_g, dh2)
            dx2 = dy + dx2a
            mg = mhsa_backward_full(self._mhsa(), cache["mhsa"], dx2)
        else:
            keep = rec.mask.keep_array()
            nk = keep.size
            dy_k = np.ascontiguousarray(dy[:, keep, :])
            g_f = cache["g"].reshape(b * nk, -1)
            dmo = dy_k.reshape(b * nk, c)
            grads["w2"] = g_f.T @ dmo
            grads["b2"] = dmo.sum(axis=0)
            dg = (dmo @ self.w2.T).reshape(b, nk, -1)
            du = gelu_backward(cache["u"], dg)
            du_f = du.reshape(b * nk, -1)
            grads["w1"] = cache["h2"].reshape(b * nk, c).T @ du_f
            grads["b1"] = du_f.sum(axis=0)
            dh2_k = (du_f @ self.w1.T).reshape(b, nk, c)
            grads["ln2_g"], grads["ln2_b"], dx2a_k = layer_norm_backward(
                cache["ln2"], self.ln2_g, dh2_k)
            dx2 = dy.copy()
            dx2[:, keep, :] += dx2a_k
            mc = _expand_mhsa_cache(cache["mhsa"], rec.mask, rec.mode,
                                    head_keep=rec.head_keep, heads_total=self.heads)
            mg = mhsa_backward_sbp(self._mhsa(), mc, dx2, rec.mask,
                                   mode=rec.mode, head_keep=rec.head_keep)
        grads["w_q"], grads["w_k"], grads["w_v"], grads["w_o"] = (
            mg.dw_q, mg.dw_k, mg.dw_v, mg.dw_o)
        if rec.mask is not None and rec.mode == "qkv":
            keep = rec.mask.keep_array()
            dh1_k = mg.dx[:, keep, :]
            grads["ln1_g"], grads["ln1_b"], dxa_k = layer_norm_backward(
                cache["ln1"], self.ln1_g, dh1_k)
            dx = dx2.copy()
            dx[:, keep, :] += dxa_k
        else:
            grads["ln1_g"], grads["ln1_b"], dxa = layer_norm_backward(
                cache["ln1"], self.ln1_g, mg.dx)
            dx = dx2 + dxa
        return grads, dx

    def estimate_cached(self, batch, keep_count, mode, head_keep_count=None):
        n, c, h, d, f = self.n_tokens, self.embed, self.heads, self.dim_head, self.hidden
        if keep_count is None:
            mhsa = n * c + 4 * h * n * d + 2 * h * n * n
            return batch * ((n * c + n) * 2 + n * c + 2 * n * f + mhsa)
        k = keep_count
        mlp_side = (k * c + k) + k * c + 2 * k * f  # ln2, h2, u, g on kept rows
        if mode == "qkv":
            ln1 = k * c + k
            mhsa = k * c + 4 * h * k * d + 2 * h * k * k
        elif mode == "query_only":
            ln1 = n * c + n
            mhsa = n * c + 2 * h * n * d + h * k * d + h * n * n + h * n * d
        elif mode == "head":
            ln1 = n * c + n
            hk = h if head_keep_count is None else head_keep_count
            mhsa = n * c + hk * (3 * n * d + n * n) + h * n * d
        else:
            raise ConfigurationError(f"unknown mode {mode!r}")
        return batch * (ln1 + mhsa + mlp_side)


def _restrict_mhsa_cache(mc, mask: IndexMask, mode: str, head_keep):
    """Keep only what the masked attention backward will read."""
    keep = mask.keep_array()
    if mode == "qkv":
        r = {
            "x": np.ascontiguousarray(mc.x[:, keep, :]),
            "q": np.ascontiguousarray(mc.q[:, :, keep, :]),
            "k": np.ascontiguousarray(mc.k[:, :, keep, :]),
            "v": np.ascontiguousarray(mc.v[:, :, keep, :]),
            "m": np.ascontiguousarray(mc.m[:, :, keep, :][:, :, :, keep]),
            "s": np.ascontiguousarray(mc.s[:, :, keep, :][:, :, :, keep]),
            "a": np.ascontiguousarray(mc.a[:, :, keep, :]),
        }
    elif mode == "query_only":
        r = {"x": mc.x, "q": np.ascontiguousarray(mc.q[:, :, keep, :]),
             "k": mc.k, "v": mc.v, "s": mc.s, "a": mc.a}
    elif mode == "head":
        # dW_o stays exact, so the per-head outputs are kept whole; everything
        # else survives only for the kept heads.
        hk = np.asarray(head_keep or (), dtype=np.int64)
        r = {"x": mc.x,
             "q": np.ascontiguousarray(mc.q[:, hk, :, :]),
             "k": np.ascontiguousarray(mc.k[:, hk, :, :]),
             "v": np.ascontiguousarray(mc.v[:, hk, :, :]),
             "s": np.ascontiguousarray(mc.s[:, hk, :, :]),
             "a": mc.a}
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    return r, sum(v.size for v in r.values())


def _expand_mhsa_cache(restricted: dict, mask: IndexMask, mode: str,
                       head_keep=None, heads_total: int | None = None):
    """Rebuild a full-shaped cache view for mhsa_backward_sbp.

    Slots the masked backward never reads are filled with NaN so any contract
    breach surfaces immediately instead of silently reading garbage.
    """
    from .layers import MhsaCache

    keep = mask.keep_array()
    if mode == "query_only":
        b, hh, n, d = restricted["k"].shape
        q = np.full((b, hh, n, d), np.nan)
        q[:, :, keep, :] = restricted["q"]
        m = np.full((b, hh, n, n), np.nan)
        return MhsaCache(restricted["x"], q, restricted["k"], restricted["v"],
                         m, restricted["s"], restricted["a"])
    if mode == "qkv":
        b, hh, nk, d = restricted["q"].shape
        n = mask.total
        c = restricted["x"].shape[2]
        x = np.full((b, n, c), np.nan)
        x[:, keep, :] = restricted["x"]
        out = {}
        for name in ("q", "k", "v", "a"):
            t = np.full((b, hh, n, d), np.nan)
            t[:, :, keep, :] = restricted[name]
            out[name] = t
        ms = {}
        for name in ("m", "s"):
            t = np.full((b, hh, n, n), np.nan)
            t[np.ix_(range(b), range(hh), keep, keep)] = restricted[name]
            ms[name] = t
        return MhsaCache(x, out["q"], out["k"], out["v"], ms["m"], ms["s"], out["a"])
    if mode == "head":
        # Restricted tensors hold kept heads only; dropped-head slots are NaN
        # (the head-mode backward slices kept heads before reading anything).
        hk = np.asarray(head_keep, dtype=np.int64)
        b, _, n, d = restricted["q"].shape
        h_total = heads_total
        out = {}
        for name, width in (("q", d), ("k", d), ("v", d), ("s", n)):
            t = np.full((b, h_total, n, width), np.nan)
            t[:, hk, :, :] = restricted[name]
            out[name] = t
        m = np.full((b, h_total, n, n), np.nan)
        return MhsaCache(restricted["x"], out["q"], out["k"], out["v"], m, out["s"],
                         restricted["a"])
    raise ConfigurationError(f"unknown mode {mode!r}")


class Conv2dNode(Node):
    """Conv + optional GELU on a B x H x W x C grid; mask lives on the output grid."""

    kind = "conv"

    def __init__(self, node_id, in_grid, c_in, c_out, rng, kernel=3, stride=1,
                 padding=1, activation=True, sbp_enabled=False):
        self.node_id = node_id
        self.in_grid = tuple(in_grid)
        w = rng.normal(0.0, 1.0 / math.sqrt(kernel * kernel * c_in),
                       (kernel, kernel, c_in, c_out))
        self.w = w
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.sbp_enabled = sbp_enabled
        layer = Conv2dLayer(w, stride, padding)
        from .layers import conv2d_output_grid
        self.out_grid = conv2d_output_grid(layer, *self.in_grid)
        self.grid = self.out_grid

    def params(self):
        return {"w": self.w}

    def _layer(self):
        return Conv2dLayer(self.w, self.stride, self.padding)

    def forward(self, x, mask=None, mode=None, head_keep=None):
        y = conv2d_forward(self._layer(), x)
        u = y
        if self.activation:
            y = gelu_forward(u)
        # General conv keeps the full input cached: with kernel > stride the
        # kept outputs' receptive fields overlap nearly everything.
        cache = (x, u if self.activation else None)
        return y, NodeRecord(cache, mask, mode, None, _nbytes_elems(*cache))

    def backward(self, rec, dy):
        x, u = rec.cache
        if self.activation:
            if rec.mask is not None and not rec.mask.is_full_keep:
                b, ho, wo, co = dy.shape
                dy = dy.reshape(b, ho * wo, co).copy()
                dy[:, rec.mask.drop_array(), :] = 0.0
                dy = dy.reshape(b, ho, wo, co)
            dy = gelu_backward(u, dy)
        if rec.mask is None or rec.mask.is_full_keep:
            dw, dx = conv2d_backward_full(self._layer(), x, dy)
        else:
            dw, dx = conv2d_backward_sbp(self._layer(), x, dy, rec.mask)
        return {"w": dw}, dx

    def estimate_cached(self, batch, keep_count, mode):
        h, w = self.in_grid
        ho, wo = self.out_grid
        c_in, c_out = self.w.shape[2], self.w.shape[3]
        total = batch * h * w * c_in
        if self.activation:
            total += batch * ho * wo * c_out
        return total


class MeanPoolNode(Node):
    """Mean over the token axis: B x N x C -> B x C."""

    kind = "pool"

    def __init__(self, node_id):
        self.node_id = node_id

    def params(self):
        return {}

    def forward(self, x, mask=None, mode=None, head_keep=None):
        orig = x.shape
        if x.ndim == 4:
            b, h, w, c = x.shape
            x = x.reshape(b, h * w, c)
        return x.mean(axis=1), NodeRecord(orig, None, None, None, 0)

    def backward(self, rec, dy):
        shape = rec.cache
        n = int(np.prod(shape[1:-1]))
        dx = np.repeat(dy[:, None, :], n, axis=1) / n
        return {}, dx.reshape(shape)

    def estimate_cached(self, batch, keep_count, mode):
        return 0


class ClassifierNode(Node):
    """Final linear layer on pooled features (never SBP-wrapped)."""

    kind = "classifier"

    def __init__(self, node_id, c_in, n_out, rng):
        self.node_id = node_id
        self.w = rng.normal(0.0, 1.0 / math.sqrt(c_in), (c_in, n_out))
        self.b = np.zeros(n_out)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, mask=None, mode=None, head_keep=None):
        return x @ self.w + self.b, NodeRecord(x, None, None, None, x.size)

    def backward(self, rec, dy):
        x = rec.cache
        return {"w": x.T @ dy, "b": dy.sum(axis=0)}, dy @ self.w.T

    def estimate_cached(self, batch, keep_count, mode):
        return batch * self.w.shape[0]


@dataclass
class Model:
    spec: NetworkSpec
    nodes: list
    loss: str

    def params(self) -> dict[str, Array]:
        out = {}
        for node in self.nodes:
            for name, value in node.params().items():
                out[f"{node.node_id}.{name}"] = value
        return out

    def set_params(self, values: dict[str, Array]):
        for node in self.nodes:
            for name in node.params():
                key = f"{node.node_id}.{name}"
                if key not in values:
                    raise ConfigurationError(f"missing parameter {key}")
                node.set_param(name, np.asarray(values[key], dtype=np.float64))

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def sbp_layers(self):
        return self.spec.sbp_layers()


# ---------------------------------------------------------------------------
# Spec builders
# ---------------------------------------------------------------------------


def _sbp_flags(depth: int, fraction: float) -> list[bool]:
    """SBP on the last ceil(fraction * depth) layers."""
    n = math.ceil(fraction * depth)
    n = min(max(n, 0), depth)
    return [i >= depth - n for i in range(depth)]


def mlp_spec(grid=(8, 8), in_channels=3, width=32, depth=3, n_classes=2,
             sbp_fraction=1.0, loss="xent") -> NetworkSpec:
    """Token-wise MLP: embed, depth x (linear + gelu) units, mean pool, classifier."""
    flags = _sbp_flags(depth, sbp_fraction)
    layers = [LayerSpecEntry("embed", "embed", {"grid": tuple(grid), "in_channels": in_channels,
                                                "width": width})]
    for i, flag in enumerate(flags):
        layers.append(LayerSpecEntry("mlp_layer", f"mlp{i}",
                                     {"grid": tuple(grid), "width": width}, flag))
    layers.append(LayerSpecEntry("pool", "pool"))
    layers.append(LayerSpecEntry("classifier", "head", {"n_classes": n_classes}))
    return NetworkSpec(tuple(layers), loss)


def tiny_vit_spec(grid=(8, 8), in_channels=3, embed=32, heads=2, depth=6,
                  mlp_ratio=2, n_classes=2, sbp_fraction=2 / 3, loss="xent") -> NetworkSpec:
    flags = _sbp_flags(depth, sbp_fraction)
    layers = [LayerSpecEntry("embed", "embed", {"grid": tuple(grid), "in_channels": in_channels,
                                                "width": embed})]
    for i, flag in enumerate(flags):
        layers.append(LayerSpecEntry("block", f"block{i}",
                                     {"grid": tuple(grid), "embed": embed, "heads": heads,
                                      "mlp_ratio": mlp_ratio}, flag))
    layers.append(LayerSpecEntry("pool", "pool"))
    layers.append(LayerSpecEntry("classifier", "head", {"n_classes": n_classes}))
    return NetworkSpec(tuple(layers), loss)


def vit_tiny_preset(n_classes=1000) -> NetworkSpec:
    """The full-size 12-block, embed-192 configuration. Far too large for
    finite-difference checks; provided as a named preset only."""
    return tiny_vit_spec(grid=(14, 14), in_channels=3, embed=192, heads=3,
                         depth=12, mlp_ratio=4, n_classes=n_classes,
                         sbp_fraction=2 / 3)


def tiny_conv_spec(grid=(8, 8), in_channels=3, channels=16, depth=3, kernel=3,
                   n_classes=2, sbp_fraction=1.0, loss="xent") -> NetworkSpec:
    flags = _sbp_flags(depth, sbp_fraction)
    layers = []
    c_prev = in_channels
    for i, flag in enumerate(flags):
        layers.append(LayerSpecEntry("conv", f"conv{i}",
                                     {"grid": tuple(grid), "in_channels": c_prev,
                                      "channels": channels, "kernel": kernel,
                                      "stride": 1, "padding": kernel // 2}, flag))
        c_prev = channels
    layers.append(LayerSpecEntry("pool", "pool"))
    layers.append(LayerSpecEntry("classifier", "head", {"n_classes": n_classes}))
    return NetworkSpec(tuple(layers), "xent" if n_classes else "mse")


def build_model(spec: NetworkSpec, seed: int) -> Model:
    """Deterministically initialize a Model from its NetworkSpec."""
    rng = np.random.Generator(np.random.PCG64(seed))
    nodes = []
    width = None
    n_tokens = None
    for entry in spec.layers:
        o = entry.options
        if entry.kind == "embed":
            n_tokens = int(np.prod(o["grid"]))
            width = o["width"]
            nodes.append(TokenEmbedNode(entry.layer_id, n_tokens, o["in_channels"], width, rng))
        elif entry.kind == "mlp_layer":
            lin = TokenLinearNode(f"{entry.layer_id}.lin", n_tokens, width, o["width"], rng,
                                  sbp_enabled=entry.sbp_enabled, grid=o["grid"])
            act = GeluNode(f"{entry.layer_id}.act", n_tokens, o["width"],
                           sbp_enabled=entry.sbp_enabled, grid=o["grid"])
            lin.mask_group = act.mask_group = entry.layer_id
            width = o["width"]
            nodes.extend([lin, act])
        elif entry.kind == "block":
            blk = TransformerBlockNode(entry.layer_id, n_tokens, o["embed"], o["heads"],
                                       o["mlp_ratio"], rng, sbp_enabled=entry.sbp_enabled,
                                       grid=o["grid"])
            blk.mask_group = entry.layer_id
            nodes.append(blk)
        elif entry.kind == "conv":
            conv = Conv2dNode(entry.layer_id, o["grid"], o["in_channels"], o["channels"], rng,
                              kernel=o["kernel"], stride=o["stride"], padding=o["padding"],
                              sbp_enabled=entry.sbp_enabled)
            conv.mask_group = entry.layer_id
            width = o["channels"]
            n_tokens = int(np.prod(conv.out_grid))
            nodes.append(conv)
        elif entry.kind == "pool":
            nodes.append(MeanPoolNode(entry.layer_id))
        elif entry.kind == "classifier":
            nodes.append(ClassifierNode(entry.layer_id, width, o["n_classes"], rng))
        else:
            raise ConfigurationError(f"unknown layer kind {entry.kind!r}")
    for node in nodes:
        if not hasattr(node, "mask_group"):
            node.mask_group = None
    return Model(spec, nodes, spec.loss)
