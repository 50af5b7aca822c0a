"""Neural building blocks: multi-head attention, LayerNorm, GELU, a multi-scale
1-D convolution front-end and a stacked bidirectional GRU.

All functions accept either a single sequence ``[N, D]`` or a batch
``[B, N, D]`` and return the same rank they were given.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import kernels
from .params import linear_param, normal_param, param, zeros_param
from .rng import SplitMix64
from .tensor import (ShapeError, Tensor, broadcast_to, concat, make_node,
                     matmul, softmax)

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class MhaParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor | None
    heads: int
    head_dim: int

    @property
    def model_dim(self) -> int:
        return self.W_Q.shape[0]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5


@dataclass
class ConvFrontEndParams:
    kernels: list[Tensor]           # each [width, D, C_out]
    biases: list[Tensor]            # each [C_out]
    W_merge: Tensor                 # [len(kernels) * C_out, D]
    b_merge: Tensor
    norm: LayerNormParams
    widths: tuple[int, ...] = (3, 5, 7)


@dataclass
class GruCellParams:
    W_i: Tensor   # [D_in, 3H], gate order reset|update|candidate
    b_i: Tensor
    W_h: Tensor   # [H, 3H]
    b_h: Tensor


@dataclass
class GruLayer:
    fwd: GruCellParams
    bwd: GruCellParams


@dataclass
class BiGruParams:
    layers: list[GruLayer]
    W_out: Tensor   # [2H, D]
    b_out: Tensor
    hidden: int = field(default=0)


def init_mha(rng: SplitMix64, dim: int, heads: int, head_dim: int | None = None,
             out_proj: bool = True) -> MhaParams:
    head_dim = head_dim or dim // heads
    inner = heads * head_dim
    return MhaParams(
        W_Q=linear_param(rng, dim, inner),
        W_K=linear_param(rng, dim, inner),
        W_V=linear_param(rng, dim, inner),
        W_O=linear_param(rng, inner, dim) if out_proj else None,
        heads=heads,
        head_dim=head_dim,
    )


def init_layer_norm(dim: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(param(np.ones(dim)), zeros_param(dim), eps)


def init_conv_front_end(rng: SplitMix64, dim: int, widths=(3, 5, 7),
                        channels: int | None = None) -> ConvFrontEndParams:
    channels = channels or max(1, dim // 4)
    for w in widths:
        if w % 2 == 0:
            raise ValueError(f"kernel width {w} is even; same-padding needs odd widths")
    return ConvFrontEndParams(
        kernels=[normal_param(rng, (w, dim, channels), 1.0 / math.sqrt(w * dim)) for w in widths],
        biases=[zeros_param(channels) for _ in widths],
        W_merge=linear_param(rng, len(widths) * channels, dim),
        b_merge=zeros_param(dim),
        norm=init_layer_norm(dim),
        widths=tuple(widths),
    )


def _init_gru_cell(rng: SplitMix64, d_in: int, hidden: int) -> GruCellParams:
    return GruCellParams(
        W_i=linear_param(rng, d_in, 3 * hidden),
        b_i=zeros_param(3 * hidden),
        W_h=linear_param(rng, hidden, 3 * hidden),
        b_h=zeros_param(3 * hidden),
    )


def init_bigru(rng: SplitMix64, dim: int, hidden: int | None = None, num_layers: int = 2) -> BiGruParams:
    hidden = hidden or max(1, dim // 2)
    layers = []
    d_in = dim
    for _ in range(num_layers):
        layers.append(GruLayer(_init_gru_cell(rng, d_in, hidden), _init_gru_cell(rng, d_in, hidden)))
        d_in = 2 * hidden
    return BiGruParams(layers, linear_param(rng, 2 * hidden, dim), zeros_param(dim), hidden)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected [N, D] or [B, N, D], got {x.shape}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return x.reshape(x.shape[1:]) if squeeze else x


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return x + broadcast_to(b, x.shape)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, W)
    return add_bias(y, b) if b is not None else y


def causal_mask(n: int) -> np.ndarray:
    """Boolean [n, n] mask, True where query l may attend to key j <= l."""
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def mha(q: Tensor, kv: Tensor, params: MhaParams, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention of ``q`` over ``kv`` with per-head projections.

    ``mask`` is a boolean [N_q, N_kv] array (True = may attend); masked
    scores are set to -inf before the softmax.
    """
    qb, squeeze = _as_batch(q)
    kb, _ = _as_batch(kv)
    D = params.model_dim
    if qb.shape[-1] != D or kb.shape[-1] != D:
        raise ShapeError(f"mha: inputs {q.shape} / {kv.shape} do not match model width {D}")
    if qb.shape[0] != kb.shape[0]:
        raise ShapeError(f"mha: batch extents differ for {q.shape} and {kv.shape}")
    B, Nq, _ = qb.shape
    Nk = kb.shape[1]
    if mask is not None and np.shape(mask) != (Nq, Nk):
        raise ShapeError(f"mha: mask shape {np.shape(mask)} does not match ({Nq}, {Nk})")
    H, dh = params.heads, params.head_dim

    def split(t, n):
        return t.reshape(B, n, H, dh).transpose(0, 2, 1, 3)

    Q = split(matmul(qb, params.W_Q), Nq)
    K = split(matmul(kb, params.W_K), Nk)
    V = split(matmul(kb, params.W_V), Nk)
    scores = matmul(Q, K.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1, mask=mask)
    out = matmul(attn, V).transpose(0, 2, 1, 3).reshape(B, Nq, H * dh)
    if params.W_O is not None:
        out = matmul(out, params.W_O)
    return _unbatch(out, squeeze)


# ---------------------------------------------------------------------------
# normalization and activation
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, params: LayerNormParams) -> Tensor:
    """Per-row standardization over the last axis (1/D variance), then gain and bias."""
    D = x.shape[-1]
    if params.gain.shape != (D,):
        raise ShapeError(f"layer_norm: gain {params.gain.shape} does not match width {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + params.eps)
    xhat = xc * inv
    gain, bias = params.gain, params.bias
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(xhat * gain.data + bias.data, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / SQRT2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return make_node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# ---------------------------------------------------------------------------
# convolution front-end
# ---------------------------------------------------------------------------

def conv1d_same(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Same-padded 1-D convolution along the token axis of a [B, N, D_in] batch."""
    width, d_in, c_out = W.shape
    if x.ndim != 3 or x.shape[-1] != d_in:
        raise ShapeError(f"conv1d_same: input {x.shape} does not match kernel {W.shape}")
    B, N, _ = x.shape
    pad = width // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    cols = np.concatenate([xp[:, j:j + N] for j in range(width)], axis=-1)
    Wf = W.data.reshape(width * d_in, c_out)
    out = cols @ Wf + b.data

    def bw(g):
        dcols = g @ Wf.T
        dxp = np.zeros_like(xp)
        for j in range(width):
            dxp[:, j:j + N] += dcols[..., j * d_in:(j + 1) * d_in]
        dW = (cols.reshape(-1, width * d_in).T @ g.reshape(-1, c_out)).reshape(W.shape)
        return dxp[:, pad:pad + N], dW, g.sum(axis=(0, 1))

    return make_node(out, (x, W, b), bw)


def conv_pre_norm(h_a: Tensor, params: ConvFrontEndParams) -> Tensor:
    """Concatenated multi-scale convolutions projected back to D, before LayerNorm."""
    xb, squeeze = _as_batch(h_a)
    if xb.shape[1] < 1:
        raise ShapeError("conv_front_end: empty token axis")
    feats = [conv1d_same(xb, W, b) for W, b in zip(params.kernels, params.biases)]
    merged = linear(concat(feats, axis=-1), params.W_merge, params.b_merge)
    return _unbatch(merged, squeeze)


def conv_front_end(h_a: Tensor, params: ConvFrontEndParams) -> Tensor:
    return gelu(layer_norm(conv_pre_norm(h_a, params), params.norm))


# ---------------------------------------------------------------------------
# recurrent encoder
# ---------------------------------------------------------------------------

def gru_direction(xp: Tensor, W_h: Tensor, b_h: Tensor, reverse: bool = False) -> Tensor:
    """One GRU direction over precomputed input projections [B, N, 3H]."""
    xa = np.ascontiguousarray(xp.data)
    Wa = np.ascontiguousarray(W_h.data)
    hs, gates, hn = kernels.gru_scan(xa, Wa, np.ascontiguousarray(b_h.data), reverse)

    def bw(g):
        return kernels.gru_scan_backward(np.ascontiguousarray(g), Wa, hs, gates, hn, reverse)

    return make_node(hs, (xp, W_h, b_h), bw)


def bigru_states(x: Tensor, params: BiGruParams) -> list[Tensor]:
    """Concatenated [forward; backward] hidden states after each layer."""
    xb, squeeze = _as_batch(x)
    states = []
    h = xb
    for layer in params.layers:
        f = gru_direction(linear(h, layer.fwd.W_i, layer.fwd.b_i), layer.fwd.W_h, layer.fwd.b_h, False)
        r = gru_direction(linear(h, layer.bwd.W_i, layer.bwd.b_i), layer.bwd.W_h, layer.bwd.b_h, True)
        h = concat([f, r], axis=-1)
        states.append(_unbatch(h, squeeze))
    return states


def bigru(x: Tensor, params: BiGruParams) -> Tensor:
    return linear(bigru_states(x, params)[-1], params.W_out, params.b_out)
