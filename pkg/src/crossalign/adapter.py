"""Two-stream adapter mapping variable-length audio features to N_g decoder-space tokens.

The semantic stream attends learnable queries over the raw features and is
therefore blind to token order; the temporal stream runs the features through
a convolutional front-end and a bidirectional GRU first.  A third set of
queries attends over both streams' outputs and the result is projected into
the decoder embedding width.
"""
from __future__ import annotations

from dataclasses import dataclass

from .nn import (BiGruParams, ConvFrontEndParams, LayerNormParams, MhaParams,
                 bigru, conv_front_end, init_bigru, init_conv_front_end,
                 init_layer_norm, init_mha, layer_norm, linear, mha)
from .params import linear_param, normal_param, zeros_param
from .rng import SplitMix64
from .tensor import ShapeError, Tensor, broadcast_to, concat, matmul

QUERY_STD = 0.02


@dataclass
class AdapterDims:
    dim: int = 32
    llm_dim: int = 32
    n_semantic: int = 4
    n_temporal: int = 4
    n_global: int = 8
    heads: int = 2
    head_dim: int | None = None
    out_proj: bool = True


@dataclass
class AudioFeatures:
    h_a: Tensor
    source_id: int = 0


@dataclass
class AdapterParams:
    Q_s: Tensor
    Q_t: Tensor
    Q_g: Tensor
    mha_semantic: MhaParams
    mha_temporal: MhaParams
    mha_fusion: MhaParams
    conv: ConvFrontEndParams
    gru: BiGruParams
    ln_semantic: LayerNormParams
    ln_temporal: LayerNormParams
    ln_fusion: LayerNormParams
    W_p: Tensor


@dataclass
class LinearProjector:
    """Stand-in used when the two-stream adapter is ablated: one token from the mean feature."""

    W: Tensor
    b: Tensor


def init_adapter(rng: SplitMix64, dims: AdapterDims) -> AdapterParams:
    D = dims.dim
    return AdapterParams(
        Q_s=normal_param(rng.substream("Q_s"), (dims.n_semantic, D), QUERY_STD),
        Q_t=normal_param(rng.substream("Q_t"), (dims.n_temporal, D), QUERY_STD),
        Q_g=normal_param(rng.substream("Q_g"), (dims.n_global, D), QUERY_STD),
        mha_semantic=init_mha(rng.substream("mha_semantic"), D, dims.heads, dims.head_dim, dims.out_proj),
        mha_temporal=init_mha(rng.substream("mha_temporal"), D, dims.heads, dims.head_dim, dims.out_proj),
        mha_fusion=init_mha(rng.substream("mha_fusion"), D, dims.heads, dims.head_dim, dims.out_proj),
        conv=init_conv_front_end(rng.substream("conv"), D),
        gru=init_bigru(rng.substream("gru"), D),
        ln_semantic=init_layer_norm(D),
        ln_temporal=init_layer_norm(D),
        ln_fusion=init_layer_norm(D),
        W_p=linear_param(rng.substream("W_p"), D, dims.llm_dim),
    )


def init_linear_projector(rng: SplitMix64, dims: AdapterDims) -> LinearProjector:
    return LinearProjector(linear_param(rng.substream("W"), dims.dim, dims.llm_dim), zeros_param(dims.llm_dim))


def _features(h_a) -> Tensor:
    h = h_a.h_a if isinstance(h_a, AudioFeatures) else h_a
    if h.ndim not in (2, 3) or h.shape[-2] < 1:
        raise ShapeError(f"audio features must be [N_a, D] or [B, N_a, D] with N_a >= 1, got {h.shape}")
    return h


def _queries(Q: Tensor, like: Tensor) -> Tensor:
    if Q.shape[-1] != like.shape[-1]:
        raise ShapeError(f"query width {Q.shape[-1]} does not match features {like.shape}")
    if like.ndim == 3:
        return broadcast_to(Q, (like.shape[0], *Q.shape))
    return Q


def attend_residual(Q: Tensor, kv: Tensor, attn: MhaParams, norm: LayerNormParams) -> Tensor:
    q = _queries(Q, kv)
    return layer_norm(mha(q, kv, attn) + q, norm)


def semantic_forward(h_a, params: AdapterParams) -> Tensor:
    return attend_residual(params.Q_s, _features(h_a), params.mha_semantic, params.ln_semantic)


def temporal_encode(h_a, params: AdapterParams) -> Tensor:
    """Order-aware encoding: conv front-end then the bidirectional GRU."""
    return bigru(conv_front_end(_features(h_a), params.conv), params.gru)


def temporal_forward(h_a, params: AdapterParams) -> Tensor:
    return attend_residual(params.Q_t, temporal_encode(h_a, params), params.mha_temporal, params.ln_temporal)


def fuse_project(h_s: Tensor, h_t: Tensor, params: AdapterParams) -> Tensor:
    kv = concat([h_s, h_t], axis=-2)
    return matmul(attend_residual(params.Q_g, kv, params.mha_fusion, params.ln_fusion), params.W_p)


def adapter_forward(h_a, params: AdapterParams) -> Tensor:
    h = _features(h_a)
    return fuse_project(semantic_forward(h, params), temporal_forward(h, params), params)


def linear_project(h_a, proj: LinearProjector) -> Tensor:
    h = _features(h_a)
    z = linear(h.mean(axis=-2, keepdims=True), proj.W, proj.b)
    return z


def encode_audio(h_a, params) -> Tensor:
    """Dispatch on the parameter type so callers need not know which adapter is in use."""
    if isinstance(params, LinearProjector):
        return linear_project(h_a, params)
    return adapter_forward(h_a, params)
