"""Toy causal decoder, token-guided logit correction and the training objectives."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import CmaWeights, EmbeddingBatch, KernelConfig, cma_loss
from .nn import (LayerNormParams, MhaParams, causal_mask, gelu, init_layer_norm,
                 init_mha, layer_norm, linear, mha)
from .params import linear_param, normal_param, param, zeros_param
from .rng import SplitMix64
from .tensor import (ShapeError, Tensor, absolute, broadcast_to, concat, constant,
                     log_softmax, matmul, no_grad, pick, reduce_sum, sqrt, take_rows)

PAD, BOS, EOS = 0, 1, 2
GUIDE_MODES = ("sql2", "l1", "cosine")


class VocabularyError(KeyError):
    pass


class TokenDictionary:
    """Dense id <-> surface mapping; ids 0, 1, 2 are PAD, BOS, EOS."""

    def __init__(self, surfaces: list[str]):
        if len(surfaces) < 3 or surfaces[:3] != ["<pad>", "<bos>", "<eos>"]:
            raise ValueError("dictionary must start with <pad>, <bos>, <eos>")
        if len(set(surfaces)) != len(surfaces):
            raise ValueError("dictionary surfaces must be unique")
        self.surfaces = list(surfaces)
        self._index = {s: i for i, s in enumerate(self.surfaces)}

    def __len__(self) -> int:
        return len(self.surfaces)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} is not in the dictionary") from None

    def encode(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.surfaces[int(i)] for i in ids]

    def to_text(self) -> str:
        return "".join(f"{i}\t{s}\n" for i, s in enumerate(self.surfaces))

    @classmethod
    def from_text(cls, text: str) -> TokenDictionary:
        surfaces = []
        for line in text.splitlines():
            if not line:
                continue
            idx, surface = line.split("\t", 1)
            if int(idx) != len(surfaces):
                raise ValueError(f"dictionary ids must ascend from 0; got {idx} at line {len(surfaces)}")
            surfaces.append(surface)
        return cls(surfaces)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> TokenDictionary:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class GuideParams:
    beta: Tensor
    mode: str = "sql2"
    enabled: bool = True
    stop_grad: bool = False

    def __post_init__(self):
        if self.mode not in GUIDE_MODES:
            raise ValueError(f"guide mode must be one of {GUIDE_MODES}, got {self.mode!r}")


def init_guide(mode: str = "sql2", enabled: bool = True, stop_grad: bool = False) -> GuideParams:
    return GuideParams(param(0.0), mode, enabled, stop_grad)


@dataclass
class DecoderBlock:
    attn: MhaParams
    ln_attn: LayerNormParams
    ln_ff: LayerNormParams
    W_ff1: Tensor
    b_ff1: Tensor
    W_ff2: Tensor
    b_ff2: Tensor


@dataclass
class ToyDecoder:
    embed: Tensor          # [K, D_llm], shared with the token dictionary
    pos: Tensor            # [max_len, D_llm]
    blocks: list[DecoderBlock]
    ln_final: LayerNormParams
    head: Tensor           # [D_llm, K]

    @property
    def max_len(self) -> int:
        return self.pos.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]


def init_decoder(rng: SplitMix64, vocab_size: int, dim: int, max_len: int, heads: int = 2,
                 num_blocks: int = 2, ff_mult: int = 2, embed_std: float = 1.0,
                 freeze_embeddings: bool = True) -> ToyDecoder:
    embed = normal_param(rng.substream("embed"), (vocab_size, dim), embed_std)
    embed.requires_grad = not freeze_embeddings
    if freeze_embeddings:
        embed.grad = None
    blocks = []
    for i in range(num_blocks):
        r = rng.substream(f"block{i}")
        blocks.append(DecoderBlock(
            attn=init_mha(r.substream("attn"), dim, heads),
            ln_attn=init_layer_norm(dim),
            ln_ff=init_layer_norm(dim),
            W_ff1=linear_param(r.substream("ff1"), dim, ff_mult * dim),
            b_ff1=zeros_param(ff_mult * dim),
            W_ff2=linear_param(r.substream("ff2"), ff_mult * dim, dim),
            b_ff2=zeros_param(dim),
        ))
    return ToyDecoder(
        embed=embed,
        pos=normal_param(rng.substream("pos"), (max_len, dim), 0.02),
        blocks=blocks,
        ln_final=init_layer_norm(dim),
        head=linear_param(rng.substream("head"), dim, vocab_size),
    )


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _check_ids(ids: np.ndarray, vocab: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabularyError(f"token ids must lie in [0, {vocab})")


def _run_blocks(x: Tensor, decoder: ToyDecoder) -> Tensor:
    mask = causal_mask(x.shape[1])
    for blk in decoder.blocks:
        x = x + mha(layer_norm(x, blk.ln_attn), layer_norm(x, blk.ln_attn), blk.attn, mask)
        h = gelu(linear(layer_norm(x, blk.ln_ff), blk.W_ff1, blk.b_ff1))
        x = x + linear(h, blk.W_ff2, blk.b_ff2)
    return layer_norm(x, decoder.ln_final)


def _prefix_logits(z_a: Tensor, prompt_ids, input_ids: np.ndarray, decoder: ToyDecoder) -> Tensor:
    """Logits at every position of ``input_ids`` (which follow z_a and the prompt)."""
    B, Ng, D = z_a.shape
    prompt = np.asarray(prompt_ids, dtype=np.int64).reshape(-1)
    seq_ids = np.concatenate([np.broadcast_to(prompt, (B, prompt.size)), input_ids], axis=1)
    _check_ids(seq_ids, decoder.vocab_size)
    T = Ng + seq_ids.shape[1]
    if T > decoder.max_len:
        raise ShapeError(f"sequence length {T} exceeds decoder maximum {decoder.max_len}")
    if D != decoder.embed.shape[1]:
        raise ShapeError(f"audio tokens width {D} does not match decoder width {decoder.embed.shape[1]}")
    x = concat([z_a, take_rows(decoder.embed, seq_ids)], axis=1)
    x = x + broadcast_to(decoder.pos[:T], (B, T, D))
    h = _run_blocks(x, decoder)
    L = input_ids.shape[1]
    return matmul(h[:, T - L:], decoder.head)


def decoder_logits(z_a: Tensor, prompt_ids, target_ids, decoder: ToyDecoder) -> Tensor:
    """Teacher-forced next-token logits for each target position.

    The input is [z_a; prompt; BOS; targets[:-1]]; row l predicts targets[l].
    Accepts a single sample ([N_g, D], [L]) or a batch ([B, N_g, D], [B, L]).
    """
    z_a = constant(z_a)
    targets = np.asarray(target_ids, dtype=np.int64)
    squeeze = z_a.ndim == 2
    if squeeze:
        z_a = z_a.reshape(1, *z_a.shape)
        targets = targets.reshape(1, -1)
    if targets.ndim != 2 or targets.shape[0] != z_a.shape[0] or targets.shape[1] < 1:
        raise ShapeError(f"targets {np.shape(target_ids)} do not match audio batch {z_a.shape}")
    _check_ids(targets, decoder.vocab_size)
    inputs = np.concatenate([np.full((targets.shape[0], 1), BOS), targets[:, :-1]], axis=1)
    logits = _prefix_logits(z_a, prompt_ids, inputs, decoder)
    return logits.reshape(logits.shape[1:]) if squeeze else logits


# ---------------------------------------------------------------------------
# token guide
# ---------------------------------------------------------------------------

def guide_scores(za_bar: Tensor, V: Tensor, mode: str = "sql2") -> Tensor:
    """Penalty per dictionary token; larger means farther from the pooled audio embedding."""
    za_bar, V = constant(za_bar), constant(V)
    squeeze = za_bar.ndim == 1
    z = za_bar.reshape(1, -1) if squeeze else za_bar
    if z.shape[-1] != V.shape[-1]:
        raise ShapeError(f"guide_scores: widths differ for {za_bar.shape} and {V.shape}")
    B, D = z.shape
    K = V.shape[0]
    if mode == "cosine":
        zn = sqrt(reduce_sum(z * z, axis=1, keepdims=True))
        vn = sqrt(reduce_sum(V * V, axis=1, keepdims=True))
        if np.any(zn.data == 0.0) or np.any(vn.data == 0.0):
            raise ValueError("guide_scores: cosine mode with a zero-norm vector")
        s = -matmul(z / broadcast_to(zn, z.shape), (V / broadcast_to(vn, V.shape)).T)
    elif mode in ("sql2", "l1"):
        diff = broadcast_to(z.reshape(B, 1, D), (B, K, D)) - broadcast_to(V, (B, K, D))
        s = reduce_sum(diff * diff if mode == "sql2" else absolute(diff), axis=-1)
    else:
        raise ValueError(f"unknown guide mode {mode!r}")
    return s.reshape(K) if squeeze else s


def apply_guide(z_l: Tensor, scores: Tensor, beta) -> Tensor:
    """z - beta * scores; ``scores`` [B, K] is broadcast over the positions of [B, L, K] logits."""
    z_l, scores = constant(z_l), constant(scores)
    if scores.shape != z_l.shape:
        if z_l.ndim == 3 and scores.shape == (z_l.shape[0], z_l.shape[2]):
            scores = broadcast_to(scores.reshape(z_l.shape[0], 1, z_l.shape[2]), z_l.shape)
        elif scores.shape == z_l.shape[-1:]:
            scores = broadcast_to(scores, z_l.shape)
        else:
            raise ShapeError(f"apply_guide: scores {scores.shape} do not fit logits {z_l.shape}")
    return z_l - constant(beta) * scores


def ce_loss(logits: Tensor, target_ids, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions."""
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"ce_loss: targets {targets.shape} do not match logits {logits.shape}")
    _check_ids(targets, logits.shape[-1])
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = w.sum()
    if count == 0:
        raise ValueError("ce_loss: every position is padded")
    picked = pick(log_softmax(logits, axis=-1), targets)
    return -reduce_sum(picked * Tensor(w / count))


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

@dataclass
class LossWeightsTotal:
    lambda_cma: float = 1.0
    lambda_tg: float = 1.0
    lambda_dec: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_cma, self.lambda_tg, self.lambda_dec)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")


@dataclass
class Model:
    adapter: object          # AdapterParams or LinearProjector
    decoder: ToyDecoder
    guide: GuideParams


@dataclass
class Batch:
    h_a: np.ndarray            # [B, N_a, D]
    captions: np.ndarray       # [B, L] ids ending in EOS, right-padded with PAD

    @property
    def target_mask(self) -> np.ndarray:
        return self.captions != PAD

    @property
    def content_mask(self) -> np.ndarray:
        return (self.captions != PAD) & (self.captions != EOS)


@dataclass
class LossOutput:
    total: Tensor
    parts: dict[str, Tensor] = field(default_factory=dict)
    logits: Tensor | None = None
    guided: Tensor | None = None
    za_bar: Tensor | None = None
    zt_bar: Tensor | None = None

    def breakdown(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.parts.items()}


def caption_embeddings(batch: Batch, decoder: ToyDecoder) -> EmbeddingBatch:
    return EmbeddingBatch(take_rows(decoder.embed, batch.captions), batch.content_mask, "text")


def guided_logits(logits: Tensor, z_a: Tensor, model: Model) -> Tensor:
    za_bar = z_a.mean(axis=-2)
    if model.guide.stop_grad:
        za_bar = za_bar.detach()
    scores = guide_scores(za_bar, model.decoder.embed, model.guide.mode)
    return apply_guide(logits, scores, model.guide.beta)


def total_loss(batch: Batch, model: Model, prompt_ids, weights: LossWeightsTotal | None = None,
               cma_weights: CmaWeights | None = None, kernel: KernelConfig | None = None) -> LossOutput:
    """lambda_cma * L_cma + lambda_tg * L_tg + lambda_dec * L_dec with a per-term breakdown.

    Terms with zero weight (and L_tg when the guide is disabled) are not
    computed and do not appear in the breakdown.
    """
    from .adapter import encode_audio

    weights = weights or LossWeightsTotal()
    z_a = encode_audio(Tensor(batch.h_a), model.adapter)
    out = LossOutput(total=Tensor(0.0))
    audio = EmbeddingBatch(z_a, None, "audio")
    text = caption_embeddings(batch, model.decoder)
    out.za_bar, out.zt_bar = audio.pooled(), text.pooled()
    parts = out.parts
    total = out.total
    if weights.lambda_cma > 0:
        cma, sub = cma_loss(audio, text, cma_weights, kernel)
        parts.update(sub)
        parts["cma"] = cma
        total = total + cma * weights.lambda_cma
    logits = decoder_logits(z_a, prompt_ids, batch.captions, model.decoder)
    out.logits = logits
    mask = batch.target_mask
    if model.guide.enabled and weights.lambda_tg > 0:
        out.guided = guided_logits(logits, z_a, model)
        parts["tg"] = ce_loss(out.guided, batch.captions, mask)
        total = total + parts["tg"] * weights.lambda_tg
    elif model.guide.enabled:
        out.guided = guided_logits(logits, z_a, model)
    if weights.lambda_dec > 0:
        parts["dec"] = ce_loss(logits, batch.captions, mask)
        total = total + parts["dec"] * weights.lambda_dec
    parts["total"] = total
    out.total = total
    return out


def greedy_decode(z_a: Tensor, prompt_ids, decoder: ToyDecoder, guide: GuideParams | None,
                  max_len: int) -> list[int]:
    """Argmax decoding (over guided logits when the guide is enabled) until EOS or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    z_a = constant(z_a)
    if z_a.ndim == 2:
        z_a = z_a.reshape(1, *z_a.shape)
    scores = None
    with no_grad():
        if guide is not None and guide.enabled:
            scores = guide_scores(z_a.mean(axis=1), decoder.embed, guide.mode)
        out: list[int] = []
        room = decoder.max_len - z_a.shape[1] - len(np.atleast_1d(prompt_ids))
        while len(out) < min(max_len, room):
            inputs = np.array([[BOS] + out], dtype=np.int64)
            logits = _prefix_logits(z_a, prompt_ids, inputs, decoder)[:, -1]
            if scores is not None:
                logits = apply_guide(logits, scores, guide.beta)
            nxt = int(np.argmax(logits.data[0]))
            out.append(nxt)
            if nxt == EOS:
                break
    return out
