"""Model construction, the optimization loop, evaluation and checkpoint I/O."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import AdapterDims, encode_audio, init_adapter, init_linear_projector
from .alignment import CmaWeights, EmbeddingBatch, GapMetrics, KernelConfig, gap_metrics
from .config import RunConfig, parse_config
from .decoder import (Batch, LossWeightsTotal, Model, TokenDictionary, caption_embeddings,
                      greedy_decode, init_decoder, init_guide, total_loss)
from .params import named_tensors, trainable
from .rng import SplitMix64
from .serialize import (array_to_text, load_records, save_embeddings, save_records,
                        text_to_array)
from .synth import (MAX_CAPTION_LEN, PROMPT, Dataset, build_dataset, build_dictionary,
                    caption_words, make_sample)
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, breakdown: dict[str, float]):
        parts = " ".join(f"{k}={v!r}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")
        self.step = step
        self.breakdown = breakdown


# ---------------------------------------------------------------------------
# construction from a config
# ---------------------------------------------------------------------------

def effective(cfg: RunConfig) -> RunConfig:
    """Fold ablation switches into the weights they disable."""
    changes = {}
    if cfg.ablate_cma:
        changes["lambda_cma"] = 0.0
    if cfg.ablate_cs:
        changes["alpha_global"] = 0.0
        changes["alpha_token"] = 0.0
    if cfg.ablate_tg:
        changes["guide_enabled"] = False
    return cfg.replace(**changes) if changes else cfg


def adapter_dims(cfg: RunConfig) -> AdapterDims:
    return AdapterDims(cfg.dim, cfg.llm_dim, cfg.n_semantic, cfg.n_temporal, cfg.n_global, cfg.heads)


def decoder_max_len(cfg: RunConfig) -> int:
    n_audio = 1 if cfg.ablate_tsa else cfg.n_global
    return n_audio + len(PROMPT) + 1 + MAX_CAPTION_LEN


def build_model(cfg: RunConfig) -> Model:
    cfg = effective(cfg)
    init = SplitMix64(cfg.seed).substream("init")
    dims = adapter_dims(cfg)
    if cfg.ablate_tsa:
        adapter = init_linear_projector(init.substream("projector"), dims)
    else:
        adapter = init_adapter(init.substream("adapter"), dims)
    decoder = init_decoder(init.substream("decoder"), cfg.vocab_size, cfg.llm_dim,
                           decoder_max_len(cfg), cfg.heads, cfg.decoder_blocks,
                           embed_std=cfg.embed_std, freeze_embeddings=cfg.freeze_embeddings)
    guide = init_guide(cfg.guide_mode, cfg.guide_enabled, cfg.guide_stop_grad)
    return Model(adapter, decoder, guide)


def model_tensors(model: Model) -> dict[str, Tensor]:
    return named_tensors(model)


def loss_settings(cfg: RunConfig):
    cfg = effective(cfg)
    weights = LossWeightsTotal(cfg.lambda_cma, cfg.lambda_tg, cfg.lambda_dec)
    cma = CmaWeights(cfg.alpha_global, cfg.alpha_token, cfg.alpha_nce, cfg.tau)
    kernel = KernelConfig(cfg.sigma_policy, cfg.sigma, cfg.sigma_floor)
    return weights, cma, kernel


def load_split(cfg: RunConfig, split: str, dictionary: TokenDictionary | None = None) -> Dataset:
    dictionary = dictionary or build_dictionary(cfg.vocab_size)
    size = cfg.train_size if split == "train" else cfg.val_size
    return build_dataset(cfg.seed, split, size, cfg.n_tokens, cfg.dim, dictionary, cfg.noise)


def make_batch(data: Dataset, idx) -> Batch:
    caps = data.captions[idx]
    width = int((caps != 0).sum(axis=1).max())
    return Batch(data.h_a[idx], caps[:, :width])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamW:
    params: dict[str, Tensor]
    lr: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m[k] = np.zeros(p.shape)
            self.v[k] = np.zeros(p.shape)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data)


def schedule(step: int, total: int, warmup: int, base_lr: float, cosine: bool = True) -> float:
    """Linear warmup over ``warmup`` steps then cosine decay to zero at ``total``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if not cosine:
        return base_lr
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(1.0, progress)))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    losses: dict[str, float]
    gap: GapMetrics
    accuracy: float
    za_bar: np.ndarray
    zt_bar: np.ndarray

    def as_dict(self) -> dict[str, float]:
        out = {f"val_{k}": v for k, v in self.losses.items()}
        out["l2_mean"] = self.gap.l2_mean
        out["cos_mean"] = self.gap.cos_mean if self.gap.cos_mean is not None else float("nan")
        out["val_acc"] = self.accuracy
        return out


def evaluate(model: Model, data: Dataset, cfg: RunConfig) -> EvalResult:
    """Losses, modality-gap metrics and teacher-forced next-token accuracy on ``data``.

    Chunks follow index order with the training batch size; loss values are
    averaged over chunks weighted by chunk size.
    """
    weights, cma, kernel = loss_settings(cfg)
    bs = cfg.effective_batch_size
    sums: dict[str, float] = {}
    za, zt = [], []
    correct = counted = 0
    n = len(data)
    with no_grad():
        for lo in range(0, n, bs):
            idx = np.arange(lo, min(n, lo + bs))
            batch = make_batch(data, idx)
            if len(idx) < 2 and weights.lambda_cma > 0:
                raise ValueError("evaluation chunk too small for the alignment loss")
            out = total_loss(batch, model, _prompt_ids(model), weights, cma, kernel)
            for k, v in out.breakdown().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            za.append(out.za_bar.data)
            zt.append(out.zt_bar.data)
            logits = out.guided if out.guided is not None else out.logits
            mask = batch.target_mask
            pred = logits.data.argmax(axis=-1)
            correct += int(((pred == batch.captions) & mask).sum())
            counted += int(mask.sum())
    za_bar, zt_bar = np.concatenate(za), np.concatenate(zt)
    return EvalResult({k: v / n for k, v in sums.items()}, gap_metrics(za_bar, zt_bar),
                      correct / counted, za_bar, zt_bar)


_PROMPT_CACHE: dict[int, np.ndarray] = {}


def _prompt_ids(model: Model) -> np.ndarray:
    K = model.decoder.vocab_size
    if K not in _PROMPT_CACHE:
        _PROMPT_CACHE[K] = np.array(build_dictionary(K).encode(PROMPT), dtype=np.int64)
    return _PROMPT_CACHE[K]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    history: list[dict[str, float]]
    initial: EvalResult
    final: EvalResult
    steps: int
    checkpoint: Path | None = None


def _fmt(v: float) -> str:
    return repr(float(v))


def train(cfg: RunConfig, out_dir=None, log_file=None, save: bool = True,
          max_steps: int | None = None) -> TrainResult:
    """Optimize the total objective with AdamW, warmup and cosine decay.

    Deterministic for a given config: data, initialization and shuffling come
    from named substreams of ``cfg.seed``.
    """
    out_dir = Path(out_dir or cfg.out_dir)
    dictionary = build_dictionary(cfg.vocab_size)
    train_data = load_split(cfg, "train", dictionary)
    val_data = load_split(cfg, "val", dictionary)
    model = build_model(cfg)
    params = trainable(model)
    weights, cma, kernel = loss_settings(cfg)
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    bs = cfg.effective_batch_size
    per_epoch = cfg.steps_per_epoch
    total = cfg.total_steps if max_steps is None else min(max_steps, cfg.total_steps)
    warmup = cfg.warmup_epochs * per_epoch
    shuffle = SplitMix64(cfg.seed).substream("shuffle")
    prompt = _prompt_ids(model)

    lines: list[str] = []
    initial = evaluate(model, val_data, cfg)
    lines.append("epoch=0 step=0 " + " ".join(f"{k}={_fmt(v)}" for k, v in initial.as_dict().items()))
    history = [dict(epoch=0, step=0, **initial.as_dict())]
    final = initial
    step = 0
    epoch = 0
    while step < total:
        epoch += 1
        order = np.argsort(shuffle.u64(len(train_data)), kind="stable")
        running: dict[str, float] = {}
        taken = 0
        for b in range(per_epoch):
            if step >= total:
                break
            batch = make_batch(train_data, order[b * bs:(b + 1) * bs])
            opt.zero_grad()
            out = total_loss(batch, model, prompt, weights, cma, kernel)
            parts = out.breakdown()
            if not all(math.isfinite(v) for v in parts.values()):
                raise TrainingAborted(step, parts)
            backward(out.total)
            opt.step(schedule(step, total, warmup, cfg.lr, cfg.cosine_schedule))
            for k, v in parts.items():
                running[k] = running.get(k, 0.0) + v
            taken += 1
            step += 1
        record = {"epoch": epoch, "step": step}
        record.update({f"train_{k}": v / taken for k, v in running.items()})
        if epoch % cfg.eval_every == 0 or step >= total:
            final = evaluate(model, val_data, cfg)
            record.update(final.as_dict())
        history.append(record)
        lines.append(" ".join(f"{k}={_fmt(v) if isinstance(v, float) else v}" for k, v in record.items()))
        log.info(lines[-1])
    if history[-1].get("val_acc") is None:
        final = evaluate(model, val_data, cfg)
    ckpt = None
    if save:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "checkpoint.cmab"
        save_checkpoint(ckpt, model, cfg, step, final.losses.get("total", float("nan")))
        (out_dir / "train.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
        dictionary.save(out_dir / "dictionary.tsv")
        (out_dir / "manifest.tsv").write_text(train_data.manifest(dictionary), encoding="utf-8")
    if log_file is not None:
        Path(log_file).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return TrainResult(model, history, initial, final, step, ckpt)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

META = "meta."


def save_checkpoint(path, model: Model, cfg: RunConfig, step: int, val_loss: float) -> None:
    records = {k: t.data for k, t in model_tensors(model).items()}
    records[META + "step"] = np.array(float(step))
    records[META + "val_loss"] = np.array(val_loss)
    records[META + "config"] = text_to_array(cfg.to_text())
    records[META + "config_hash"] = np.frombuffer(cfg.digest(), dtype=np.uint8).astype(np.float64)
    save_records(path, records)


@dataclass
class Checkpoint:
    model: Model
    config: RunConfig
    step: int
    val_loss: float


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    records = load_records(path)
    cfg = parse_config(array_to_text(records[META + "config"]))
    model = build_model(cfg)
    tensors = model_tensors(model)
    for name, t in tensors.items():
        if name not in records:
            raise KeyError(f"checkpoint lacks tensor {name}")
        if records[name].shape != t.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {records[name].shape}, expected {t.shape}")
        t.data[...] = records[name]
    return Checkpoint(model, cfg, int(records[META + "step"]), float(records[META + "val_loss"]))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def gap_report(checkpoint, split: str = "val", out=None) -> GapMetrics:
    ck = load_checkpoint(checkpoint)
    metrics = pooled_gap(ck.model, load_split(ck.config, split))
    if out is not None:
        Path(out).write_text(metrics.as_lines(), encoding="utf-8")
    return metrics


def pooled_embeddings(model: Model, data: Dataset, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    za, zt = [], []
    with no_grad():
        for lo in range(0, len(data), batch_size):
            batch = make_batch(data, np.arange(lo, min(len(data), lo + batch_size)))
            z_a = encode_audio(Tensor(batch.h_a), model.adapter)
            za.append(EmbeddingBatch(z_a).pooled().data)
            zt.append(caption_embeddings(batch, model.decoder).pooled().data)
    return np.concatenate(za), np.concatenate(zt)


def pooled_gap(model: Model, data: Dataset) -> GapMetrics:
    return gap_metrics(*pooled_embeddings(model, data))


def dump_embeddings(checkpoint, split: str, path) -> np.ndarray:
    """Write pooled audio rows then pooled text rows as one [2B, D_llm] float32 block."""
    ck = load_checkpoint(checkpoint)
    za, zt = pooled_embeddings(ck.model, load_split(ck.config, split))
    block = np.concatenate([za, zt]).astype(np.float32)
    save_embeddings(path, block)
    return block


def decode_seed(checkpoint, seed: int, max_len: int = MAX_CAPTION_LEN) -> list[str]:
    ck = load_checkpoint(checkpoint)
    cfg = ck.config
    dictionary = build_dictionary(cfg.vocab_size)
    sample = make_sample(seed, cfg.n_tokens, cfg.dim, dictionary, cfg.noise)
    with no_grad():
        z_a = encode_audio(Tensor(sample.h_a), ck.model.adapter)
    ids = greedy_decode(z_a, _prompt_ids(ck.model), ck.model.decoder, ck.model.guide, max_len)
    return [w for w in dictionary.decode(ids) if w != "<eos>"]


def reference_caption(cfg: RunConfig, seed: int) -> list[str]:
    return caption_words(make_sample(seed, cfg.n_tokens, cfg.dim, build_dictionary(cfg.vocab_size)).scene)


# ---------------------------------------------------------------------------
# ablation study
# ---------------------------------------------------------------------------

@dataclass
class AblationRun:
    variant: str
    seed: int
    accuracy: float
    gap: GapMetrics
    initial_gap: GapMetrics


def ablation_study(cfg: RunConfig, seeds, variants=("full", "tg", "cs", "cma"),
                   max_steps: int | None = None) -> list[AblationRun]:
    """Train each variant (``"full"`` or an ablation name) on each seed without saving."""
    runs = []
    for seed in seeds:
        for variant in variants:
            run_cfg = cfg.replace(seed=int(seed))
            if variant != "full":
                run_cfg = run_cfg.with_ablation(variant)
            res = train(run_cfg, save=False, max_steps=max_steps)
            runs.append(AblationRun(variant, int(seed), res.final.accuracy, res.final.gap, res.initial.gap))
            log.info("ablation variant=%s seed=%d val_acc=%r l2_mean=%r", variant, seed,
                     res.final.accuracy, res.final.gap.l2_mean)
    return runs
