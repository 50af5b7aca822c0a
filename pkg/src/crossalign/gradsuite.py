"""Finite-difference gradient suite over every training loss and the adapter stack.

Each check draws small random configurations, builds the loss with a fixed
kernel bandwidth (the median heuristic is piecewise in the inputs) and
compares autodiff gradients against central differences on every entry of
every trainable tensor.  Parameters are perturbed away from their
initial values: the small query initialization otherwise leaves some
gradients near 1e-7, where central differences are dominated by roundoff.
The composite ``total`` check probes a random sample of entries per tensor
because each of its parts is already probed exhaustively.

The two deep stacks use a step of 1e-4: through the conv/GRU path a few
entries have gradients near 1e-8, and at 1e-5 the roundoff in the loss
difference (about 5e-11) exceeds the relative tolerance there.  Elsewhere
the step stays at 1e-5, which keeps the l1 guide mode clear of its kinks.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapter import AdapterDims, adapter_forward, init_adapter
from .alignment import (CmaWeights, EmbeddingBatch, KernelConfig, cma_loss,
                        cs_global_loss, cs_token_loss, info_nce)
from .decoder import (EOS, GUIDE_MODES, PAD, Batch, LossWeightsTotal, Model,
                      ce_loss, decoder_logits, guided_logits, init_decoder,
                      init_guide, total_loss)
from .params import param, trainable
from .rng import SplitMix64
from .tensor import GradcheckReport, Tensor, gradcheck

FIXED = KernelConfig("fixed", sigma=1.5)


PERTURB_STD = 0.3
ENTRY_LIMIT = {"total": 3}
DEFAULT_STEP = 1e-5
STEP = {"adapter": 1e-4, "total": 1e-4}


def _perturb(rng: SplitMix64, params: dict[str, Tensor]) -> dict[str, Tensor]:
    for name, t in params.items():
        t.data += rng.substream(name).normal(t.shape, PERTURB_STD)
    return params


def _randint(rng: SplitMix64, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi]."""
    return lo + rng.randbelow(hi - lo + 1)


def _token_batch(rng: SplitMix64, B: int, n_max: int, D: int, name: str):
    lengths = [_randint(rng, 1, n_max) for _ in range(B)]
    mask = np.zeros((B, n_max), dtype=bool)
    for i, n in enumerate(lengths):
        mask[i, :n] = True
    tokens = param(rng.normal((B, n_max, D)), name=name)
    return tokens, mask


def _captions(rng: SplitMix64, B: int, vocab: int, max_words: int) -> np.ndarray:
    L = max_words + 1
    caps = np.full((B, L), PAD, dtype=np.int64)
    for i in range(B):
        n = _randint(rng, 1, max_words)
        caps[i, :n] = [_randint(rng, 3, vocab - 1) for _ in range(n)]
        caps[i, n] = EOS
    return caps


def _small_model(rng: SplitMix64, guide_mode: str = "sql2", prompt_len: int = 2):
    dims = AdapterDims(dim=4, llm_dim=4, n_semantic=2, n_temporal=2, n_global=2, heads=2)
    adapter = init_adapter(rng.substream("adapter"), dims)
    vocab = 7
    decoder = init_decoder(rng.substream("decoder"), vocab, dims.llm_dim,
                           max_len=dims.n_global + prompt_len + 4, heads=2, num_blocks=1,
                           freeze_embeddings=False)
    _perturb(rng.substream("perturb"), {**trainable(adapter, "adapter"), **trainable(decoder, "decoder")})
    guide = init_guide(guide_mode)
    guide.beta.data[...] = 0.1 + 0.4 * rng.uniform()
    prompt = np.array([_randint(rng, 3, vocab - 1) for _ in range(prompt_len)])
    return Model(adapter, decoder, guide), dims, prompt


# ---------------------------------------------------------------------------
# one builder per check: rng -> (loss_builder, params)
# ---------------------------------------------------------------------------

def _check_cs_global(rng):
    B, D = _randint(rng, 2, 5), _randint(rng, 1, 4)
    p = {"za_bar": param(rng.normal((B, D))), "zt_bar": param(rng.normal((B, D)))}
    return lambda q: cs_global_loss(q["za_bar"], q["zt_bar"], FIXED), p


def _check_cs_token(rng):
    B, D = _randint(rng, 1, 3), _randint(rng, 1, 3)
    za, ma = _token_batch(rng, B, 4, D, "z_a")
    zt, mt = _token_batch(rng, B, 4, D, "z_t")
    return (lambda q: cs_token_loss(EmbeddingBatch(q["z_a"], ma), EmbeddingBatch(q["z_t"], mt), FIXED),
            {"z_a": za, "z_t": zt})


def _check_info_nce(rng):
    B, D = _randint(rng, 2, 5), _randint(rng, 2, 4)
    tau = 0.07 + 0.5 * rng.uniform()
    p = {"za_bar": param(rng.normal((B, D))), "zt_bar": param(rng.normal((B, D)))}
    return lambda q: info_nce(q["za_bar"], q["zt_bar"], tau), p


def _check_cma(rng):
    B, D = _randint(rng, 2, 3), _randint(rng, 2, 3)
    za, ma = _token_batch(rng, B, 3, D, "z_a")
    zt, mt = _token_batch(rng, B, 3, D, "z_t")
    w = CmaWeights(*(0.2 + rng.uniform() for _ in range(3)), tau=0.2 + 0.5 * rng.uniform())

    def build(q):
        return cma_loss(EmbeddingBatch(q["z_a"], ma), EmbeddingBatch(q["z_t"], mt), w, FIXED)[0]

    return build, {"z_a": za, "z_t": zt}


def _decoder_case(rng, guided: bool):
    mode = GUIDE_MODES[rng.randbelow(len(GUIDE_MODES))] if guided else "sql2"
    model, dims, prompt = _small_model(rng, mode, prompt_len=_randint(rng, 0, 2))
    B = _randint(rng, 1, 2)
    caps = _captions(rng, B, model.decoder.vocab_size, 3)
    z_a = param(rng.normal((B, dims.n_global, dims.llm_dim)), name="z_a")
    mask = caps != PAD

    def build(q):
        logits = decoder_logits(q["z_a"], prompt, caps, model.decoder)
        if guided:
            logits = guided_logits(logits, q["z_a"], model)
        return ce_loss(logits, caps, mask)

    params = {"z_a": z_a, **trainable(model.decoder, "decoder")}
    if guided:
        params["guide.beta"] = model.guide.beta
    return build, params


def _check_tg(rng):
    return _decoder_case(rng, guided=True)


def _check_dec(rng):
    return _decoder_case(rng, guided=False)


def _check_total(rng):
    model, dims, prompt = _small_model(rng, GUIDE_MODES[rng.randbelow(len(GUIDE_MODES))])
    B = _randint(rng, 2, 3)
    h_a = rng.normal((B, _randint(rng, 1, 4), dims.dim))
    caps = _captions(rng, B, model.decoder.vocab_size, 2)
    weights = LossWeightsTotal(*(0.2 + rng.uniform() for _ in range(3)))
    cma = CmaWeights(*(0.2 + rng.uniform() for _ in range(3)), tau=0.3)
    batch = Batch(h_a, caps)
    return lambda q: total_loss(batch, model, prompt, weights, cma, FIXED).total, trainable(model)


def _check_adapter(rng):
    dims = AdapterDims(dim=4, llm_dim=_randint(rng, 2, 4), n_semantic=2, n_temporal=2,
                       n_global=_randint(rng, 1, 3), heads=2)
    adapter = init_adapter(rng.substream("adapter"), dims)
    _perturb(rng.substream("perturb"), trainable(adapter))
    h_a = rng.normal((_randint(rng, 1, 2), _randint(rng, 1, 5), dims.dim))
    w = Tensor(rng.normal((h_a.shape[0], dims.n_global, dims.llm_dim)))
    return lambda q: (adapter_forward(Tensor(h_a), adapter) * w).sum(), trainable(adapter)


CHECKS: dict[str, Callable] = {
    "cs_global": _check_cs_global,
    "cs_token": _check_cs_token,
    "info_nce": _check_info_nce,
    "cma": _check_cma,
    "tg": _check_tg,
    "dec": _check_dec,
    "total": _check_total,
    "adapter": _check_adapter,
}


@dataclass
class SuiteResult:
    module: str
    configs: int
    max_rel_error: float
    passed: bool
    worst: str
    seconds: float

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.module:<10} {self.configs:>3} {self.max_rel_error:>12.3e}  {status}  {self.worst}"


def _sample_entries(rng: SplitMix64, params: dict[str, Tensor], limit: int | None):
    if limit is None:
        return None
    out = {}
    for name, t in params.items():
        if t.size > limit:
            flat = np.argsort(rng.substream(name).u64(t.size), kind="stable")[:limit]
            out[name] = [np.unravel_index(int(k), t.shape) for k in sorted(flat)]
    return out


def run_check(module: str, configs: int = 20, seed: int = 0, step: float | None = None,
              tol: float = 1e-4) -> SuiteResult:
    if module not in CHECKS:
        raise KeyError(f"unknown gradcheck module {module!r}; choose from {', '.join(CHECKS)}")
    step = STEP.get(module, DEFAULT_STEP) if step is None else step
    root = SplitMix64(seed).substream("gradcheck").substream(module)
    worst: GradcheckReport | None = None
    worst_cfg = -1
    t0 = time.perf_counter()
    for i in range(configs):
        rng = root.substream(str(i))
        build, params = CHECKS[module](rng)
        rep = gradcheck(build, params, step=step, tol=tol,
                        entries=_sample_entries(rng.substream("entries"), params, ENTRY_LIMIT.get(module)))
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst, worst_cfg = rep, i
    where = f"config {worst_cfg} {worst.worst_param}{list(worst.worst_index or ())}" if worst.worst_param else ""
    return SuiteResult(module, configs, worst.max_rel_error, worst.max_rel_error <= tol, where,
                       time.perf_counter() - t0)


def run_suite(modules=None, configs: int = 20, seed: int = 0, step: float | None = None,
              tol: float = 1e-4) -> list[SuiteResult]:
    return [run_check(m, configs, seed, step, tol) for m in (modules or CHECKS)]


def format_table(results: list[SuiteResult]) -> str:
    head = f"{'module':<10} {'n':>3} {'max_rel_err':>12}  result"
    return "\n".join([head] + [r.row() for r in results]) + "\n"
