"""Cross-modal alignment on a small reverse-mode autodiff engine."""
from .alignment import (CmaWeights, EmbeddingBatch, GapMetrics, KernelConfig, cma_loss,
                        cs_divergence_hat, cs_divergence_sets, cs_global_loss, cs_token_loss,
                        gap_metrics, info_nce, median_bandwidth)
from .adapter import AdapterDims, adapter_forward, encode_audio, init_adapter
from .config import RunConfig, load_config, parse_config
from .decoder import (GuideParams, TokenDictionary, apply_guide, ce_loss, decoder_logits,
                      greedy_decode, guide_scores, init_decoder, total_loss)
from .kernels import BACKEND
from .rng import SplitMix64
from .tensor import Tensor, backward, gradcheck, no_grad

__version__ = "0.1.0"

__all__ = [
    "AdapterDims", "BACKEND", "CmaWeights", "EmbeddingBatch", "GapMetrics", "GuideParams",
    "KernelConfig", "RunConfig", "SplitMix64", "Tensor", "TokenDictionary", "adapter_forward",
    "apply_guide", "backward", "ce_loss", "cma_loss", "cs_divergence_hat", "cs_divergence_sets",
    "cs_global_loss", "cs_token_loss", "decoder_logits", "encode_audio", "gap_metrics",
    "gradcheck", "greedy_decode", "guide_scores", "info_nce", "init_adapter", "init_decoder",
    "load_config", "median_bandwidth", "no_grad", "parse_config", "total_loss",
]
