"""Cross-modal alignment losses.

The Cauchy-Schwarz divergence between two sample sets is estimated with
Gaussian kernel density estimates; all double sums keep their diagonal
terms (a V-statistic).  For sets of unequal size each Gram sum is divided by
its pair count, which leaves the equal-size estimator unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import (ShapeError, Tensor, broadcast_to, clamp_min, concat,
                     constant, log, log_softmax, make_node, matmul, pick,
                     reduce_sum, sqrt, stack)

LOG_FLOOR = 1e-300


@dataclass
class KernelConfig:
    policy: str = "median"      # "median" or "fixed"
    sigma: float = 1.0          # used when policy == "fixed"
    sigma_floor: float = 1e-3

    def __post_init__(self):
        if self.policy not in ("median", "fixed"):
            raise ValueError(f"unknown bandwidth policy {self.policy!r}")
        if self.policy == "fixed" and not self.sigma > 0:
            raise ValueError("fixed bandwidth must be positive")


@dataclass
class CmaWeights:
    alpha_global: float = 1.0
    alpha_token: float = 1.0
    alpha_nce: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if min(self.alpha_global, self.alpha_token, self.alpha_nce) < 0:
            raise ValueError("alignment weights must be non-negative")


@dataclass
class EmbeddingBatch:
    """Padded token embeddings [B, N_max, D] with a validity mask [B, N_max]."""

    tokens: Tensor
    mask: np.ndarray | None = None
    modality: str = "audio"

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeError(f"EmbeddingBatch needs [B, N, D] tokens, got {self.tokens.shape}")
        if self.mask is None:
            self.mask = np.ones(self.tokens.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.tokens.shape[:2]:
            raise ShapeError(f"mask {self.mask.shape} does not match tokens {self.tokens.shape}")
        if np.any(self.mask.sum(axis=1) == 0):
            raise ValueError("EmbeddingBatch: a sample has no tokens")

    @classmethod
    def from_list(cls, samples, modality: str = "audio") -> EmbeddingBatch:
        samples = [constant(s) for s in samples]
        n_max = max(s.shape[0] for s in samples)
        D = samples[0].shape[1]
        rows, mask = [], np.zeros((len(samples), n_max), dtype=bool)
        for i, s in enumerate(samples):
            if s.shape[1] != D:
                raise ShapeError(f"sample widths differ: {s.shape[1]} vs {D}")
            mask[i, :s.shape[0]] = True
            if s.shape[0] < n_max:
                s = concat([s, Tensor(np.zeros((n_max - s.shape[0], D)))], axis=0)
            rows.append(s)
        return cls(stack(rows, axis=0), mask, modality)

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def pooled(self) -> Tensor:
        """Token-axis mean of each sample over its valid tokens -> [B, D]."""
        B, N, D = self.tokens.shape
        if self.mask.all():
            return self.tokens.mean(axis=1)
        w = self.mask / self.mask.sum(axis=1, keepdims=True)
        weights = Tensor(np.broadcast_to(w[:, :, None], (B, N, D)))
        return reduce_sum(self.tokens * weights, axis=1)


# ---------------------------------------------------------------------------
# kernels and bandwidth
# ---------------------------------------------------------------------------

def sqdist(X: Tensor, Y: Tensor) -> Tensor:
    """Pairwise squared distances, [m,D]x[n,D] -> [m,n] or batched [B,m,D]x[B,n,D]."""
    X, Y = constant(X), constant(Y)
    if X.shape[-1] != Y.shape[-1]:
        raise ShapeError(f"sqdist: widths differ for {X.shape} and {Y.shape}")
    squeeze = X.ndim == 2
    if squeeze != (Y.ndim == 2) or (not squeeze and X.shape[0] != Y.shape[0]):
        raise ShapeError(f"sqdist: incompatible batch shapes {X.shape} and {Y.shape}")
    xa = np.ascontiguousarray(X.data if not squeeze else X.data[None])
    ya = np.ascontiguousarray(Y.data if not squeeze else Y.data[None])
    out = kernels.sqdist(xa, ya)

    def bw(g):
        g3 = np.ascontiguousarray(g[None] if squeeze else g)
        gx, gy = kernels.sqdist_backward(g3, xa, ya)
        return (gx[0], gy[0]) if squeeze else (gx, gy)

    return make_node(out[0] if squeeze else out, (X, Y), bw)


def gaussian_gram(X: Tensor, Y: Tensor, sigma) -> Tensor:
    """exp(-||x - y||^2 / (2 sigma^2)); ``sigma`` is a float or one value per batch entry."""
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sig > 0)):
        raise ValueError("gaussian_gram: sigma must be positive")
    d = sqdist(X, Y)
    scale = -0.5 / sig**2
    if scale.ndim == 1:
        scale = scale[:, None, None]
    return (d * Tensor(np.broadcast_to(scale, d.shape))).exp()


def _median_sq_dist(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    iu = np.triu_indices(points.shape[0], k=1)
    return float(np.median(d[iu]))


def median_bandwidth(X, Y, floor: float = 1e-3) -> float:
    """sqrt(median squared pairwise distance of the pooled set / 2), at least ``floor``.

    Pairs are distinct points of the pooled set; self-distances are excluded.
    The result is a plain float and carries no gradient.
    """
    xa = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    ya = Y.data if isinstance(Y, Tensor) else np.asarray(Y, dtype=np.float64)
    pooled = np.concatenate([xa.reshape(len(xa), -1), ya.reshape(len(ya), -1)], axis=0)
    if pooled.shape[0] < 2:
        raise ValueError("median_bandwidth: need at least two points")
    sigma = np.sqrt(_median_sq_dist(pooled) / 2.0)
    return float(max(sigma, floor))


def resolve_sigma(X, Y, cfg: KernelConfig) -> float:
    if cfg.policy == "fixed":
        return cfg.sigma
    return median_bandwidth(X, Y, cfg.sigma_floor)


# ---------------------------------------------------------------------------
# Cauchy-Schwarz divergence
# ---------------------------------------------------------------------------

def _cs_from_sums(s_at: Tensor, s_aa: Tensor, s_tt: Tensor) -> Tensor:
    return -log(clamp_min(s_at / sqrt(s_aa * s_tt), LOG_FLOOR))


def cs_divergence_sets(A: Tensor, T: Tensor, cfg: KernelConfig | None = None,
                       sigma: float | None = None) -> Tensor:
    """Empirical CS divergence between two point sets of possibly different size."""
    A, T = constant(A), constant(T)
    if A.ndim != 2 or T.ndim != 2 or A.shape[1] != T.shape[1]:
        raise ShapeError(f"cs divergence: sets {A.shape} and {T.shape} are not comparable")
    if A.shape[0] < 1 or T.shape[0] < 1:
        raise ValueError("cs divergence: empty point set")
    if sigma is None:
        sigma = resolve_sigma(A, T, cfg or KernelConfig())
    m, n = A.shape[0], T.shape[0]
    s_at = gaussian_gram(A, T, sigma).sum() * (1.0 / (m * n))
    s_aa = gaussian_gram(A, A, sigma).sum() * (1.0 / (m * m))
    s_tt = gaussian_gram(T, T, sigma).sum() * (1.0 / (n * n))
    return _cs_from_sums(s_at, s_aa, s_tt)


def cs_divergence_hat(A: Tensor, T: Tensor, cfg: KernelConfig | None = None) -> Tensor:
    """CS divergence between paired batches of equal size B."""
    A, T = constant(A), constant(T)
    if A.shape[0] != T.shape[0]:
        raise ShapeError(f"cs_divergence_hat: batch sizes differ ({A.shape[0]} vs {T.shape[0]})")
    return cs_divergence_sets(A, T, cfg)


def cs_global_loss(za_bar: Tensor, zt_bar: Tensor, cfg: KernelConfig | None = None) -> Tensor:
    return cs_divergence_hat(za_bar, zt_bar, cfg)


def cs_token_loss(batch_a: EmbeddingBatch, batch_t: EmbeddingBatch,
                  cfg: KernelConfig | None = None) -> Tensor:
    """Mean over samples of the CS divergence between their token sets.

    Each pair gets its own bandwidth (pooled over that pair's valid tokens).
    """
    cfg = cfg or KernelConfig()
    if batch_a.batch_size != batch_t.batch_size:
        raise ShapeError("cs_token_loss: batches are not paired")
    A, T = batch_a.tokens, batch_t.tokens
    ma, mt = batch_a.mask.astype(np.float64), batch_t.mask.astype(np.float64)
    B = A.shape[0]
    if cfg.policy == "fixed":
        sig = np.full(B, cfg.sigma)
    else:
        sig = np.array([
            median_bandwidth(A.data[i][batch_a.mask[i]], T.data[i][batch_t.mask[i]], cfg.sigma_floor)
            for i in range(B)
        ])

    def weighted_sum(X, mx, Y, my):
        w = mx[:, :, None] * my[:, None, :]
        w = w / w.sum(axis=(1, 2), keepdims=True)
        return reduce_sum(gaussian_gram(X, Y, sig) * Tensor(w), axis=(1, 2))

    s_at = weighted_sum(A, ma, T, mt)
    s_aa = weighted_sum(A, ma, A, ma)
    s_tt = weighted_sum(T, mt, T, mt)
    return _cs_from_sums(s_at, s_aa, s_tt).mean()


# ---------------------------------------------------------------------------
# contrastive term and combination
# ---------------------------------------------------------------------------

def _unit_rows(x: Tensor) -> Tensor:
    sq = reduce_sum(x * x, axis=1, keepdims=True)
    if np.any(sq.data == 0.0):
        raise ValueError("info_nce: zero-norm row, cosine similarity undefined")
    return x / broadcast_to(sqrt(sq), x.shape)


def info_nce(za_bar: Tensor, zt_bar: Tensor, tau: float = 0.07) -> Tensor:
    """Symmetric in-batch InfoNCE over cosine similarities at temperature ``tau``.

    With B = 1 the loss is identically zero, so no cosine is formed (a zero
    row is then allowed).
    """
    za_bar, zt_bar = constant(za_bar), constant(zt_bar)
    if za_bar.shape != zt_bar.shape or za_bar.ndim != 2:
        raise ShapeError(f"info_nce: batches {za_bar.shape} and {zt_bar.shape} are not paired")
    if not tau > 0:
        raise ValueError("info_nce: tau must be positive")
    B = za_bar.shape[0]
    if B == 1:
        # a single class: the softmax is identically 1 whatever the similarity
        return Tensor(0.0)
    sim = matmul(_unit_rows(za_bar), _unit_rows(zt_bar).T) * (1.0 / tau)
    diag = np.arange(B)
    a2t = -pick(log_softmax(sim, axis=1), diag).mean()
    t2a = -pick(log_softmax(sim.T, axis=1), diag).mean()
    return (a2t + t2a) * 0.5


def cma_loss(batch_a: EmbeddingBatch, batch_t: EmbeddingBatch, weights: CmaWeights | None = None,
             cfg: KernelConfig | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted sum of global CS, token CS and InfoNCE terms.

    Terms with zero weight are skipped and left out of the breakdown.
    """
    weights = weights or CmaWeights()
    cfg = cfg or KernelConfig()
    parts: dict[str, Tensor] = {}
    total: Tensor = Tensor(0.0)
    za_bar = zt_bar = None
    if weights.alpha_global > 0 or weights.alpha_nce > 0:
        za_bar, zt_bar = batch_a.pooled(), batch_t.pooled()
    if weights.alpha_global > 0:
        parts["cs_global"] = cs_global_loss(za_bar, zt_bar, cfg)
        total = total + parts["cs_global"] * weights.alpha_global
    if weights.alpha_token > 0:
        parts["cs_token"] = cs_token_loss(batch_a, batch_t, cfg)
        total = total + parts["cs_token"] * weights.alpha_token
    if weights.alpha_nce > 0:
        parts["info_nce"] = info_nce(za_bar, zt_bar, weights.tau)
        total = total + parts["info_nce"] * weights.alpha_nce
    return total, parts


# ---------------------------------------------------------------------------
# modality gap measurement
# ---------------------------------------------------------------------------

@dataclass
class GapMetrics:
    l2_mean: float
    cos_mean: float | None   # None when some row has zero norm

    def as_lines(self) -> str:
        cos = "undefined" if self.cos_mean is None else repr(self.cos_mean)
        return f"l2_mean={self.l2_mean!r}\ncos_mean={cos}\n"


def gap_metrics(za_bar, zt_bar) -> GapMetrics:
    a = za_bar.data if isinstance(za_bar, Tensor) else np.asarray(za_bar, dtype=np.float64)
    t = zt_bar.data if isinstance(zt_bar, Tensor) else np.asarray(zt_bar, dtype=np.float64)
    if a.shape != t.shape:
        raise ShapeError(f"gap_metrics: batches {a.shape} and {t.shape} are not paired")
    l2 = float(np.mean(np.sqrt(((a - t) ** 2).sum(axis=1))))
    na, nt = np.linalg.norm(a, axis=1), np.linalg.norm(t, axis=1)
    if np.any(na == 0.0) or np.any(nt == 0.0):
        return GapMetrics(l2, None)
    return GapMetrics(l2, float(np.mean((a * t).sum(axis=1) / (na * nt))))
