"""Run configuration: flat ``key = value`` files with ``#`` comments."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


ABLATIONS = ("tsa", "cs", "cma", "tg")


@dataclass
class RunConfig:
    seed: int = 0
    # dimensions
    n_tokens: int = 24
    dim: int = 32
    llm_dim: int = 32
    n_semantic: int = 4
    n_temporal: int = 4
    n_global: int = 8
    heads: int = 2
    vocab_size: int = 64
    decoder_blocks: int = 2
    freeze_embeddings: bool = True
    embed_std: float = 1.0
    # alignment and objective weights
    alpha_global: float = 5.0
    alpha_token: float = 0.2
    alpha_nce: float = 1.0
    tau: float = 0.07
    sigma_policy: str = "median"
    sigma: float = 1.0
    sigma_floor: float = 1e-3
    lambda_cma: float = 1.0
    lambda_tg: float = 1.0
    lambda_dec: float = 1.0
    # token guide
    guide_mode: str = "sql2"
    guide_enabled: bool = True
    guide_stop_grad: bool = False
    # optimizer
    lr: float = 3e-3
    weight_decay: float = 1e-6
    warmup_epochs: int = 2
    epochs: int = 40
    batch_size: int = 16
    cosine_schedule: bool = True
    # data
    train_size: int = 800
    val_size: int = 128
    noise: bool = True
    full_batch: bool = False
    # ablation switches
    ablate_tsa: bool = False
    ablate_cs: bool = False
    ablate_cma: bool = False
    ablate_tg: bool = False
    # output
    out_dir: str = "runs/default"
    eval_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_tokens", "dim", "llm_dim", "n_semantic", "n_temporal", "n_global", "heads",
                     "vocab_size", "decoder_blocks", "epochs", "batch_size", "train_size", "val_size",
                     "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be non-negative")
        if self.dim % self.heads or self.llm_dim % self.heads:
            raise ConfigError("dim and llm_dim must be divisible by heads")
        if self.sigma_policy not in ("median", "fixed"):
            raise ConfigError(f"sigma_policy must be median or fixed, not {self.sigma_policy!r}")
        if self.guide_mode not in ("sql2", "l1", "cosine"):
            raise ConfigError(f"guide_mode must be sql2, l1 or cosine, not {self.guide_mode!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    # -- derived -----------------------------------------------------------
    @property
    def effective_batch_size(self) -> int:
        return self.train_size if self.full_batch else min(self.batch_size, self.train_size)

    @property
    def steps_per_epoch(self) -> int:
        return self.train_size // self.effective_batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def with_ablation(self, *names: str) -> RunConfig:
        changes = {}
        for name in names:
            if name not in ABLATIONS:
                raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
            changes[f"ablate_{name}"] = True
        return dataclasses.replace(self, **changes)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    # -- text form ---------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}\n")
        return "".join(lines)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()[:8]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = type(getattr(RunConfig(), name))
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    return parse_config(p.read_text(encoding="utf-8"))
