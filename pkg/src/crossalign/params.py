"""Walking nested parameter dataclasses by canonical dotted path."""
from __future__ import annotations

import dataclasses

import numpy as np

from .rng import SplitMix64
from .tensor import Tensor


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten dataclasses / lists / dicts of Tensors into ``{path: tensor}``."""
    out: dict[str, Tensor] = {}

    def walk(node, path):
        if isinstance(node, Tensor):
            out[path] = node
        elif dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                walk(getattr(node, f.name), f"{path}.{f.name}" if path else f.name)
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{path}.{i}" if path else str(i))
        elif isinstance(node, dict):
            for k, item in node.items():
                walk(item, f"{path}.{k}" if path else str(k))

    walk(obj, prefix)
    return out


def trainable(obj, prefix: str = "") -> dict[str, Tensor]:
    return {k: t for k, t in named_tensors(obj, prefix).items() if t.requires_grad}


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def normal_param(rng: SplitMix64, shape, std: float) -> Tensor:
    return param(rng.normal(tuple(shape), std))


def linear_param(rng: SplitMix64, fan_in: int, fan_out: int) -> Tensor:
    return normal_param(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in))


def zeros_param(shape) -> Tensor:
    return param(np.zeros(shape))
