"""Parameter containers and initializers.

Parameters live in a flat ``dict`` mapping a dotted path (``"text.fwd.w_x"``)
to a leaf :class:`Tensor`. The same paths are the keys of the checkpoint
archive.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

Params = dict  # str -> Tensor


def glorot(rng: np.random.Generator, shape, fan_in=None, fan_out=None) -> Tensor:
    fan_in = shape[-2] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def he(rng: np.random.Generator, shape, fan_in) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def subset(params: Params, prefix: str) -> Params:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def merge(into: Params, prefix: str, part: Params) -> Params:
    for k, v in part.items():
        into[f"{prefix}.{k}"] = v
    return into


def zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None


def count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))
