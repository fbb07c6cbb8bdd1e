"""Cross-frame feature enhancement for a pair of frames from one video.

Maps are flattened ``(B, HW, D)``. The affinity uses raw (unnormalized) dot
products with temperature one.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import glorot, zeros


def init_cogrounding_params(rng, dim, identity=True):
    """Shared 1x1 conv ``2D -> D``.

    By default it starts as :func:`identity_conv_params`, so an untrained
    co-grounding model computes exactly what its single-frame counterpart
    does and learns how much of the partner frame to mix in. With
    ``identity=False`` the weights are Glorot-uniform.
    """
    if identity:
        return identity_conv_params(dim)
    return {"conv.w": glorot(rng, (2 * dim, dim)), "conv.b": zeros(dim)}


def identity_conv_params(dim):
    """Conv weights that copy the first D input channels and ignore the rest."""
    w = np.zeros((2 * dim, dim))
    w[:dim] = np.eye(dim)
    return {"conv.w": Tensor(w, requires_grad=True), "conv.b": zeros(dim)}


def _logits(F_a: Tensor, F_b: Tensor) -> Tensor:
    if F_a.shape != F_b.shape:
        raise ad.ShapeError(f"affinity: frame maps differ {F_a.shape} vs {F_b.shape}")
    return ad.matmul(F_a, ad.transpose(F_b, (0, 2, 1)))


def affinity(F_a: Tensor, F_b: Tensor) -> Tensor:
    """Row-stochastic ``(B, HW, HW)``: row x is a softmax over cells y of frame b."""
    return ad.softmax(_logits(F_a, F_b))


def propagate(M: Tensor, F_b: Tensor) -> Tensor:
    return ad.matmul(M, F_b)


def enhance_pair(F_a: Tensor, F_b: Tensor, params):
    """Return ``(V_a, V_b)``, each frame enhanced with the other one.

    The reverse direction applies the softmax over the other axis of the same
    logits, so both affinity matrices are row-stochastic.
    """
    logits = _logits(F_a, F_b)
    M_ab = ad.softmax(logits)
    M_ba = ad.softmax(ad.transpose(logits, (0, 2, 1)))
    w, b = params["conv.w"], params["conv.b"]
    V_a = ad.conv1x1(ad.concat([F_a, propagate(M_ab, F_b)], axis=-1), w, b)
    V_b = ad.conv1x1(ad.concat([F_b, propagate(M_ba, F_a)], axis=-1), w, b)
    return V_a, V_b


def enhance_one(F_a: Tensor, F_b: Tensor, params) -> Tensor:
    """Enhance ``F_a`` with its partner frame only (inference)."""
    M = affinity(F_a, F_b)
    return ad.conv1x1(ad.concat([F_a, propagate(M, F_b)], axis=-1), params["conv.w"], params["conv.b"])


def inference_partners(T: int, stride: int = 1) -> np.ndarray:
    """Frame t pairs with t - stride; early frames pair forward with t + stride."""
    if T == 1:
        return np.zeros(1, dtype=np.intp)
    s = max(1, min(stride, T - 1))
    t = np.arange(T)
    return np.where(t - s >= 0, t - s, t + s)
