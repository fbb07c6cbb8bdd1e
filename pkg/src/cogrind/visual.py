"""Toy convolutional backbone and coordinate features.

The backbone is a stack of 3x3 stride-2 convolutions (channels-last). With
the default four blocks a 64x64 frame becomes a 4x4 grid, one cell per 16
pixels. Intermediate blocks can be tapped to get extra prediction levels.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import he, zeros

COORD_DIM = 8


def init_backbone_params(rng, channels=(16, 32, 64, 64), in_channels=3, taps=None, out_dim=None):
    """``taps`` lists block indices whose outputs become prediction levels.

    Taps other than the last block get a 1x1 adapter to ``out_dim`` channels.
    """
    p = {}
    cin = in_channels
    for i, cout in enumerate(channels):
        p[f"conv{i}.w"] = he(rng, (3, 3, cin, cout), fan_in=9 * cin)
        p[f"conv{i}.b"] = zeros(cout)
        cin = cout
    last = len(channels) - 1
    out_dim = channels[-1] if out_dim is None else out_dim
    for t in (taps or [last]):
        if t != last or channels[t] != out_dim:
            p[f"adapt{t}.w"] = he(rng, (channels[t], out_dim), fan_in=channels[t])
            p[f"adapt{t}.b"] = zeros(out_dim)
    return p


def num_blocks(params) -> int:
    return sum(1 for k in params if k.startswith("conv") and k.endswith(".w"))


def backbone_forward(img, params, taps=None, image_size=None):
    """Map frames ``(B, S, S, 3)`` (or one ``(S, S, 3)`` frame) to feature maps.

    Returns the list of ``(B, h, w, D)`` maps for ``taps`` (default: the last
    block only). Every block is conv + bias + ReLU except the last, which is
    linear so features can take either sign.
    """
    img = ad.as_tensor(img)
    if img.ndim == 3:
        img = ad.reshape(img, (1,) + img.shape)
    if image_size is not None and img.shape[1:3] != (image_size, image_size):
        raise ValueError(f"backbone: expected {image_size}x{image_size} frames, got {img.shape[1:3]}")
    n = num_blocks(params)
    taps = [n - 1] if taps is None else list(taps)
    x = img
    outs = {}
    for i in range(n):
        x = ad.add(ad.conv2d(x, params[f"conv{i}.w"], stride=2, pad=1), params[f"conv{i}.b"])
        if i < n - 1:
            x = ad.relu(x)
        if i in taps:
            y = x
            if f"adapt{i}.w" in params:
                y = ad.conv1x1(x, params[f"adapt{i}.w"], params[f"adapt{i}.b"])
            outs[i] = y
    return [outs[t] for t in taps]


def grid_size(image_size: int, block: int) -> int:
    s = image_size
    for _ in range(block + 1):
        s = (s + 2 - 3) // 2 + 1
    return s


def coordinate_encode(H: int, W: int) -> np.ndarray:
    """Raw ``(H, W, 8)`` coordinate map: cell bounds, center and cell size."""
    if H < 1 or W < 1:
        raise ValueError("coordinate_encode: grid must be at least 1x1")
    i, j = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    return np.stack([
        j / W, i / H,
        (j + 0.5) / W, (i + 0.5) / H,
        (j + 1) / W, (i + 1) / H,
        np.full_like(j, 1.0 / W), np.full_like(i, 1.0 / H),
    ], axis=-1)


def init_coord_params(rng, out_dim):
    return {"w": he(rng, (COORD_DIM, out_dim), fan_in=COORD_DIM), "b": zeros(out_dim)}


def coordinate_features(H, W, params) -> Tensor:
    """Learned 1x1 projection of the raw coordinate map: ``(H, W, D')``."""
    return ad.conv1x1(Tensor(coordinate_encode(H, W)), params["w"], params["b"])
