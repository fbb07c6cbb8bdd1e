"""One-stage grid head: fusion, raw predictions, box coding, losses, selection.

Raw predictions are ``(tx, ty, tw, th, to)`` per cell and anchor. Boxes are
``(cx, cy, w, h)`` normalized to the image. With several prediction levels the
slots of all levels are concatenated in (level, cell, anchor) order; that
order is also the tie-break order for selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import glorot, zeros

DEFAULT_ANCHORS = ((0.15, 0.15), (0.3, 0.3), (0.5, 0.5))
TARGET_EPS = 0.01


def init_head_params(rng, dim, text_dim, coord_dim, n_anchors):
    cin = dim + 2 * text_dim + coord_dim
    return {
        "fuse.w": glorot(rng, (cin, dim)),
        "fuse.b": zeros(dim),
        "out.w": glorot(rng, (dim, 5 * n_anchors)),
        "out.b": zeros(5 * n_anchors),
    }


def fuse_features(V: Tensor, q_a: Tensor, q_b: Tensor, U: Tensor, params) -> Tensor:
    """ReLU(1x1 conv) over [V, q_a, q_b, U] with the text and coordinate
    features repeated over the grid. ``V (B, HW, D)``, ``q (B, Dq)``, ``U (HW, Du)``."""
    B, HW, _ = V.shape
    parts = [V, ad.repeat(q_a, HW, axis=1), ad.repeat(q_b, HW, axis=1), ad.repeat(U, B, axis=0)]
    return ad.relu(ad.conv1x1(ad.concat(parts, axis=-1), params["fuse.w"], params["fuse.b"]))


def head_forward(fused: Tensor, params) -> Tensor:
    """Linear 1x1 conv to 5A channels: ``(B, HW, D) -> (B, HW, A, 5)``."""
    raw = ad.conv1x1(fused, params["out.w"], params["out.b"])
    B, HW, C = raw.shape
    return ad.reshape(raw, (B, HW, C // 5, 5))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def decode_grid(raw, grid, anchors):
    """Decode ``raw (..., HW, A, 5)`` on an ``(H, W)`` grid.

    Returns ``(boxes (..., HW, A, 4), objectness (..., HW, A))``.
    """
    raw = np.asarray(raw, dtype=float)
    H, W = grid
    anchors = np.asarray(anchors, dtype=float)
    i, j = np.divmod(np.arange(H * W), W)
    cx = (j[:, None] + _sigmoid(raw[..., 0])) / W
    cy = (i[:, None] + _sigmoid(raw[..., 1])) / H
    w = anchors[:, 0] * np.exp(raw[..., 2])
    h = anchors[:, 1] * np.exp(raw[..., 3])
    return np.stack([cx, cy, w, h], axis=-1), _sigmoid(raw[..., 4])


def decode_box(raw, cell, anchor, grid):
    """Decode one ``(tx, ty, tw, th)`` at ``cell=(i, j)`` with ``anchor=(aw, ah)``."""
    tx, ty, tw, th = raw[:4]
    i, j = cell
    H, W = grid
    return np.array([(j + _sigmoid(tx)) / W, (i + _sigmoid(ty)) / H,
                     anchor[0] * np.exp(tw), anchor[1] * np.exp(th)])


def encode_box(box, cell, anchor, grid, eps=0.0):
    """Inverse of :func:`decode_box`; offsets are clipped to ``[eps, 1-eps]``."""
    cx, cy, w, h = box
    i, j = cell
    H, W = grid
    fx = np.clip(cx * W - j, eps, 1 - eps)
    fy = np.clip(cy * H - i, eps, 1 - eps)
    return np.array([np.log(fx / (1 - fx)), np.log(fy / (1 - fy)),
                     np.log(w / anchor[0]), np.log(h / anchor[1])])


def clip_box(box):
    """Clip a ``(cx, cy, w, h)`` box to the unit image."""
    cx, cy, w, h = box
    x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
    x2, y2 = min(1.0, cx + w / 2), min(1.0, cy + h / 2)
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, max(0.0, x2 - x1), max(0.0, y2 - y1)])


def anchor_iou(wh, anchors):
    """IoU of center-aligned boxes of size ``wh`` against each anchor."""
    anchors = np.asarray(anchors, dtype=float)
    inter = np.minimum(wh[0], anchors[:, 0]) * np.minimum(wh[1], anchors[:, 1])
    return inter / (wh[0] * wh[1] + anchors[:, 0] * anchors[:, 1] - inter)


@dataclass(frozen=True)
class Layout:
    """Slot layout of all prediction levels."""

    grids: tuple  # ((H, W), ...)
    anchors: tuple  # per level: ((aw, ah), ...)

    @property
    def offsets(self):
        out, acc = [], 0
        for (H, W), a in zip(self.grids, self.anchors):
            out.append(acc)
            acc += H * W * len(a)
        return out

    @property
    def n_slots(self):
        return sum(H * W * len(a) for (H, W), a in zip(self.grids, self.anchors))

    def cell_of(self, level, cx, cy):
        H, W = self.grids[level]
        i = min(int(cy * H), H - 1)
        j = min(int(cx * W), W - 1)
        return i, j

    def responsible(self, box):
        """``(level, cell_index, anchor)`` of the slot that owns a gt box."""
        best = (-1.0, 0, 0)
        for lvl, anchors in enumerate(self.anchors):
            ious = anchor_iou(box[2:], anchors)
            a = int(np.argmax(ious))
            if ious[a] > best[0]:
                best = (ious[a], lvl, a)
        _, lvl, a = best
        i, j = self.cell_of(lvl, box[0], box[1])
        return lvl, i * self.grids[lvl][1] + j, a

    def slot(self, level, cell, anchor):
        return self.offsets[level] + cell * len(self.anchors[level]) + anchor

    def slot_info(self):
        """Per-slot arrays ``(level, cell, anchor)`` in slot order."""
        lv, ce, an = [], [], []
        for lvl, ((H, W), anchors) in enumerate(zip(self.grids, self.anchors)):
            A = len(anchors)
            lv.append(np.full(H * W * A, lvl))
            ce.append(np.repeat(np.arange(H * W), A))
            an.append(np.tile(np.arange(A), H * W))
        return np.concatenate(lv), np.concatenate(ce), np.concatenate(an)


def regression_targets(layout: Layout, box):
    lvl, cell, a = layout.responsible(box)
    W = layout.grids[lvl][1]
    t = encode_box(box, divmod(cell, W), layout.anchors[lvl][a], layout.grids[lvl], eps=TARGET_EPS)
    return layout.slot(lvl, cell, a), t


def reg_loss(raw_all: Tensor, slots, targets) -> Tensor:
    """Mean squared error of ``(tx, ty, tw, th)`` at the responsible slot only.

    ``raw_all`` is ``(B, n_slots, 5)``; ``slots (B,)``; ``targets (B, 4)``.
    """
    B, n, _ = raw_all.shape
    flat = ad.reshape(raw_all, (B * n * 5,))
    idx = (np.arange(B) * n + np.asarray(slots))[:, None] * 5 + np.arange(4)[None, :]
    diff = ad.sub(ad.gather(flat, idx, axis=0), Tensor(np.asarray(targets, dtype=float)))
    return ad.mean(ad.mul(diff, diff))


def objectness_logits(raw_all: Tensor) -> Tensor:
    return ad.gather(raw_all, 4, axis=2)


def cls_loss(logits: Tensor, slots) -> Tensor:
    """Softmax cross-entropy over all slots with the responsible slot as the target."""
    B, n = logits.shape
    logp = ad.reshape(ad.log_softmax(logits), (B * n,))
    return ad.scale(ad.mean(ad.gather(logp, np.arange(B) * n + np.asarray(slots), axis=0)), -1.0)


@dataclass
class GroundingResult:
    """All decoded predictions of one frame, in slot order."""

    boxes: np.ndarray  # (n, 4) cx, cy, w, h
    objectness: np.ndarray  # (n,)
    scores: np.ndarray  # (n,) fused confidence used for ranking
    level: np.ndarray
    cell: np.ndarray
    anchor: np.ndarray

    @property
    def selected(self) -> int:
        return select(self.scores)

    def topk(self, k: int) -> np.ndarray:
        """Indices of the ``k`` best slots; ties keep slot order."""
        k = min(k, len(self.scores))
        return np.argsort(-self.scores, kind="stable")[:k]


def select(scores) -> int:
    """Argmax with ties broken by the lowest slot index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("select: no predictions")
    return int(np.argmax(scores))
