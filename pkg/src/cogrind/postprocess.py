"""Temporal re-scoring of each frame's top-K boxes over a window of P frames.

For a center frame, candidate i collects, from every frame of the window, the
confidence of that frame's candidate whose feature is most similar to its own
(row argmax of the K x K feature affinity). The collected confidences are
averaged over the frames actually present in the (boundary-clipped) window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TopKFrame:
    boxes: np.ndarray  # (K, 4)
    scores: np.ndarray  # (K,), non-increasing
    features: np.ndarray  # (D, K), unit columns
    padded: np.ndarray | None = None  # (K,) bool, True where a box was repeated

    @property
    def k(self):
        return len(self.scores)


@dataclass
class StabilizedFrame:
    scores: np.ndarray  # (K,)
    selected: int


def _unit_columns(F):
    F = np.asarray(F, dtype=float)
    n = np.linalg.norm(F, axis=0, keepdims=True)
    return F / np.maximum(n, 1e-8)


def make_topk_frame(boxes, scores, features, k=None, normalize=True) -> TopKFrame:
    """Build a frame from ranked candidates, padding to ``k`` by repeating the last one."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    features = np.asarray(features, dtype=float)
    if len(scores) == 0:
        raise ValueError("a frame needs at least one candidate")
    k = len(scores) if k is None else k
    padded = np.zeros(k, dtype=bool)
    if len(scores) < k:
        extra = k - len(scores)
        padded[len(scores):] = True
        boxes = np.concatenate([boxes, np.repeat(boxes[-1:], extra, axis=0)])
        scores = np.concatenate([scores, np.repeat(scores[-1:], extra)])
        features = np.concatenate([features, np.repeat(features[:, -1:], extra, axis=1)], axis=1)
    boxes, scores, features = boxes[:k], scores[:k], features[:, :k]
    if normalize:
        features = _unit_columns(features)
    return TopKFrame(boxes, scores, features, padded)


def gather_topk(result, feature_maps, k: int) -> TopKFrame:
    """Top-``k`` predictions of a :class:`~cogrind.head.GroundingResult`.

    ``feature_maps[level]`` is that level's ``(HW, D)`` enhanced map; each box
    takes the feature of the cell that produced it.
    """
    idx = result.topk(k)
    feats = np.stack([feature_maps[result.level[i]][result.cell[i]] for i in idx], axis=1)
    return make_topk_frame(result.boxes[idx], result.scores[idx], feats, k=k)


def stabilize_window(center: TopKFrame, refs) -> StabilizedFrame:
    """Average the matched confidences of ``refs`` (the window, center included)."""
    refs = list(refs)
    if not refs:
        raise ValueError("stabilize_window: empty window")
    total = np.zeros(center.k)
    for ref in refs:
        Z = center.features.T @ ref.features
        total += ref.scores[np.argmax(Z, axis=1)]
    scores = total / len(refs)
    return StabilizedFrame(scores, int(np.argmax(scores)))


def check_window(P: int) -> int:
    if P < 1 or P % 2 == 0:
        raise ValueError(f"window size P must be a positive odd number, got {P}")
    return P // 2


def stabilize_video(frames, P: int = 5):
    """Stabilize every frame against its clipped window of ``P`` frames."""
    half = check_window(P)
    frames = list(frames)
    if not frames:
        raise ValueError("stabilize_video: empty video")
    T = len(frames)
    out = []
    for t in range(T):
        window = frames[max(0, t - half): min(T, t + half + 1)]
        out.append(stabilize_window(frames[t], window))
    return out
