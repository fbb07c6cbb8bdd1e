"""Subject and object-aware location attention over a flattened grid.

All maps are flattened to ``(B, HW, ...)`` with cells in row-major order.
Similarity is cosine for both the subject and the location map.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import glorot, zeros

log = logging.getLogger(__name__)

MARGIN = 0.5
TEMPERATURE = 0.1

_fallback_logged = False


def init_attention_params(rng, embed_dim, dim):
    """Projections of the attribute queries into the visual feature width."""
    return {"proj_sub.w": glorot(rng, (embed_dim, dim)), "proj_loc.w": glorot(rng, (embed_dim, dim))}


def init_location_params(rng, cells, dim):
    """Row-wise FC of the location branch; its input width is the cell count."""
    return {"fc.w": glorot(rng, (cells, dim)), "fc.b": zeros(dim)}


def cosine_map(V: Tensor, q: Tensor) -> Tensor:
    """Cosine between every cell of ``V (B, HW, D)`` and ``q (B, D)``."""
    B, HW, D = V.shape
    if q.shape != (B, D):
        raise ad.ShapeError(f"cosine_map: map {V.shape} vs query {q.shape}")
    qn = ad.reshape(ad.l2_normalize(q), (B, D, 1))
    return ad.reshape(ad.matmul(ad.l2_normalize(V), qn), (B, HW))


def subject_map(V: Tensor, q_sub: Tensor) -> Tensor:
    return cosine_map(V, q_sub)


def margin_terms(d_pos: Tensor, d_neg_cell: Tensor, d_neg_query: Tensor | None,
                 margin: float = MARGIN) -> Tensor:
    """Hinge terms of the bidirectional ranking loss, averaged over the batch."""
    loss = ad.relu(ad.shift(ad.sub(d_neg_cell, d_pos), margin))
    if d_neg_query is not None:
        loss = ad.add(loss, ad.relu(ad.shift(ad.sub(d_neg_query, d_pos), margin)))
    return ad.mean(loss)


def sample_negatives(rng, groups, n_cells, gt_cells):
    """Draw one negative cell and one negative query per batch element.

    Both come from batch elements of a different group (video). When no such
    element exists the negative cell is drawn from the same frame, at least two
    cells (Chebyshev) from the ground truth, and the query term is dropped
    (``query_src`` is None).
    """
    global _fallback_logged
    groups = np.asarray(groups)
    B = len(groups)
    cell_src = np.empty(B, dtype=np.intp)
    query_src = np.empty(B, dtype=np.intp)
    cells = np.empty(B, dtype=np.intp)
    side = int(round(np.sqrt(n_cells)))
    fallback = False
    for b in range(B):
        others = np.flatnonzero(groups != groups[b])
        if len(others) == 0:
            fallback = True
            break
        cell_src[b] = rng.choice(others)
        query_src[b] = rng.choice(others)
        cells[b] = rng.integers(n_cells)
    if not fallback:
        return cell_src, cells, query_src
    if not _fallback_logged:
        log.warning("rank loss: no cross-video negatives in batch, using in-frame negatives")
        _fallback_logged = True
    for b in range(B):
        gi, gj = divmod(int(gt_cells[b]), side)
        ii, jj = np.divmod(np.arange(n_cells), side)
        far = np.flatnonzero(np.maximum(abs(ii - gi), abs(jj - gj)) >= 2)
        if len(far) == 0:
            far = np.flatnonzero(np.arange(n_cells) != gt_cells[b])
        cell_src[b] = b
        cells[b] = rng.choice(far) if len(far) else gt_cells[b]
    return cell_src, cells, None


def rank_loss(V: Tensor, q_sub: Tensor, gt_cells, cell_src, neg_cells, query_src,
              margin: float = MARGIN) -> Tensor:
    """Margin ranking loss between matched and sampled unmatched (cell, query) pairs."""
    B, HW, D = V.shape
    Vn = ad.reshape(ad.l2_normalize(V), (B * HW, D))
    qn = ad.l2_normalize(q_sub)
    rows = np.arange(B)
    v_pos = ad.gather(Vn, rows * HW + np.asarray(gt_cells), axis=0)
    v_neg = ad.gather(Vn, np.asarray(cell_src) * HW + np.asarray(neg_cells), axis=0)
    d_pos = ad.sum(ad.mul(v_pos, qn), axis=-1)
    d_cell = ad.sum(ad.mul(v_neg, qn), axis=-1)
    d_query = None
    if query_src is not None:
        d_query = ad.sum(ad.mul(v_pos, ad.gather(qn, query_src, axis=0)), axis=-1)
    return margin_terms(d_pos, d_cell, d_query, margin)


def location_affinity(U: Tensor) -> Tensor:
    """``(HW, HW)`` inner products between every pair of cell coordinate features."""
    return ad.matmul(U, ad.transpose(U))


def location_features(A: Tensor, S: Tensor, fc_w: Tensor, fc_b: Tensor) -> Tensor:
    """Scale column ``y`` of ``A`` by ``S[y]`` and map each row HW -> D."""
    B, HW = S.shape
    if A.shape != (HW, HW) or fc_w.shape[0] != HW:
        raise ad.ShapeError(
            f"location_features: affinity {A.shape}, subject map {S.shape}, fc {fc_w.shape}")
    scaled = ad.mul(ad.repeat(A, B, axis=0), ad.repeat(S, HW, axis=1))
    return ad.add(ad.matmul(scaled, fc_w), fc_b)


def location_map(U_tilde: Tensor, q_loc: Tensor) -> Tensor:
    return cosine_map(U_tilde, q_loc)


def location_ce_loss(L: Tensor, gt_cells, tau: float = TEMPERATURE) -> Tensor:
    """Cross-entropy of the tempered softmax over cells at the ground-truth cell."""
    B, HW = L.shape
    logp = ad.log_softmax(ad.scale(L, 1.0 / tau))
    picked = ad.gather(ad.reshape(logp, (B * HW,)), np.arange(B) * HW + np.asarray(gt_cells), axis=0)
    return ad.scale(ad.mean(picked), -1.0)


def to_unit(score):
    """Map a cosine score from [-1, 1] to [0, 1]."""
    return (1.0 + np.asarray(score, dtype=float)) / 2.0


def fuse_confidence(O, S=None, L=None):
    """``C = O * (1+S)/2 * (1+L)/2`` with S, L broadcast over anchors.

    ``O`` is ``(..., HW, A)``; ``S`` and ``L`` are ``(..., HW)``. A missing map
    contributes a factor of one.
    """
    C = np.asarray(O, dtype=float).copy()
    for m in (S, L):
        if m is not None:
            C = C * to_unit(m)[..., None]
    return C
