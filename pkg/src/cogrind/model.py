"""The grounding network: text and visual encoders, optional co-grounding,
semantic attention and the grid head, wired per ablation mode.

Modes (case-insensitive, ``_`` or ``-``): ``baseline``, ``s-att``, ``sl-att``
and their ``cg-`` variants. ``baseline`` feeds the mean BiLSTM state to the
head and ranks boxes by objectness only; ``s-att`` adds the subject map and
ranking loss; ``sl-att`` adds the location map and its cross-entropy.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import autodiff as ad
from . import cogrounding as cg
from . import head as hd
from . import text as tx
from . import visual as vis
from .autodiff import Tensor
from .params import glorot, merge, subset

MODES = ("baseline", "s-att", "sl-att", "cg-baseline", "cg-s-att", "cg-sl-att")


def parse_mode(mode: str) -> str:
    m = mode.strip().lower().replace("_", "-").replace(".", "")
    if m not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    return m


def mode_flags(mode: str):
    """``(co_grounding, subject, location)`` switches of a mode."""
    m = parse_mode(mode)
    core = m[3:] if m.startswith("cg-") else m
    return m.startswith("cg-"), core in ("s-att", "sl-att"), core == "sl-att"


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: tuple = (16, 32, 64, 64)
    embed_dim: int = 64
    hidden_dim: int = 64
    taps: tuple = ()  # backbone blocks used as prediction levels; () = last block
    anchors: tuple = (hd.DEFAULT_ANCHORS,)  # one anchor set per level
    mode: str = "sl-att"

    def __post_init__(self):
        self.mode = parse_mode(self.mode)
        self.channels = tuple(int(c) for c in self.channels)
        if not self.taps:
            self.taps = (len(self.channels) - 1,)
        self.taps = tuple(int(t) for t in self.taps)
        self.anchors = tuple(tuple(tuple(float(v) for v in a) for a in lvl) for lvl in self.anchors)
        if len(self.anchors) != len(self.taps):
            raise ValueError(f"{len(self.taps)} prediction levels but {len(self.anchors)} anchor sets")

    @property
    def dim(self):
        return self.channels[-1]

    @property
    def grids(self):
        return tuple((g, g) for g in (vis.grid_size(self.image_size, t) for t in self.taps))

    @property
    def layout(self):
        return hd.Layout(self.grids, self.anchors)

    @property
    def flags(self):
        return mode_flags(self.mode)


def _stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per parameter group, so changing one group's
    initializer never shifts the draws of another."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_params(cfg: ModelConfig, vocab_size: int, seed: int = 0):
    """Seeded parameter dict for every mode (unused branches stay untouched)."""
    D = cfg.dim
    p = {}
    merge(p, "text", tx.init_text_params(_stream(seed, "text"), vocab_size, cfg.embed_dim, cfg.hidden_dim))
    p["text.proj_sent.w"] = glorot(_stream(seed, "text.proj_sent"), (2 * cfg.hidden_dim, D))
    merge(p, "backbone", vis.init_backbone_params(_stream(seed, "backbone"), cfg.channels, taps=cfg.taps, out_dim=D))
    merge(p, "att", att.init_attention_params(_stream(seed, "att"), cfg.embed_dim, D))
    for lvl, (H, W) in enumerate(cfg.grids):
        merge(p, f"coord{lvl}", vis.init_coord_params(_stream(seed, f"coord{lvl}"), D))
        merge(p, f"loc{lvl}", att.init_location_params(_stream(seed, f"loc{lvl}"), H * W, D))
        merge(p, f"cg{lvl}", cg.init_cogrounding_params(_stream(seed, f"cg{lvl}"), D))
        merge(p, f"head{lvl}", hd.init_head_params(_stream(seed, f"head{lvl}"), D, D, D, len(cfg.anchors[lvl])))
    return p


@dataclass
class LevelOutput:
    V: Tensor  # (B, HW, D) visual map after optional co-grounding
    S: Tensor | None  # (B, HW)
    L: Tensor | None  # (B, HW)
    raw: Tensor  # (B, HW, A, 5)


@dataclass
class Outputs:
    levels: list
    q_sub: Tensor | None  # (B, D) projected subject query
    raw_all: Tensor  # (B, n_slots, 5)
    alphas: dict = field(default_factory=dict)


class GroundingNet:
    def __init__(self, cfg: ModelConfig, params):
        self.cfg = cfg
        self.params = params

    # -------------------------------------------------------------- pieces

    def frame_features(self, images) -> list:
        """Backbone maps per level, flattened to ``(B, HW, D)``."""
        maps = vis.backbone_forward(images, subset(self.params, "backbone"), taps=self.cfg.taps,
                                    image_size=self.cfg.image_size)
        return [ad.reshape(m, (m.shape[0], m.shape[1] * m.shape[2], m.shape[3])) for m in maps]

    def text_features(self, token_lists):
        tp = subset(self.params, "text")
        enc = tx.encode_batch(token_lists, tp)
        a_sub, q_sub = tx.attribute_attention(enc, "sub", tp)
        a_loc, q_loc = tx.attribute_attention(enc, "loc", tp)
        q_sub_p = ad.matmul(q_sub, self.params["att.proj_sub.w"])
        q_loc_p = ad.matmul(q_loc, self.params["att.proj_loc.w"])
        sent = ad.matmul(tx.sentence_feature(enc), self.params["text.proj_sent.w"])
        return {"q_sub": q_sub_p, "q_loc": q_loc_p, "sentence": sent,
                "alpha_sub": a_sub, "alpha_loc": a_loc}

    def coordinate_maps(self):
        out = []
        for lvl, (H, W) in enumerate(self.cfg.grids):
            U = vis.coordinate_features(H, W, subset(self.params, f"coord{lvl}"))
            out.append(ad.reshape(U, (H * W, -1)))
        return out

    def heads(self, V_levels, text) -> Outputs:
        """Attention maps and raw predictions from per-level visual maps."""
        _, use_s, use_l = self.cfg.flags
        if use_s:
            qa, qb = text["q_sub"], text["q_loc"]
        else:
            qa = qb = text["sentence"]
        levels, raws = [], []
        for lvl, (V, U) in enumerate(zip(V_levels, self.coordinate_maps())):
            S = L = None
            if use_s:
                S = att.subject_map(V, text["q_sub"])
            if use_l:
                A = att.location_affinity(U)
                U_t = att.location_features(A, S, self.params[f"loc{lvl}.fc.w"], self.params[f"loc{lvl}.fc.b"])
                L = att.location_map(U_t, text["q_loc"])
            hp = subset(self.params, f"head{lvl}")
            raw = hd.head_forward(hd.fuse_features(V, qa, qb, U, hp), hp)
            B, HW, A_, _ = raw.shape
            raws.append(ad.reshape(raw, (B, HW * A_, 5)))
            levels.append(LevelOutput(V, S, L, raw))
        raw_all = raws[0] if len(raws) == 1 else ad.concat(raws, axis=1)
        return Outputs(levels, text["q_sub"] if use_s else None, raw_all,
                       {"sub": text["alpha_sub"], "loc": text["alpha_loc"]})

    # -------------------------------------------------------------- entry points

    def forward_frames(self, images, token_lists) -> Outputs:
        """Single-frame forward (non co-grounding modes)."""
        return self.heads(self.frame_features(images), self.text_features(token_lists))

    def forward_pairs(self, images_a, images_b, token_lists) -> Outputs:
        """Training forward on frame pairs; outputs stack the a-frames then the b-frames."""
        B = len(token_lists)
        F = self.frame_features(np.concatenate([images_a, images_b]))
        text = self.text_features(token_lists)
        twice = np.concatenate([np.arange(B), np.arange(B)])
        text2 = {k: ad.gather(v, twice, axis=0) for k, v in text.items()}
        V_levels = []
        for lvl, f in enumerate(F):
            Fa = ad.gather(f, np.arange(B), axis=0)
            Fb = ad.gather(f, np.arange(B, 2 * B), axis=0)
            if self.cfg.flags[0]:
                Va, Vb = cg.enhance_pair(Fa, Fb, subset(self.params, f"cg{lvl}"))
                V_levels.append(ad.concat([Va, Vb], axis=0))
            else:
                V_levels.append(f)
        return self.heads(V_levels, text2)

    def forward_video(self, images, tokens, stride=1) -> Outputs:
        """Inference over all frames of one video; co-grounding pairs t with t - stride."""
        T = len(images)
        F = self.frame_features(images)
        text = self.text_features([list(tokens)])
        text = {k: ad.gather(v, np.zeros(T, dtype=np.intp), axis=0) for k, v in text.items()}
        if self.cfg.flags[0]:
            partners = cg.inference_partners(T, stride)
            F = [cg.enhance_one(f, ad.gather(f, partners, axis=0), subset(self.params, f"cg{lvl}"))
                 for lvl, f in enumerate(F)]
        return self.heads(F, text)

    # -------------------------------------------------------------- decoding

    def scores(self, out: Outputs):
        """Per-slot ``(objectness, fused confidence)`` arrays of shape (B, n_slots)."""
        O_all, C_all = [], []
        for lvl, lo in enumerate(out.levels):
            _, obj = hd.decode_grid(lo.raw.data, self.cfg.grids[lvl], self.cfg.anchors[lvl])
            S = None if lo.S is None else lo.S.data
            L = None if lo.L is None else lo.L.data
            C = att.fuse_confidence(obj, S, L)
            O_all.append(obj.reshape(obj.shape[0], -1))
            C_all.append(C.reshape(C.shape[0], -1))
        return np.concatenate(O_all, axis=1), np.concatenate(C_all, axis=1)

    def results(self, out: Outputs) -> list:
        """One :class:`~cogrind.head.GroundingResult` per batch element."""
        boxes = []
        for lvl, lo in enumerate(out.levels):
            b, _ = hd.decode_grid(lo.raw.data, self.cfg.grids[lvl], self.cfg.anchors[lvl])
            boxes.append(b.reshape(b.shape[0], -1, 4))
        boxes = np.concatenate(boxes, axis=1)
        O, C = self.scores(out)
        level, cell, anchor = self.cfg.layout.slot_info()
        res = []
        for i in range(len(boxes)):
            clipped = np.array([hd.clip_box(b) for b in boxes[i]])
            res.append(hd.GroundingResult(clipped, O[i], C[i], level, cell, anchor))
        return res
