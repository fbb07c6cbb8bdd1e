"""Deterministic toy videos: moving flat-colored shapes plus a referring expression.

Frames are uint8 RGB on a black canvas, rasterized without anti-aliasing so
every ground-truth box is the exact bounding box of the target's mask. Every
shape keeps its center in its own grid cell on every frame, and shapes never
touch, so each video is solvable by a one-stage grid model.

Ambiguity classes:

* ``unique-attribute``: "the <color> <shape>"; color+kind is unique.
* ``location-only``: "<color> <shape> on the <side>"; two identical shapes
  that differ only by position.
* ``multi-entity-distractor``: "<shape> near the <color> <shape>"; the second
  mention is a distractor, the target's kind is unique.
* ``occlusion``: as unique-attribute, but a gray block hides the target for
  1-3 consecutive frames (its box is still annotated).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .text import Vocabulary, split_words

KINDS = ("square", "circle", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
SIDES = ("left", "right", "top", "bottom")
FLIP_SWAP = {"left": "right", "right": "left"}
OCCLUDER = (128, 128, 128)
CLASSES = ("unique-attribute", "location-only", "multi-entity-distractor", "occlusion")
WORDS = ("the", "on", "near") + tuple(COLORS) + KINDS + SIDES


class GenerationError(RuntimeError):
    pass


def synthetic_vocab() -> Vocabulary:
    return Vocabulary(WORDS)


@dataclass
class ShapeSpec:
    kind: str
    color: str
    size: int
    start: tuple  # top-left (x, y) at frame 0
    velocity: tuple
    jitter: float
    z: int
    positions: list = field(default_factory=list)  # per-frame integer top-left (x, y)


@dataclass
class SyntheticSample:
    video_id: str
    frames: np.ndarray  # (T, S, S, 3) uint8
    expression: str
    target_id: int
    shapes: list
    gt_tube: np.ndarray  # (T, 4) x1, y1, x2, y2 pixels, x2/y2 exclusive
    ambiguity_class: str
    occluded: np.ndarray  # (T,) bool

    @property
    def tokens(self):
        return split_words(self.expression)

    def images(self) -> np.ndarray:
        return self.frames.astype(np.float64) / 255.0


@dataclass
class GeneratorConfig:
    num_videos: int = 100
    T: int = 8
    canvas: int = 64
    cell: int = 16
    shapes_per_scene: tuple = (2, 3)
    size_range: tuple = (10, 18)
    max_speed: float = 1.5
    jitter: float = 0.5
    gap: int = 3
    mix: dict = field(default_factory=lambda: {c: 0.25 for c in CLASSES})
    max_tries: int = 500


# ---------------------------------------------------------------- rendering


def shape_mask(kind: str, size: int, x0: int, y0: int, canvas: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    px, py = xx + 0.5, yy + 0.5
    inside = (xx >= x0) & (xx < x0 + size) & (yy >= y0) & (yy < y0 + size)
    if kind == "square":
        return inside
    if kind == "circle":
        c = size / 2.0
        return inside & ((px - x0 - c) ** 2 + (py - y0 - c) ** 2 <= c * c)
    if kind == "triangle":
        half = (py - y0) / size * (size / 2.0)
        return inside & (np.abs(px - x0 - size / 2.0) <= half + 0.5)
    raise ValueError(f"unknown shape kind {kind!r}")


def mask_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=float)


def render_frame(shapes, t, canvas, occluders=()):
    img = np.zeros((canvas, canvas, 3), dtype=np.uint8)
    for s in sorted(shapes, key=lambda s: s.z):
        x0, y0 = s.positions[t]
        img[shape_mask(s.kind, s.size, x0, y0, canvas)] = COLORS[s.color]
    for x1, y1, x2, y2 in occluders:
        img[int(y1):int(y2), int(x1):int(x2)] = OCCLUDER
    return img


# ---------------------------------------------------------------- scenes


def _trajectory(rng, size, cfg: GeneratorConfig):
    hi = cfg.canvas - size
    start = (int(rng.integers(0, hi + 1)), int(rng.integers(0, hi + 1)))
    vel = tuple(rng.uniform(-cfg.max_speed, cfg.max_speed, size=2))
    t = np.arange(cfg.T)[:, None]
    pos = np.asarray(start) + t * np.asarray(vel) + rng.normal(0.0, cfg.jitter, size=(cfg.T, 2))
    pos = np.clip(np.rint(pos), 0, hi).astype(int)
    return start, vel, [tuple(map(int, p)) for p in pos]


def _centers(shape):
    return np.array([(x + shape.size / 2.0, y + shape.size / 2.0) for x, y in shape.positions])


def _valid(shapes, cfg: GeneratorConfig):
    n_grid = cfg.canvas // cfg.cell
    for t in range(cfg.T):
        cells = set()
        for s in shapes:
            cx, cy = _centers(s)[t]
            cell = (min(int(cy // cfg.cell), n_grid - 1), min(int(cx // cfg.cell), n_grid - 1))
            if cell in cells:
                return False
            cells.add(cell)
        for a in range(len(shapes)):
            xa, ya = shapes[a].positions[t]
            for b in range(a + 1, len(shapes)):
                xb, yb = shapes[b].positions[t]
                sa, sb = shapes[a].size, shapes[b].size
                if (xa < xb + sb + cfg.gap and xb < xa + sa + cfg.gap
                        and ya < yb + sb + cfg.gap and yb < ya + sa + cfg.gap):
                    return False
    return True


def _side_holds(target, twin, side, margin):
    ct, cw = _centers(target), _centers(twin)
    if side == "left":
        return np.all(cw[:, 0] - ct[:, 0] >= margin)
    if side == "right":
        return np.all(ct[:, 0] - cw[:, 0] >= margin)
    if side == "top":
        return np.all(cw[:, 1] - ct[:, 1] >= margin)
    return np.all(ct[:, 1] - cw[:, 1] >= margin)


def _pick_attrs(rng, n, forbid=()):
    """``n`` distinct (color, kind) pairs avoiding ``forbid``."""
    pool = [(c, k) for c in COLORS for k in KINDS if (c, k) not in set(forbid)]
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def _scene_attrs(rng, cls, n_shapes):
    """Return (attrs list, target index, expression template fields)."""
    if cls in ("unique-attribute", "occlusion"):
        color, kind = _pick_attrs(rng, 1)[0]
        # distractors share one attribute with the target half of the time
        others = []
        forbid = {(color, kind)}
        for _ in range(n_shapes - 1):
            if rng.random() < 0.5:
                pool = [(c, kind) for c in COLORS if (c, kind) not in forbid] + \
                       [(color, k) for k in KINDS if (color, k) not in forbid]
                a = pool[int(rng.integers(len(pool)))]
            else:
                a = _pick_attrs(rng, 1, forbid)[0]
            forbid.add(a)
            others.append(a)
        return [(color, kind)] + others, 0, {"color": color, "kind": kind}
    if cls == "location-only":
        color, kind = _pick_attrs(rng, 1)[0]
        extra = _pick_attrs(rng, max(0, n_shapes - 2), {(color, kind)})
        side = SIDES[int(rng.integers(len(SIDES)))]
        return [(color, kind), (color, kind)] + extra, 0, {"color": color, "kind": kind, "side": side}
    if cls == "multi-entity-distractor":
        kinds = list(rng.permutation(KINDS))
        t_kind, a_kind = kinds[0], kinds[1]
        t_color = list(COLORS)[int(rng.integers(len(COLORS)))]
        a_color = list(COLORS)[int(rng.integers(len(COLORS)))]
        attrs = [(t_color, t_kind), (a_color, a_kind)]
        for _ in range(n_shapes - 2):
            pool = [(c, k) for c in COLORS for k in KINDS if k != t_kind and (c, k) not in attrs]
            attrs.append(pool[int(rng.integers(len(pool)))])
        return attrs, 0, {"kind": t_kind, "anchor_color": a_color, "anchor_kind": a_kind}
    raise ValueError(f"unknown ambiguity class {cls!r}")


def expression_grammar(cls, fields) -> str:
    if cls in ("unique-attribute", "occlusion"):
        return f"the {fields['color']} {fields['kind']}"
    if cls == "location-only":
        return f"{fields['color']} {fields['kind']} on the {fields['side']}"
    return f"{fields['kind']} near the {fields['anchor_color']} {fields['anchor_kind']}"


def make_video(rng, video_id, cls, cfg: GeneratorConfig) -> SyntheticSample:
    lo, hi = cfg.shapes_per_scene
    n_min = 2 if cls in ("location-only", "multi-entity-distractor") else 1
    n_shapes = max(n_min, int(rng.integers(lo, hi + 1)))
    if n_shapes > (cfg.canvas // cfg.cell) ** 2 // 2:
        raise GenerationError(f"{n_shapes} shapes do not fit a {cfg.canvas}px canvas")
    attrs, target, fields = _scene_attrs(rng, cls, n_shapes)
    for _ in range(cfg.max_tries):
        shapes = []
        for z, (color, kind) in enumerate(attrs):
            size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
            start, vel, pos = _trajectory(rng, size, cfg)
            shapes.append(ShapeSpec(kind, color, size, start, vel, cfg.jitter, z, pos))
        if not _valid(shapes, cfg):
            continue
        if cls == "location-only" and not _side_holds(shapes[0], shapes[1], fields["side"], cfg.cell * 0.75):
            continue
        break
    else:
        raise GenerationError(f"could not place {n_shapes} shapes for {cls} in {cfg.max_tries} tries")

    tgt = shapes[target]
    gt = np.stack([mask_box(shape_mask(tgt.kind, tgt.size, x, y, cfg.canvas)) for x, y in tgt.positions])
    occluded = np.zeros(cfg.T, dtype=bool)
    if cls == "occlusion":
        length = int(rng.integers(1, min(3, cfg.T - 1) + 1))
        first = int(rng.integers(0, cfg.T - length + 1))
        occluded[first:first + length] = True
    frames = []
    for t in range(cfg.T):
        occ = []
        if occluded[t]:
            x1, y1, x2, y2 = gt[t]
            occ.append((max(0, x1 - 1), max(0, y1 - 1), min(cfg.canvas, x2 + 1), min(cfg.canvas, y2 + 1)))
        frames.append(render_frame(shapes, t, cfg.canvas, occ))
    return SyntheticSample(video_id, np.stack(frames), expression_grammar(cls, fields), target,
                           shapes, gt, cls, occluded)


def _class_schedule(rng, n, mix):
    names = [c for c in CLASSES if mix.get(c, 0) > 0]
    unknown = set(mix) - set(CLASSES)
    if unknown:
        raise ValueError(f"unknown ambiguity classes {sorted(unknown)}")
    w = np.array([mix[c] for c in names], dtype=float)
    w = w / w.sum()
    counts = np.floor(w * n).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(w * n - counts), kind="stable")
    counts[order[:rest]] += 1
    sched = [c for c, k in zip(names, counts) for _ in range(k)]
    return [sched[i] for i in rng.permutation(n)]


def generate(seed: int, cfg: GeneratorConfig | None = None, **overrides) -> list:
    """Generate ``cfg.num_videos`` samples; identical (seed, cfg) give identical data."""
    cfg = GeneratorConfig(**overrides) if cfg is None else cfg
    if cfg.canvas % cfg.cell or cfg.size_range[1] >= cfg.canvas:
        raise GenerationError("invalid canvas/cell/size configuration")
    classes = _class_schedule(np.random.default_rng([seed, 0]), cfg.num_videos, cfg.mix)
    return [make_video(np.random.default_rng([seed, 1, i]), f"v{i:05d}", cls, cfg)
            for i, cls in enumerate(classes)]


# ---------------------------------------------------------------- oracle


def resolve_expression(expression: str, shapes) -> int:
    """Rule-based reading of the grammar: index of the referred shape."""
    w = split_words(expression)
    if "near" in w:
        kind = w[w.index("near") - 1]
        hits = [i for i, s in enumerate(shapes) if s.kind == kind]
    elif "on" in w:
        color, kind, side = w[0], w[1], w[-1]
        cand = [i for i, s in enumerate(shapes) if s.kind == kind and s.color == color]
        c = {i: _centers(shapes[i]).mean(axis=0) for i in cand}
        key = {"left": lambda i: c[i][0], "right": lambda i: -c[i][0],
               "top": lambda i: c[i][1], "bottom": lambda i: -c[i][1]}[side]
        hits = [min(cand, key=key)]
    else:
        color, kind = w[-2], w[-1]
        hits = [i for i, s in enumerate(shapes) if s.kind == kind and s.color == color]
    if len(hits) != 1:
        raise ValueError(f"expression {expression!r} does not pick a unique shape")
    return hits[0]


# ---------------------------------------------------------------- disk format


def save_dataset(samples, root, png=False, cfg: GeneratorConfig | None = None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    vocab = synthetic_vocab()
    manifest = []
    for s in samples:
        d = root / s.video_id
        d.mkdir(exist_ok=True)
        if png:
            from PIL import Image

            for t, f in enumerate(s.frames):
                Image.fromarray(f).save(d / f"frame_{t:03d}.png")
        else:
            np.save(d / "frames.npy", s.frames)
        manifest.append({
            "video_id": s.video_id,
            "expression": s.expression,
            "tokens": s.tokens,
            "token_ids": [vocab.id(t) for t in s.tokens],
            "gt_tube": s.gt_tube.tolist(),
            "ambiguity_class": s.ambiguity_class,
            "occluded": s.occluded.astype(int).tolist(),
            "target_id": s.target_id,
            "shapes": [asdict(sh) for sh in s.shapes],
            "canvas": int(s.frames.shape[1]),
            "format": "png" if png else "npy",
        })
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    vocab.save(root / "vocab.txt")
    if cfg is not None:
        (root / "generator.json").write_text(json.dumps(asdict(cfg), indent=1) + "\n")
    return root


def load_dataset(root) -> list:
    root = Path(root)
    records = json.loads((root / "manifest.json").read_text())
    out = []
    for r in records:
        d = root / r["video_id"]
        if r.get("format") == "png":
            from PIL import Image

            files = sorted(d.glob("frame_*.png"))
            frames = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
        else:
            frames = np.load(d / "frames.npy")
        shapes = [ShapeSpec(**{**sh, "start": tuple(sh["start"]), "velocity": tuple(sh["velocity"]),
                               "positions": [tuple(p) for p in sh["positions"]]}) for sh in r["shapes"]]
        out.append(SyntheticSample(r["video_id"], frames, r["expression"], r["target_id"], shapes,
                                   np.asarray(r["gt_tube"], dtype=float), r["ambiguity_class"],
                                   np.asarray(r["occluded"], dtype=bool)))
    return out
