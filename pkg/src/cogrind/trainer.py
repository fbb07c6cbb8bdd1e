"""Training and inference loops.

All randomness (initialization, batch order, flips, negative sampling) comes
from numpy generators seeded by ``TrainConfig.seed``, so a run is a pure
function of its config and data.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import attention as att
from . import autodiff as ad
from . import head as hd
from .metrics import cxcywh_to_xyxy, evaluate
from .model import GroundingNet, ModelConfig, init_params, parse_mode
from .params import zero_grads
from .postprocess import gather_topk, stabilize_video
from .synthetic import FLIP_SWAP, synthetic_vocab
from .text import Vocabulary

log = logging.getLogger(__name__)

# batch sizes used for VID-Sentence, Lingual OTB99 and RefCOCO
DATASET_BATCH_SIZES = {"vid": 32, "liotb": 8, "refcoco": 32}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "sl-att"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    lr_power: float = 0.9
    lambda_rank: float = 100.0
    lambda_ce: float = 1.0
    margin: float = att.MARGIN
    tau: float = att.TEMPERATURE
    rho: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    flip: bool = True
    max_gap: int = 8
    frames_per_video: int = 0  # frames drawn per video and epoch; 0 = every frame once
    eval_every: int = 1  # epochs between held-out evaluations (0 = never)

    def __post_init__(self):
        self.mode = parse_mode(self.mode)


# ---------------------------------------------------------------- optimizer


def poly_lr(step: int, total_steps: int, lr0: float, power: float = 0.9) -> float:
    frac = min(max(step / total_steps, 0.0), 1.0) if total_steps > 0 else 1.0
    return lr0 * (1.0 - frac) ** power


def rmsprop_step(params, state, lr, rho=0.99, eps=1e-8):
    """In-place RMSProp update from ``p.grad``; ``state`` maps names to accumulators."""
    for name, p in params.items():
        g = p.grad
        acc = state.get(name)
        if acc is None:
            acc = state[name] = np.zeros_like(p.data)
        if g is None:
            acc *= rho
            continue
        acc *= rho
        acc += (1.0 - rho) * g * g
        p.data -= lr * g / np.sqrt(acc + eps)
    return state


# ---------------------------------------------------------------- batches


def sample_box(sample, t, flip=False):
    """Ground truth of frame ``t`` as a normalized (cx, cy, w, h) box."""
    S = sample.frames.shape[1]
    x1, y1, x2, y2 = sample.gt_tube[t]
    if flip:
        x1, x2 = S - x2, S - x1
    return np.array([(x1 + x2) / 2 / S, (y1 + y2) / 2 / S, (x2 - x1) / S, (y2 - y1) / S])


def flip_tokens(token_ids, vocab: Vocabulary):
    swap = {vocab.id(a): vocab.id(b) for a, b in FLIP_SWAP.items()}
    return [swap.get(t, t) for t in token_ids]


def _picks(rng, samples, tcfg: TrainConfig, pairs: bool):
    picks = []
    for v in range(len(samples)):
        T = len(samples[v].frames)
        if tcfg.frames_per_video > 0:
            frames = [int(rng.integers(T)) for _ in range(tcfg.frames_per_video)]
        else:
            frames = range(T)
        for ta in frames:
            tb = None
            if pairs:
                lo, hi = max(0, ta - tcfg.max_gap), min(T - 1, ta + tcfg.max_gap)
                choices = [t for t in range(lo, hi + 1) if t != ta] or [ta]
                tb = int(choices[rng.integers(len(choices))])
            picks.append((v, ta, tb))
    order = rng.permutation(len(picks))
    return [picks[i] for i in order]


def _degenerate(sample, t):
    x1, y1, x2, y2 = sample.gt_tube[t]
    return (x2 - x1) <= 1 or (y2 - y1) <= 1


def assemble(samples, picks, vocab, rng, flip: bool):
    """Images, tokens, boxes and group ids for a list of ``(video, t_a, t_b)`` picks."""
    imgs_a, imgs_b, toks, boxes_a, boxes_b, groups = [], [], [], [], [], []
    for v, ta, tb in picks:
        s = samples[v]
        if _degenerate(s, ta) or (tb is not None and _degenerate(s, tb)):
            log.warning("skipping degenerate ground truth in %s", s.video_id)
            continue
        f = flip and rng.random() < 0.5
        ids = [vocab.id(w) for w in s.tokens]
        img = s.frames.astype(np.float64) / 255.0
        if f:
            img = img[:, :, ::-1]
            ids = flip_tokens(ids, vocab)
        imgs_a.append(img[ta])
        boxes_a.append(sample_box(s, ta, f))
        if tb is not None:
            imgs_b.append(img[tb])
            boxes_b.append(sample_box(s, tb, f))
        toks.append(ids)
        groups.append(v)
    batch = {"images_a": np.stack(imgs_a), "tokens": toks, "boxes_a": np.stack(boxes_a),
             "groups": np.array(groups)}
    if imgs_b:
        batch["images_b"] = np.stack(imgs_b)
        batch["boxes_b"] = np.stack(boxes_b)
    return batch


# ---------------------------------------------------------------- losses


def total_loss(model: GroundingNet, out, boxes, groups, rng, tcfg: TrainConfig):
    """Weighted sum of the active loss terms; returns ``(loss, {term: value})``."""
    _, use_s, use_l = model.cfg.flags
    layout = model.cfg.layout
    slots, targets = zip(*(hd.regression_targets(layout, b) for b in boxes))
    l_reg = hd.reg_loss(out.raw_all, slots, np.stack(targets))
    l_cls = hd.cls_loss(hd.objectness_logits(out.raw_all), slots)
    loss = ad.add(l_reg, l_cls)
    terms = {"reg": l_reg.item(), "cls": l_cls.item()}
    if use_s:
        ranks, ces = [], []
        for lvl, lo in enumerate(out.levels):
            H, W = model.cfg.grids[lvl]
            cells = np.array([np.dot(layout.cell_of(lvl, b[0], b[1]), (W, 1)) for b in boxes])
            src, neg, qsrc = att.sample_negatives(rng, groups, H * W, cells)
            ranks.append(att.rank_loss(lo.V, out.q_sub, cells, src, neg, qsrc, tcfg.margin))
            if use_l:
                ces.append(att.location_ce_loss(lo.L, cells, tcfg.tau))
        l_rank = ranks[0] if len(ranks) == 1 else ad.mean(ad.concat([ad.reshape(r, (1,)) for r in ranks]))
        loss = ad.add(loss, ad.scale(l_rank, tcfg.lambda_rank))
        terms["rank"] = l_rank.item()
        if use_l:
            l_ce = ces[0] if len(ces) == 1 else ad.mean(ad.concat([ad.reshape(c, (1,)) for c in ces]))
            loss = ad.add(loss, ad.scale(l_ce, tcfg.lambda_ce))
            terms["ce"] = l_ce.item()
    terms["total"] = loss.item()
    return loss, terms


def batch_loss(model, batch, rng, tcfg):
    if "images_b" in batch:
        out = model.forward_pairs(batch["images_a"], batch["images_b"], batch["tokens"])
        boxes = np.concatenate([batch["boxes_a"], batch["boxes_b"]])
        groups = np.concatenate([batch["groups"], batch["groups"]])
    else:
        out = model.forward_frames(batch["images_a"], batch["tokens"])
        boxes, groups = batch["boxes_a"], batch["groups"]
    return total_loss(model, out, boxes, groups, rng, tcfg)


# ---------------------------------------------------------------- training


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def to_csv(self, path):
        keys = []
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for r in self.rows:
                fh.write(",".join("" if r.get(k) is None else _fmt(r[k]) for k in keys) + "\n")


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def build_model(mcfg: ModelConfig, vocab_size: int, seed: int) -> GroundingNet:
    return GroundingNet(mcfg, init_params(mcfg, vocab_size, seed))


def train(tcfg: TrainConfig, mcfg: ModelConfig, train_samples, val_samples=None,
          vocab: Vocabulary | None = None, progress=None, checkpoint_path=None):
    """Train from scratch; returns ``(model, history)``.

    On a non-finite loss the last good parameters are written to
    ``checkpoint_path`` (when given) and :class:`TrainingDiverged` is raised.
    """
    from .io import save_checkpoint

    vocab = synthetic_vocab() if vocab is None else vocab
    mcfg.mode = tcfg.mode
    model = build_model(mcfg, len(vocab), tcfg.seed)
    pairs = mcfg.flags[0]
    order_rng = np.random.default_rng([tcfg.seed, 1])
    aug_rng = np.random.default_rng([tcfg.seed, 2])
    neg_rng = np.random.default_rng([tcfg.seed, 3])
    n_items = sum(len(s.frames) if tcfg.frames_per_video <= 0 else tcfg.frames_per_video
                  for s in train_samples)
    steps_per_epoch = math.ceil(n_items / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    state = {}
    history = History()
    step = 0
    good = {k: p.data.copy() for k, p in model.params.items()}
    for epoch in range(tcfg.epochs):
        t0 = time.time()
        picks = _picks(order_rng, train_samples, tcfg, pairs)
        sums = {}
        nb = 0
        for s in range(0, len(picks), tcfg.batch_size):
            batch = assemble(train_samples, picks[s:s + tcfg.batch_size], vocab, aug_rng, tcfg.flip)
            lr = poly_lr(step, total_steps, tcfg.lr, tcfg.lr_power)
            zero_grads(model.params)
            try:
                with ad.Tape():
                    loss, terms = batch_loss(model, batch, neg_rng, tcfg)
                    ad.backward(loss)
            except ad.NumericOverflowError as exc:
                _diverged(model, good, checkpoint_path, save_checkpoint, exc)
            if not np.isfinite(terms["total"]):
                _diverged(model, good, checkpoint_path, save_checkpoint, "non-finite loss")
            good = {k: p.data.copy() for k, p in model.params.items()}
            rmsprop_step(model.params, state, lr, tcfg.rho, tcfg.eps)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
            step += 1
        row = {"epoch": epoch + 1, "lr": poly_lr(step, total_steps, tcfg.lr, tcfg.lr_power)}
        row.update({f"loss_{k}": v / nb for k, v in sums.items()})
        if val_samples and tcfg.eval_every and ((epoch + 1) % tcfg.eval_every == 0 or epoch + 1 == tcfg.epochs):
            rep = evaluate_samples(model, val_samples, vocab)
            row.update({"val_acc": rep.acc_at_05, "val_miou": rep.miou})
        row["seconds"] = time.time() - t0
        history.append(**row)
        if progress is not None:
            progress(row)
    return model, history


def _diverged(model, good, path, save, why):
    for k, p in model.params.items():
        p.data = good[k]
    if path is not None:
        save(path, model.params, {"diverged": True})
    raise TrainingDiverged(f"training diverged: {why}")


# ---------------------------------------------------------------- inference


@dataclass
class VideoPrediction:
    video_id: str
    results: list  # GroundingResult per frame
    features: list  # per frame: list over levels of (HW, D) arrays
    maps: list  # per frame: dict with S / L arrays (first level) when present


def predict_video(model: GroundingNet, sample, vocab=None, stride=1) -> VideoPrediction:
    vocab = synthetic_vocab() if vocab is None else vocab
    ids = [vocab.id(w) for w in sample.tokens]
    with ad.no_grad():
        out = model.forward_video(sample.images(), ids, stride)
    results = model.results(out)
    T = len(results)
    feats = [[lo.V.data[t] for lo in out.levels] for t in range(T)]
    maps = []
    for t in range(T):
        m = {}
        lo = out.levels[0]
        if lo.S is not None:
            m["S"] = lo.S.data[t]
        if lo.L is not None:
            m["L"] = lo.L.data[t]
        maps.append(m)
    return VideoPrediction(sample.video_id, results, feats, maps)


def selected_boxes(pred: VideoPrediction, K=5, P=1):
    """Final per-frame boxes (normalized cx, cy, w, h), optionally stabilized."""
    if P == 1:
        return np.stack([r.boxes[r.selected] for r in pred.results])
    frames = [gather_topk(r, f, K) for r, f in zip(pred.results, pred.features)]
    stab = stabilize_video(frames, P)
    return np.stack([fr.boxes[s.selected] for fr, s in zip(frames, stab)])


def evaluate_samples(model, samples, vocab=None, K=5, P=1, stride=1, classes=None, frame_filter=None):
    """Evaluate on whole videos; optionally restrict to ambiguity classes / frames."""
    preds, gts, vids = [], [], []
    for s in samples:
        if classes is not None and s.ambiguity_class not in classes:
            continue
        pv = predict_video(model, s, vocab, stride)
        boxes = selected_boxes(pv, K, P)
        S = s.frames.shape[1]
        keep = np.ones(len(boxes), dtype=bool) if frame_filter is None else frame_filter(s)
        preds.append(cxcywh_to_xyxy(boxes[keep], S, S))
        gts.append(s.gt_tube[keep])
        vids += [s.video_id] * int(keep.sum())
    return evaluate(np.concatenate(preds), np.concatenate(gts), vids)


def config_fields():
    return {f.name for f in fields(TrainConfig)} | {f.name for f in fields(ModelConfig)}
