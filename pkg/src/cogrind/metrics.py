"""Grounding metrics: IoU, Acc@0.5, mIoU, success AUC and precision@20px.

Boxes are ``(x1, y1, x2, y2)`` in pixels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

IOU_THRESHOLDS = np.linspace(0.0, 1.0, 101)
PIXEL_THRESHOLDS = np.arange(0, 51, dtype=float)


def _check(box):
    box = np.asarray(box, dtype=float)
    if box.shape[-1] != 4 or np.any(box[..., 2] <= box[..., 0]) or np.any(box[..., 3] <= box[..., 1]):
        raise ValueError(f"degenerate box(es): {box.tolist()}")
    return box


def iou(a, b):
    """Intersection over union; works elementwise on ``(..., 4)`` arrays."""
    a, b = _check(a), _check(b)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area = lambda x: (x[..., 2] - x[..., 0]) * (x[..., 3] - x[..., 1])  # noqa: E731
    out = inter / (area(a) + area(b) - inter)
    return float(out) if np.ndim(out) == 0 else out


def center_distance(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    ca = (a[..., :2] + a[..., 2:]) / 2
    cb = (b[..., :2] + b[..., 2:]) / 2
    return np.linalg.norm(ca - cb, axis=-1)


def cxcywh_to_xyxy(box, width=1.0, height=1.0):
    box = np.asarray(box, dtype=float)
    cx, cy, w, h = np.moveaxis(box, -1, 0)
    return np.stack([(cx - w / 2) * width, (cy - h / 2) * height,
                     (cx + w / 2) * width, (cy + h / 2) * height], axis=-1)


def success_curve(ious, thresholds=IOU_THRESHOLDS):
    ious = np.asarray(ious, dtype=float)
    return np.array([(ious > t).mean() for t in thresholds])


def precision_curve(dists, thresholds=PIXEL_THRESHOLDS):
    dists = np.asarray(dists, dtype=float)
    return np.array([(dists <= d).mean() for d in thresholds])


@dataclass
class EvalReport:
    acc_at_05: float
    miou: float
    success_auc: float
    precision_20: float
    n_frames: int
    per_video: dict = field(default_factory=dict)
    success: list = field(default_factory=list)
    precision: list = field(default_factory=list)

    def summary(self):
        return {"acc@0.5": self.acc_at_05, "miou": self.miou,
                "success": self.success_auc, "precision": self.precision_20}

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def write_curves(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "threshold", "value"])
            for t, v in zip(IOU_THRESHOLDS, self.success):
                w.writerow(["success", f"{t:.2f}", f"{v:.6f}"])
            for t, v in zip(PIXEL_THRESHOLDS, self.precision):
                w.writerow(["precision", f"{t:.0f}", f"{v:.6f}"])


def _scores(ious, dists):
    s = success_curve(ious)
    p = precision_curve(dists)
    return {
        "acc_at_05": float((ious > 0.5).mean()),
        "miou": float(ious.mean()),
        "success_auc": float(s.mean()),
        "precision_20": float((dists <= 20.0).mean()),
    }, s, p


def evaluate(preds, gts, video_ids=None) -> EvalReport:
    """Score per-frame predicted boxes against ground truth (both ``(n, 4)`` xyxy pixels)."""
    preds = np.asarray(preds, dtype=float).reshape(-1, 4)
    gts = np.asarray(gts, dtype=float).reshape(-1, 4)
    if len(preds) != len(gts):
        raise ValueError(f"evaluate: {len(preds)} predictions for {len(gts)} ground-truth frames")
    if len(preds) == 0:
        raise ValueError("evaluate: no frames")
    ious = np.atleast_1d(iou(preds, gts))
    dists = center_distance(preds, gts)
    summary, s, p = _scores(ious, dists)
    per_video = {}
    if video_ids is not None:
        video_ids = np.asarray(video_ids)
        for vid in sorted(set(video_ids.tolist())):
            m = video_ids == vid
            per_video[vid] = _scores(ious[m], dists[m])[0]
    return EvalReport(n_frames=len(preds), per_video=per_video,
                      success=s.tolist(), precision=p.tolist(), **summary)


def format_table(rows: dict) -> str:
    """Aligned text table; ``rows`` maps a name to an :class:`EvalReport`."""
    names = list(rows)
    width = max([len("model")] + [len(n) for n in names])
    lines = [f"{'model':<{width}}  {'Acc@0.5':>8}  {'mIoU':>6}  {'Success':>7}  {'Prec@20':>7}"]
    for n in names:
        r = rows[n]
        lines.append(f"{n:<{width}}  {100 * r.acc_at_05:8.2f}  {r.miou:6.3f}  "
                     f"{r.success_auc:7.3f}  {r.precision_20:7.3f}")
    return "\n".join(lines)
