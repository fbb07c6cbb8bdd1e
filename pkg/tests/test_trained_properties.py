"""Behavioral properties that need a trained model (slow)."""

import math

import numpy as np
import pytest

from cogrind import metrics as mt
from cogrind import synthetic as sy
from cogrind import trainer as tr
from cogrind.model import ModelConfig

pytestmark = pytest.mark.slow


def sign_test_p(wins, losses):
    """One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2)."""
    n = wins + losses
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def test_sign_test_p():
    assert sign_test_p(15, 5) == pytest.approx(0.0207, abs=1e-4)
    assert sign_test_p(0, 0) == 1.0


def twin_midpoint(s, t, axis):
    tgt = s.shapes[s.target_id]
    twin = next(sh for i, sh in enumerate(s.shapes)
                if i != s.target_id and sh.kind == tgt.kind and sh.color == tgt.color)
    g = s.gt_tube[t]
    g_c = (g[axis] + g[axis + 2]) / 2
    tw_c = twin.positions[t][axis] + twin.size / 2
    return g_c, (g_c + tw_c) / 2


def test_location_map_points_to_the_named_side(capsys):
    mix = {"location-only": 1.0}
    tcfg = tr.TrainConfig(mode="sl-att", epochs=12, lr=4e-3, seed=0, eval_every=0)
    model, _ = tr.train(tcfg, ModelConfig(), sy.generate(1, num_videos=300, mix=mix))
    hits = n = 0
    for s in sy.generate(2, num_videos=50, mix=mix):
        axis = 0 if s.tokens[-1] in ("left", "right") else 1
        pred = tr.predict_video(model, s)
        for t, maps in enumerate(pred.maps):
            row, col = divmod(int(np.argmax(maps["L"])), 4)
            c = ((col, row)[axis] + 0.5) * 16
            g_c, mid = twin_midpoint(s, t, axis)
            hits += (c - mid) * (g_c - mid) > 0
            n += 1
    with capsys.disabled():
        print(f"\nargmax of L on the ground-truth side in {hits}/{n} held-out frames ({hits / n:.3f}, bar 0.85)")
    assert hits / n >= 0.85


def test_cogrounding_helps_the_corrupted_frame(capsys):
    """Same data and seed with and without co-grounding; one occluded frame per video."""
    mix = {"occlusion": 0.5, "unique-attribute": 0.2, "location-only": 0.15, "multi-entity-distractor": 0.15}
    train = sy.generate(31, num_videos=200, mix=mix)
    models = {mode: tr.train(tr.TrainConfig(mode=mode, epochs=10, lr=4e-3, seed=0, eval_every=0),
                             ModelConfig(), train)[0]
              for mode in ("sl-att", "cg-sl-att")}
    videos = [s for s in sy.generate(32, num_videos=120, mix={"occlusion": 1.0}) if s.occluded.sum() == 1][:24]
    assert len(videos) >= 20
    ious = {}
    for mode, model in models.items():
        vals = []
        for s in videos:
            t = int(np.flatnonzero(s.occluded)[0])
            r = tr.predict_video(model, s).results[t]
            vals.append(float(mt.iou(mt.cxcywh_to_xyxy(r.boxes[r.selected], 64, 64), s.gt_tube[t])))
        ious[mode] = np.array(vals)
    wins = int(np.sum(ious["cg-sl-att"] > ious["sl-att"]))
    losses = int(np.sum(ious["cg-sl-att"] < ious["sl-att"]))
    p = sign_test_p(wins, losses)
    with capsys.disabled():
        print(f"\ncorrupted-frame mean IoU over {len(videos)} videos: SL-Att {ious['sl-att'].mean():.4f}, "
              f"CG-SL-Att {ious['cg-sl-att'].mean():.4f}; CG wins {wins}, loses {losses}, sign test p = {p:.4f}")
    assert ious["cg-sl-att"].mean() > ious["sl-att"].mean() and p < 0.05
