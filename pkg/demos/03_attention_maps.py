"""
Subject and location maps after a short training run
====================================================

Train the SL-Att model for a few minutes on location-only videos and print
the subject map S and the location map L of one held-out frame. S lights up
on both identical shapes; L should prefer the one named by the side word.
"""

import numpy as np

from cogrind import synthetic as sy
from cogrind import trainer as tr
from cogrind.model import ModelConfig

mix = {"location-only": 1.0}
train_set = sy.generate(seed=1, num_videos=200, mix=mix)
held_out = sy.generate(seed=2, num_videos=20, mix=mix)

tcfg = tr.TrainConfig(mode="sl-att", epochs=8, lr=4e-3, seed=0)
model, history = tr.train(tcfg, ModelConfig(), train_set, held_out,
                          progress=lambda r: print(f"epoch {r['epoch']:2d}  loss {r['loss_total']:.3f}  "
                                                   f"held-out Acc@0.5 {r.get('val_acc', float('nan')):.3f}"))


def show(name, grid):
    print(name)
    for row in grid.reshape(4, 4):
        print("   " + " ".join(f"{v:+.2f}" for v in row))


s = held_out[0]
pred = tr.predict_video(model, s)
x1, y1, x2, y2 = s.gt_tube[0]
cell = int((y1 + y2) / 2 // 16) * 4 + int((x1 + x2) / 2 // 16)
print(f"\n'{s.expression}'  ground-truth cell {divmod(cell, 4)}")
show("S (subject)", pred.maps[0]["S"])
show("L (location)", pred.maps[0]["L"])
r = pred.results[0]
print("selected cell:", divmod(int(r.cell[r.selected]), 4))
