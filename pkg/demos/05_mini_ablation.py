"""
A miniature ablation
====================

Train the baseline, S-Att and SL-Att variants on the same small synthetic set
and compare Acc@0.5 on the whole held-out split and on its location-only
part. Takes a few minutes on one CPU core; pass a number of epochs to change
the budget.
"""

import sys

from cogrind import synthetic as sy
from cogrind import trainer as tr
from cogrind.metrics import format_table
from cogrind.model import ModelConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
mix = {"unique-attribute": 0.2, "location-only": 0.4, "multi-entity-distractor": 0.4}
train_set = sy.generate(seed=1, num_videos=200, mix=mix)
held_out = sy.generate(seed=2, num_videos=60, mix=mix)

rows, loc_rows = {}, {}
for mode in ("baseline", "s-att", "sl-att"):
    model, _ = tr.train(tr.TrainConfig(mode=mode, epochs=epochs, lr=4e-3, seed=0), ModelConfig(), train_set)
    rows[mode] = tr.evaluate_samples(model, held_out)
    loc_rows[mode] = tr.evaluate_samples(model, held_out, classes=["location-only"])
    print(f"trained {mode}")

print("\nall held-out frames")
print(format_table(rows))
print("\nlocation-only frames")
print(format_table(loc_rows))
