"""
Re-scoring boxes over a temporal window
=======================================

Each frame keeps its top-K boxes with a feature vector per box. For a center
frame, every candidate looks up its best feature match in each frame of the
window and averages the matched confidences. A box that is only second-best
in one frame can win when its neighbors consistently back it.
"""

import numpy as np

from cogrind.postprocess import make_topk_frame, stabilize_video

target, clutter = np.eye(2)

# Frame 1 is "confused": the clutter box scores 0.6, the target 0.5.
# Its neighbors see the target clearly (0.9 against 0.1).
neighbor = make_topk_frame(np.zeros((2, 4)), [0.9, 0.1], np.stack([target, clutter], axis=1))
confused = make_topk_frame(np.zeros((2, 4)), [0.6, 0.5], np.stack([clutter, target], axis=1))
video = [neighbor, confused, neighbor]

for P in (1, 3):
    out = stabilize_video(video, P)[1]
    print(f"P={P}: scores {np.round(out.scores, 3)} -> selected candidate {out.selected}")
# With P=1 the confused frame keeps the clutter box; with P=3 the target
# (candidate 1) collects 0.9 from both neighbors and overtakes it.
