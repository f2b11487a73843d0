"""Small end-to-end run: train both stages, evaluate NoC/NoF, plot data.

Uses a reduced budget so it finishes in about two minutes on a laptop
core; raise the epoch counts for the real desk-scale defaults.

Run: python3 demos/05_train_and_evaluate.py
"""

import numpy as np

from clickseg.data import SceneConfig, generate_split
from clickseg.evalbench import (
    EvalConfig, click_histogram, evaluate, miou_at_k, noc, nof,
)
from clickseg.training import TrainConfig, train_coarse, train_fine

scene_cfg = SceneConfig()
train_scenes = generate_split(60, 0, scene_cfg)
eval_scenes = generate_split(15, 0, scene_cfg, index_offset=60)

cfg = TrainConfig(epochs_coarse=10, epochs_fine=5, batch_size=4,
                  max_sim_clicks=6, lr_coarse=1e-3, lr_fine=3e-4, seed=0)

print("stage one: full-frame network...")
coarse, hist = train_coarse(train_scenes, cfg)
print(f"  {len(hist)} steps, loss {hist[0]['loss']:.3f} -> {hist[-1]['loss']:.3f}")

print("stage two: zoomed network from the frozen stage-one weights...")
fine, hist2 = train_fine(coarse, train_scenes, cfg)
print(f"  {len(hist2)} steps, loss {hist2[0]['loss']:.3f} -> {hist2[-1]['loss']:.3f}")

eval_cfg = EvalConfig(tau=0.85, max_clicks=20)
records = evaluate(coarse, fine, eval_scenes, eval_cfg)
curve = miou_at_k(records, 10)
print(f"NoC@85 {noc(records, eval_cfg):.2f}   NoF {nof(records, eval_cfg)}")
print(f"mIoU@k {[round(v, 2) for v in curve[:6]]}")
print(f"click histogram {click_histogram(records)}")
ms = [m for r in records for m in r.wall_ms]
print(f"seconds per click: median {np.median(ms) / 1e3:.3f}s over {len(ms)} steps")
