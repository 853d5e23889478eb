"""Train the joint model for a few hundred steps, evaluate it, and resume from a checkpoint.

    python demos/03_train_evaluate_resume.py [run_dir]

Takes a couple of minutes on one CPU core.
"""

import json
import sys
from pathlib import Path

from hermes import engine
from hermes.core import TrainConfig

run = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
cfg = TrainConfig(
    image_size=64, n_synth=160, n_labeled=16, val_fraction=0.25,
    seg_width=8, cls_width=8, cls_blocks=1, pixel_embed_dim=32, image_embed_dim=32,
    total_iters=200, eval_interval=100, lr_init=1e-3, lr_cls_init=0.01, anchors_per_batch=32,
)
index = engine.build_index(cfg)
print(f"{len(index.labeled)} labeled, {len(index.unlabeled)} unlabeled, {len(index.val)} validation images")

# first half, stopped by hand so we can resume it below
state = engine.TrainState(cfg)
for it in range(100):
    rep = engine.train_step(state, *engine.draw_batches(index, cfg, it))
    if it % 25 == 0:
        print(f"iter {it:3d}  total {rep.total:.3f}  seg_sup {rep.seg_sup:.3f}  cls_sup {rep.cls_sup:.3f}  "
              f"accepted pixels {rep.counts['accepted_pixel_fraction']:.2f}")
engine.save_checkpoint(state, run / "mid.pt")

result = engine.fit(cfg, run, index, resume=run / "mid.pt")
print("final:", json.dumps(result.final_eval.to_dict()))
print("best checkpoint:", result.best_checkpoint)

steps = [json.loads(line) for line in open(result.metrics_path) if '"step"' in line]
print(f"resumed log covers iterations {steps[0]['iter']}..{steps[-1]['iter']}, tau went {steps[0]['tau']:.4f} -> {steps[-1]['tau']:.4f}")
