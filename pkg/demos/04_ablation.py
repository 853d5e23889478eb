"""Switch the semi-supervised pieces on one at a time and compare validation scores.

    python demos/04_ablation.py [iters]

Arms: supervised only, consistency only, + contrastive learning, + inter-task attention,
full model. With the default 600 iterations this takes roughly 10 minutes on one core;
differences at that length are small and noisy, the point is the plumbing.
"""

import sys
import tempfile

from hermes import engine
from hermes.core import TrainConfig

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600
base = TrainConfig(
    image_size=64, n_synth=520, val_fraction=120 / 520, n_labeled=40,
    seg_width=8, cls_width=8, cls_blocks=1, total_iters=iters, eval_interval=iters,
    lr_init=1e-3, lr_cls_init=0.01, anchors_per_batch=64,
)
arms = {
    "suponly": dict(enable_unlabeled=False, enable_dtcl=False, enable_ias=False, enable_itcl=False),
    "consistency": dict(enable_dtcl=False, enable_ias=False, enable_itcl=False),
    "+contrast": dict(enable_ias=False, enable_itcl=False),
    "+attention": dict(enable_itcl=False),
    "full": {},
}
index = engine.build_index(base)
with tempfile.TemporaryDirectory() as tmp:
    for name, flags in arms.items():
        res = engine.fit(base.replace(**flags), f"{tmp}/{name}", index)
        print(f"{name:12s} dice {res.final_eval.dice_mean:.4f} ± {res.final_eval.dice_std:.4f}  accuracy {res.final_eval.accuracy:.3f}")
