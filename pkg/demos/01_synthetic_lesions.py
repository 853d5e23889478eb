"""Synthetic ultrasound-like lesions: what the generator makes and what the two views look like.

    python demos/01_synthetic_lesions.py [out_dir]

Writes a small benign/malignant folder tree (the same layout `scan_dataset` reads),
scans it back, and prints a few statistics per class.
"""

import sys
from pathlib import Path

import numpy as np

from hermes.data import make_view_pair, scan_dataset, split_labeled, synth_generate, write_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_data")
samples = synth_generate(40, 64, seed=0)
write_dataset(samples, out)
print(f"wrote {len(samples)} images to {out}/benign and {out}/malignant")

# the folder round-trips through the regular ingest path
index = scan_dataset(out)
print(f"scanned back {len(index.all_ids)} labeled images, first id {index.all_ids[0]!r}")

for label, name in enumerate(("benign", "malignant")):
    group = [s for s in samples if s.class_label == label]
    area = np.mean([s.mask.mean() for s in group])
    inside = np.mean([s.image[0][s.mask == 1].mean() for s in group])
    outside = np.mean([s.image[0][s.mask == 0].mean() for s in group])
    print(f"{name:9s}  n={len(group):2d}  lesion area {area:.3f}  mean intensity inside {inside:.3f} / outside {outside:.3f}")

# a semi-supervised split: few labeled, the rest has its labels stripped
split = split_labeled(index, n_labeled=8, val_fraction=0.25, seed=0)
print(f"split: {len(split.labeled)} labeled, {len(split.unlabeled)} unlabeled, {len(split.val)} validation")

# weak view = flip/scale/crop; strong view = blur and brightness/contrast jitter of the same geometry
pair = make_view_pair(samples[0], np.random.default_rng(1))
print(f"view pair for {pair.source_id}: flip={pair.geometry.flip} scale={pair.geometry.scale:.2f}, "
      f"mean |strong - weak| = {np.abs(pair.strong - pair.weak).mean():.4f}")
