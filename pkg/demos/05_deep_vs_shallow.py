"""Joint training on three datasets that disagree about what counts as background.

A labels circle, square, triangle and cross. B labels only circles and C only
squares, although every picture contains all four kinds of shape. The deep
model lets the task words steer localization; the shallow one uses them only
in the final classifier. This script trains both with the same budget and
reports recall and AP per class of A. Every one of them is background
somewhere: B leaves squares, triangles and crosses unannotated, C circles,
triangles and crosses.

The acceptance run uses 4000 steps and three seeds (about an hour on one core);
the defaults here finish in a few minutes and are only indicative.
Run: python3 demos/05_deep_vs_shallow.py --steps 600 --seeds 0
"""

import argparse

import numpy as np

from omdet.data import ConflictSpec, generate_synthetic
from omdet.evaluation import evaluate_dataset
from omdet.train import TrainConfig, train

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=600)
parser.add_argument("--seeds", type=int, nargs="+", default=[0])
parser.add_argument("--out", default="/tmp/omdet_conflict")
args = parser.parse_args()

spec = {"images_per_dataset": 300, "image_size": 64, "shape_size": [14, 24], "max_shapes": 3}
held_out = generate_synthetic(ConflictSpec.from_dict({**spec, "images_per_dataset": 100}), 999)[0]

rows = []
for seed in args.seeds:
    for shallow in (False, True):
        name = f"{'shallow' if shallow else 'deep'}{seed}"
        cfg = TrainConfig.from_dict(dict(
            datasets=[{"type": "synthetic", "seed": 100 + seed, "spec": spec}], lr=2e-3, steps=args.steps,
            steps_per_epoch=args.steps, batch_size=8, K=4, N=16, S=3, d=32, shallow=shallow, seed=seed,
            model={"backbone_channels": [16, 32, 64, 64], "pool": 4}, output_dir=f"{args.out}/{name}"))
        rep = evaluate_dataset(train(cfg).model, held_out)
        recall = {m.name: m.recall50_at_score for m in rep.classes}
        rows.append((name, rep.ap50, recall))
        print(f"{name:9s} AP50 {rep.ap50:.3f}  " + "  ".join(f"{k} {v:.2f}" for k, v in sorted(recall.items())))

for variant in ("deep", "shallow"):
    picked = [r for r in rows if r[0].startswith(variant)]
    print(f"{variant}: mean recall {np.mean([np.mean(list(r[2].values())) for r in picked]):.3f}, "
          f"mean AP50 {np.mean([r[1] for r in picked]):.3f}")
