"""Train a small detector on a handful of synthetic images, then ask it different questions.

Takes a few minutes on one CPU core. Pass ``--steps`` to trade time for quality.
Run: python3 demos/04_overfit_and_detect.py --out /tmp/omdet_demo
"""

import argparse
from pathlib import Path

from omdet.evaluation import evaluate_dataset
from omdet.report import stage_trace_svg
from omdet.train import TrainConfig, load_datasets, train

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=300)
parser.add_argument("--out", default="/tmp/omdet_demo")
args = parser.parse_args()

spec = {"datasets": {"O": ["circle", "square"]}, "images_per_dataset": 8, "image_size": 64,
        "shape_size": [14, 26], "max_shapes": 3}
cfg = TrainConfig.from_dict(dict(
    datasets=[{"type": "synthetic", "seed": 0, "spec": spec}], lr=1e-3, steps=args.steps, steps_per_epoch=100,
    batch_mode="all", task_mode="full_vocabulary", K=2, N=20, S=4, weight_decay=0.0,
    output_dir=str(Path(args.out) / "run")))
result = train(cfg)
print(f"loss after {result.steps} steps: {result.last_loss:.4f}")

(data,) = load_datasets(cfg)
print(f"AP50 on the training images: {evaluate_dataset(result.model, data).ap50:.3f}")

# The same picture queried with two different tasks. Only the words asked
# for come back, and every stage of the cascade can be inspected.
image_id = data.image_ids[0]
print("objects:", [(a.label, tuple(round(v) for v in a.box)) for a in data.annotations[image_id]])
for task in (["circle"], ["square"], ["circle", "square"]):
    (det,) = result.model.detect(data.pixels(image_id)[None], task, score_thresh=0.3, trace=True)
    print(task, [(det.words[c], round(float(s), 2)) for c, s in zip(det.classes, det.scores)])

print("per-stage boxes written to", stage_trace_svg(data.pixels(image_id), det, Path(args.out) / "trace.svg"))
