"""Boxes, overlap and the one-to-one assignment behind set prediction.

Run: python3 demos/01_boxes_and_matching.py
"""

import numpy as np

from omdet.geometry import box_convert, giou, iou, pairwise_giou
from omdet.matching import GroundTruth, focal_cost, hungarian, matching_cost

# Two unit-offset squares share a third of their union. When the boxes
# touch nothing, GIoU keeps going negative with distance, which is what
# gives regression a gradient before the prediction overlaps its target.
a = np.array([0.0, 0.0, 2.0, 2.0])
for dx in (1.0, 2.0, 4.0, 8.0):
    b = a + [dx, 0, dx, 0]
    print(f"shift {dx:4.1f}: iou {float(iou(a, b)):.3f}  giou {float(giou(a, b)):+.3f}")

# Predictions live in normalised cxcywh, evaluation in pixel xyxy.
unit = np.array([[0.5, 0.5, 0.25, 0.5]])
print("cxcywh", unit, "-> xyxy on 64x48", box_convert(unit, "cxcywh", "xyxy", (64, 48)))

# Hungarian matching picks the cheapest proposal for every ground truth.
cost = np.array([[4.0, 1.0, 3.0],
                 [2.0, 0.0, 5.0],
                 [3.0, 2.0, 2.0]])
m = hungarian(cost)
print("rows", m.rows, "cols", m.cols, "total cost", m.cost)

# The detector's cost mixes a focal classification term with L1 and GIoU.
rng = np.random.default_rng(0)
logits = rng.normal(size=(4, 2))  # 4 proposals, 2 task words
pred = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.3, 0.3], [0.5, 0.5, 0.9, 0.9], [0.2, 0.8, 0.1, 0.1]])
gt = GroundTruth([1, 0], [[0.72, 0.68, 0.3, 0.32], [0.31, 0.3, 0.2, 0.2]])
c = matching_cost(logits, pred, gt)
print("cost matrix (proposals x objects)\n", np.round(c, 2))
print("proposal for each object:", hungarian(c.T).cols)
print("focal cost of a confident logit vs an unsure one:", np.round(focal_cost(np.array([4.0, 0.0])), 3))

xyxy = box_convert(pred, "cxcywh", "xyxy", (1, 1))
print("pairwise giou of the proposals\n", np.round(pairwise_giou(xyxy, xyxy), 2))
