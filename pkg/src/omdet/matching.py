"""Hungarian matching and the set-prediction loss summed over refinement stages."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from omdet.autodiff import Tensor
from omdet.autodiff import functional as F
from omdet.errors import UsageError
from omdet.geometry import cxcywh_to_xyxy_t, cxcywh_to_xyxy_unit, giou_t, pairwise_giou


@dataclass(frozen=True)
class MatchAssignment:
    """Pairs (row, col) of an optimal assignment, sorted by row index."""

    rows: np.ndarray
    cols: np.ndarray
    cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def __len__(self) -> int:
        return len(self.rows)


def _hungarian_rows_le_cols(c: np.ndarray) -> np.ndarray:
    """Shortest augmenting path with potentials; returns the column of every row."""
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)  # p[j]: row (1-based) owning column j
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1  # first minimum: lowest column wins ties
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign


def hungarian(cost) -> MatchAssignment:
    """Exact minimum-cost assignment of min(R, C) pairs for an R x C matrix.

    Runs the O(n^3) potential-based augmenting-path algorithm with the smaller
    side as rows (equivalent to solving the square matrix padded with zeros).
    Ties resolve toward the lowest index deterministically.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise UsageError(f"cost matrix must be 2-D and non-empty, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise UsageError("cost matrix contains non-finite entries")
    transposed = c.shape[0] > c.shape[1]
    work = c.T if transposed else c
    cols = _hungarian_rows_le_cols(work)
    rows = np.arange(work.shape[0])
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows, kind="stable")
    rows, cols = rows[order], cols[order]
    return MatchAssignment(rows, cols, float(c[rows, cols].sum()))


def brute_force_assignment(cost) -> float:
    """Minimum total cost by enumerating every injective assignment (tests/oracles)."""
    import itertools

    c = np.asarray(cost, dtype=np.float64)
    if c.shape[0] > c.shape[1]:
        c = c.T
    n, m = c.shape
    best = np.inf
    for perm in itertools.permutations(range(m), n):
        best = min(best, c[np.arange(n), perm].sum())
    return float(best)


# ------------------------------------------------------------------ losses


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0


def focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0, mask=None) -> Tensor:
    """Summed sigmoid focal loss; entries where ``mask`` is False contribute nothing."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise UsageError(f"focal_loss: targets {t.shape} vs logits {logits.shape}")
    keep = np.ones(t.shape, dtype=logits.dtype) if mask is None else np.broadcast_to(mask, t.shape).astype(logits.dtype)
    p = F.sigmoid(logits)
    pos = F.mul(F.power(F.sub(1.0, p), gamma), F.log_sigmoid(logits))
    neg = F.mul(F.power(p, gamma), F.log_sigmoid(F.neg(logits)))
    w_pos = alpha * t * keep
    w_neg = (1.0 - alpha) * (1.0 - t) * keep
    return F.neg(F.sum(F.add(F.mul(pos, w_pos), F.mul(neg, w_neg))))


def focal_cost(logits: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Per-logit positive focal term minus negative focal term."""
    x = np.asarray(logits, dtype=np.float64)
    p = expit(x)
    pos = alpha * (1 - p) ** gamma * -log_expit(x)
    neg = (1 - alpha) * p**gamma * -log_expit(-x)
    return pos - neg


@dataclass
class GroundTruth:
    """Targets for one image: class indices into its task, cxcywh-normalised boxes."""

    classes: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.intp).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.classes) != len(self.boxes):
            raise UsageError("ground truth classes and boxes differ in length")

    def __len__(self) -> int:
        return len(self.classes)


def matching_cost(logits, boxes, gt: GroundTruth, weights: LossWeights = LossWeights(),
                  num_classes: int | None = None) -> np.ndarray:
    """(N, M) cost: weighted focal class cost + L1 (cxcywh) + (1 - GIoU)."""
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    k = logits.shape[1] if num_classes is None else num_classes
    if len(gt) and (gt.classes.min() < 0 or gt.classes.max() >= k):
        raise UsageError(f"ground-truth class outside the task (k={k}): {gt.classes.tolist()}")
    cls = focal_cost(logits[:, gt.classes], weights.alpha, weights.gamma)
    l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(-1)
    g = pairwise_giou(cxcywh_to_xyxy_unit(boxes), cxcywh_to_xyxy_unit(gt.boxes))
    return weights.cls * cls + weights.l1 * l1 + weights.giou * (1.0 - g)


@dataclass
class LossBreakdown:
    total: float
    cls: float
    l1: float
    giou: float
    num_matched: int
    num_gt: int
    per_stage: list[dict] = field(default_factory=list)
    assignments: list[list[MatchAssignment]] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "total": self.total, "cls": self.cls, "l1": self.l1, "giou": self.giou,
            "num_matched": self.num_matched, "num_gt": self.num_gt, "per_stage": self.per_stage,
        }


def set_prediction_loss(
    stages: Sequence,
    gts: Sequence[GroundTruth],
    valid: np.ndarray,
    weights: LossWeights = LossWeights(),
    assignments: Sequence[Sequence[MatchAssignment]] | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Sum over stages of the matched focal + L1 + GIoU loss.

    ``stages`` hold ``logits`` (B, N, K) and ``boxes`` (B, N, 4) tensors;
    ``valid`` (B, K) flags real (non-pad) task slots. Matching is recomputed per
    stage unless ``assignments`` fixes it; it is never differentiated.
    """
    valid = np.asarray(valid, dtype=bool)
    bsz = len(gts)
    num_gt = sum(len(g) for g in gts)
    norm = float(max(num_gt, 1))
    total = None
    sums = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
    per_stage, used = [], []
    matched = 0
    for s, stage in enumerate(stages):
        logits, boxes = stage.logits, stage.boxes
        if logits.shape[0] != bsz or valid.shape != (bsz, logits.shape[2]):
            raise UsageError(f"stage {s}: logits {logits.shape} / valid {valid.shape} / {bsz} images")
        n = logits.shape[1]
        targets = np.zeros(logits.shape)
        flat_rows, gt_boxes = [], []
        stage_assign = []
        for b, gt in enumerate(gts):
            k = int(valid[b].sum())
            if len(gt) and (gt.classes.max() >= valid.shape[1] or not valid[b, gt.classes].all()):
                raise UsageError(f"image {b}: ground-truth class outside its task")
            if assignments is not None:
                a = assignments[s][b]
            elif len(gt):
                cost = matching_cost(logits.data[b], boxes.data[b], gt, weights, num_classes=k)
                a = hungarian(cost)
            else:
                a = MatchAssignment(np.zeros(0, np.intp), np.zeros(0, np.intp), 0.0)
            stage_assign.append(a)
            if len(a):
                targets[b, a.rows, gt.classes[a.cols]] = 1.0
                flat_rows.append(b * n + a.rows)
                gt_boxes.append(gt.boxes[a.cols])
        used.append(stage_assign)
        l_cls = F.div(focal_loss(logits, targets, weights.alpha, weights.gamma, valid[:, None, :]), norm)
        stage_total = F.mul(l_cls, weights.cls)
        l1_v = giou_v = 0.0
        if flat_rows:
            rows = np.concatenate(flat_rows)
            matched += len(rows)
            pred = F.take(F.reshape(boxes, (-1, 4)), rows, 0)
            target = np.concatenate(gt_boxes).astype(pred.dtype)
            l_l1 = F.div(F.sum(F.abs(F.sub(pred, target))), norm)
            g = giou_t(cxcywh_to_xyxy_t(pred), cxcywh_to_xyxy_t(Tensor(target)))
            l_giou = F.div(F.sum(F.sub(1.0, g)), norm)
            stage_total = F.add(stage_total, F.add(F.mul(l_l1, weights.l1), F.mul(l_giou, weights.giou)))
            l1_v, giou_v = l_l1.item(), l_giou.item()
        cls_v = l_cls.item()
        sums["cls"] += cls_v
        sums["l1"] += l1_v
        sums["giou"] += giou_v
        per_stage.append({"cls": cls_v, "l1": l1_v, "giou": giou_v, "total": stage_total.item()})
        total = stage_total if total is None else F.add(total, stage_total)
    if total is None:
        raise UsageError("set_prediction_loss needs at least one stage")
    breakdown = LossBreakdown(total.item(), sums["cls"], sums["l1"], sums["giou"], matched, num_gt,
                              per_stage, used)
    return total, breakdown

