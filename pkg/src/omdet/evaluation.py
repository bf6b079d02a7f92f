"""COCO-style AP / AP50 / AP75 with 101-point interpolation and greedy matching."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from omdet.errors import UsageError
from omdet.geometry import pairwise_iou

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 300


@dataclass
class EvalTarget:
    """Ground truths of one image: class indices and xyxy boxes."""

    classes: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.intp).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)


@dataclass
class ClassMetrics:
    name: str
    num_gt: int
    num_det: int
    ap: float | None
    ap50: float | None
    ap75: float | None
    recall50: float | None
    recall50_at_score: float | None
    tp50: int
    tp75: int
    ap_per_threshold: list = field(default_factory=list)


@dataclass
class EvalReport:
    classes: list[ClassMetrics]
    ap: float
    ap50: float
    ap75: float
    num_images: int
    num_gt: int
    num_det: int
    score_threshold: float = 0.3
    pr_curves: dict = field(default_factory=dict, repr=False)  # class -> (recall, precision) at IoU 0.5

    def by_name(self, name: str) -> ClassMetrics:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pr_curves"] = {k: [list(r), list(p)] for k, (r, p) in self.pr_curves.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        raw = dict(raw)
        raw["classes"] = [ClassMetrics(**c) for c in raw["classes"]]
        raw["pr_curves"] = {k: (list(r), list(p)) for k, (r, p) in raw.get("pr_curves", {}).items()}
        return cls(**raw)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def pr_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["class", "recall", "precision"])
        for name, (rec, prec) in self.pr_curves.items():
            for r, p in zip(rec, prec):
                w.writerow([name, f"{r:.6f}", f"{p:.6f}"])
        return buf.getvalue()


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Mean over r in {0, .01, .., 1} of the max precision at recall >= r."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _match_class(dets, gts, thr: float):
    """Greedy matching over score-sorted detections; returns tp flags and scores."""
    # score descending, ties by image index then box order
    order = [k[2] for k in sorted((-sc, img, di) for di, (img, _, sc) in enumerate(dets))]
    used = {img: np.zeros(len(g), dtype=bool) for img, g in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, di in enumerate(order):
        img, box, _ = dets[di]
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = pairwise_iou(box[None], g)[0]
        ious = np.where(used[img], -1.0, ious)
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            used[img][j] = True
            tp[rank] = True
    sorted_scores = np.array([dets[di][2] for di in order])
    return tp, sorted_scores


def compute_ap(detections: Sequence, targets: Sequence, class_names: Sequence[str],
               iou_thresholds=IOU_THRESHOLDS, score_threshold: float = 0.3,
               max_dets: int = MAX_DETS) -> EvalReport:
    """Evaluate per-image detections (``boxes``/``classes``/``scores``) against targets."""
    if len(detections) != len(targets):
        raise UsageError(f"{len(detections)} detection sets for {len(targets)} images")
    k = len(class_names)
    thr = [float(t) for t in iou_thresholds]
    per_class_dets = [[] for _ in range(k)]
    per_class_gts = [dict() for _ in range(k)]
    n_gt = n_det = 0
    for img, (det, tgt) in enumerate(zip(detections, targets)):
        tgt = tgt if isinstance(tgt, EvalTarget) else EvalTarget(tgt.classes, tgt.boxes)
        classes = np.asarray(det.classes, dtype=np.intp).reshape(-1)
        scores = np.asarray(det.scores, dtype=np.float64).reshape(-1)
        boxes = np.asarray(det.boxes, dtype=np.float64).reshape(-1, 4)
        if (classes.size and (classes.min() < 0 or classes.max() >= k)) or \
                (tgt.classes.size and (tgt.classes.min() < 0 or tgt.classes.max() >= k)):
            raise UsageError(f"image {img}: class index outside the {k}-class space")
        keep = np.argsort(-scores, kind="stable")[:max_dets]
        for di in keep:
            per_class_dets[classes[di]].append((img, boxes[di], float(scores[di])))
        n_det += len(keep)
        n_gt += len(tgt.classes)
        for c in range(k):
            sel = tgt.classes == c
            if sel.any():
                per_class_gts[c][img] = tgt.boxes[sel]
    metrics, pr = [], {}
    for c, name in enumerate(class_names):
        gts = per_class_gts[c]
        num_gt = sum(len(v) for v in gts.values())
        dets = per_class_dets[c]
        aps, tps = [], {}
        rec50 = rec50_s = None
        for t in thr:
            tp, scores = _match_class(dets, gts, t)
            tps[t] = int(tp.sum())
            if num_gt == 0:
                continue
            ctp = np.cumsum(tp)
            recall = ctp / num_gt
            precision = ctp / np.arange(1, len(tp) + 1) if len(tp) else np.zeros(0)
            aps.append(interpolated_ap(recall, precision))
            if abs(t - 0.5) < 1e-9:
                rec50 = float(ctp[-1] / num_gt) if len(tp) else 0.0
                rec50_s = float(tp[scores >= score_threshold].sum() / num_gt)
                pr[name] = (recall.tolist(), precision.tolist())
        ap = float(np.mean(aps)) if aps else None
        metrics.append(ClassMetrics(
            name=name, num_gt=num_gt, num_det=len(dets), ap=ap,
            ap50=_at(aps, thr, 0.5), ap75=_at(aps, thr, 0.75), recall50=rec50, recall50_at_score=rec50_s,
            tp50=_tp_at(tps, 0.5), tp75=_tp_at(tps, 0.75), ap_per_threshold=aps,
        ))
    scored = [m for m in metrics if m.num_gt > 0]

    def mean(attr):
        vals = [getattr(m, attr) for m in scored if getattr(m, attr) is not None]
        return float(np.mean(vals)) if vals else 0.0

    return EvalReport(metrics, mean("ap"), mean("ap50"), mean("ap75"), len(targets), n_gt, n_det,
                      score_threshold, pr)


def _at(aps: list, thr: list, value: float):
    for a, t in zip(aps, thr):
        if abs(t - value) < 1e-9:
            return a
    return None


def _tp_at(tps: dict, value: float) -> int:
    for t, n in tps.items():
        if abs(t - value) < 1e-9:
            return n
    return 0


def evaluate_dataset(model, dataset, batch_size: int = 8, score_thresh: float = 0.001,
                     order: Sequence[str] | None = None, image_ids: Sequence | None = None,
                     score_threshold: float = 0.3) -> EvalReport:
    """Detect with the dataset's full vocabulary as task, then compute AP.

    The task is the vocabulary in alphabetical order unless ``order`` gives a
    permutation of it; the report always lists classes alphabetically.
    """
    vocab = sorted(dataset.vocabulary)
    task = list(order) if order is not None else vocab
    if sorted(task) != vocab:
        raise UsageError("order must be a permutation of the dataset vocabulary")
    max_k = model.config.max_k
    if len(task) > max_k:
        raise UsageError(f"vocabulary of {len(task)} words exceeds K={max_k}; "
                         "evaluate in chunks of at most K words (not supported)")
    ids = list(image_ids) if image_ids is not None else dataset.image_ids
    to_report = np.array([vocab.index(w) for w in task])
    dets, targets = [], []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        images = np.stack([dataset.pixels(i) for i in chunk])
        for det in model.detect(images, [task] * len(chunk), score_thresh=score_thresh):
            det.classes = to_report[det.classes] if len(det.classes) else det.classes
            dets.append(det)
        for i in chunk:
            anns = dataset.annotations.get(i, [])
            targets.append(EvalTarget([vocab.index(a.label) for a in anns], [a.box for a in anns]))
    return compute_ap(dets, targets, vocab, score_threshold=score_threshold)
