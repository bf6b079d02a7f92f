"""Box algebra and multi-level RoI feature pooling.

Two box layouts are used throughout:

* ``xyxy``   absolute pixel corners ``(x1, y1, x2, y2)``
* ``cxcywh`` centre/size normalised by the image size, each in ``[0, 1]``

The numpy functions here serve matching costs and evaluation; the ``*_t``
variants are built from autodiff primitives and carry gradients into the
regression losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from omdet.autodiff import Tensor
from omdet.autodiff import functional as F
from omdet.errors import ConfigError, ShapeError

XYXY = "xyxy"
CXCYWH = "cxcywh"


@dataclass(frozen=True)
class Box:
    coords: tuple[float, float, float, float]
    fmt: str = XYXY

    def __post_init__(self):
        if self.fmt not in (XYXY, CXCYWH):
            raise ConfigError(f"unknown box representation {self.fmt!r}")

    def to(self, target: str, image_size: tuple[float, float]) -> "Box":
        return Box(tuple(box_convert(np.array(self.coords), self.fmt, target, image_size).tolist()), target)


def _check_size(image_size) -> tuple[float, float]:
    w, h = image_size
    if not (w > 0 and h > 0):
        raise ConfigError(f"image size must be positive, got {image_size}")
    return float(w), float(h)


def box_convert(boxes, source: str, target: str, image_size) -> np.ndarray:
    """Convert (..., 4) boxes between ``xyxy`` (absolute) and ``cxcywh`` (normalised)."""
    w, h = _check_size(image_size)
    b = np.asarray(boxes, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ShapeError(f"boxes must have a trailing dimension of 4, got {b.shape}")
    if source == target:
        return b.copy()
    if source == XYXY and target == CXCYWH:
        x1, y1, x2, y2 = np.moveaxis(b, -1, 0)
        out = np.stack([(x1 + x2) / (2 * w), (y1 + y2) / (2 * h), (x2 - x1) / w, (y2 - y1) / h], -1)
        return np.clip(out, 0.0, 1.0)
    if source == CXCYWH and target == XYXY:
        cx, cy, bw, bh = np.moveaxis(b, -1, 0)
        return np.stack([(cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h], -1)
    raise ConfigError(f"unsupported conversion {source} -> {target}")


def cxcywh_to_xyxy_unit(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(np.asarray(boxes, dtype=np.float64), -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def clamp_xyxy(boxes, image_size) -> np.ndarray:
    w, h = _check_size(image_size)
    b = np.asarray(boxes, dtype=np.float64).copy()
    b[..., 0::2] = np.clip(b[..., 0::2], 0, w)
    b[..., 1::2] = np.clip(b[..., 1::2], 0, h)
    b[..., 2] = np.maximum(b[..., 2], b[..., 0])
    b[..., 3] = np.maximum(b[..., 3], b[..., 1])
    return b


def area(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def _inter_union(a: np.ndarray, b: np.ndarray):
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    return inter, area(a) + area(b) - inter


def iou(a, b) -> np.ndarray:
    """IoU of corresponding xyxy boxes (broadcasting). Zero when the union is empty."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    inter, union = _inter_union(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out if out.ndim else float(out)


def giou(a, b) -> np.ndarray:
    """Generalized IoU of corresponding xyxy boxes; 0.0 when the enclosing box is empty."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    inter, union = _inter_union(a, b)
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    with np.errstate(invalid="ignore", divide="ignore"):
        iou_v = np.where(union > 0, inter / union, 0.0)
        out = np.where(enclose > 0, iou_v - (enclose - union) / enclose, 0.0)
    return out if out.ndim else float(out)


def pairwise_iou(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.asarray(iou(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


def pairwise_giou(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.asarray(giou(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


# ------------------------------------------------------------------ differentiable


def cxcywh_to_xyxy_t(boxes: Tensor) -> Tensor:
    cxcy = boxes[..., 0:2]
    half = F.mul(boxes[..., 2:4], 0.5)
    return F.concat([F.sub(cxcy, half), F.add(cxcy, half)], axis=-1)


def giou_t(a: Tensor, b: Tensor, eps: float = 1e-9) -> Tensor:
    """Differentiable GIoU of aligned xyxy box tensors (..., 4) -> (...)."""
    area_a = F.mul(F.clip(F.sub(a[..., 2], a[..., 0]), 0), F.clip(F.sub(a[..., 3], a[..., 1]), 0))
    area_b = F.mul(F.clip(F.sub(b[..., 2], b[..., 0]), 0), F.clip(F.sub(b[..., 3], b[..., 1]), 0))
    iw = F.clip(F.sub(F.minimum(a[..., 2], b[..., 2]), F.maximum(a[..., 0], b[..., 0])), 0)
    ih = F.clip(F.sub(F.minimum(a[..., 3], b[..., 3]), F.maximum(a[..., 1], b[..., 1])), 0)
    inter = F.mul(iw, ih)
    union = F.sub(F.add(area_a, area_b), inter)
    cw = F.sub(F.maximum(a[..., 2], b[..., 2]), F.minimum(a[..., 0], b[..., 0]))
    ch = F.sub(F.maximum(a[..., 3], b[..., 3]), F.minimum(a[..., 1], b[..., 1]))
    enclose = F.mul(cw, ch)
    iou_v = F.div(inter, F.add(union, eps))
    return F.sub(iou_v, F.div(F.sub(enclose, union), F.add(enclose, eps)))


# ------------------------------------------------------------------ RoI pooling


def fpn_level(boxes_xyxy, canonical_size: float = 224.0, canonical_level: int = 4,
              min_level: int = 2, max_level: int = 5) -> np.ndarray:
    """Pyramid level per box: clamp(floor(4 + log2(sqrt(wh) / 224)), 2, 5)."""
    b = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4)
    scale = np.sqrt(area(b))
    with np.errstate(divide="ignore"):
        lvl = np.floor(canonical_level + np.log2(np.maximum(scale, 1e-12) / canonical_size))
    return np.clip(lvl, min_level, max_level).astype(int)


def roi_align(
    fpn: Mapping[int, Tensor],
    boxes: Tensor,
    batch_index,
    pool: int = 7,
    sampling: int = 2,
    image_size: tuple[float, float] | None = None,
    canonical_size: float = 224.0,
    channels_last: bool = False,
) -> Tensor:
    """Pool a ``pool x pool`` grid per xyxy box from its assigned pyramid level.

    ``fpn`` maps level ``l`` to a (B, C, H/2^l, W/2^l) tensor. Each bin averages
    ``sampling x sampling`` bilinear samples at half-pixel-aligned positions.
    Returns (M, C, P, P), or (M, P*P, C) with ``channels_last``. Gradients flow
    to the feature maps and to the box coordinates.
    """
    if pool < 1 or sampling < 1:
        raise ConfigError(f"pool and sampling must be >= 1, got {pool}, {sampling}")
    if not isinstance(boxes, Tensor):
        boxes = Tensor(boxes)
    batch_index = np.asarray(batch_index, dtype=np.intp).reshape(-1)
    if boxes.ndim != 2 or boxes.shape[1] != 4 or len(batch_index) != boxes.shape[0]:
        raise ShapeError(f"roi_align: boxes {boxes.shape} / batch index {batch_index.shape} mismatch")
    levels = sorted(fpn)
    some = fpn[levels[0]]
    channels = some.shape[1]
    m = boxes.shape[0]
    if m == 0:
        shape = (0, pool * pool, channels) if channels_last else (0, channels, pool, pool)
        return Tensor(np.zeros(shape, dtype=some.dtype))
    if image_size is None:
        image_size = (some.shape[3] * 2 ** levels[0], some.shape[2] * 2 ** levels[0])
    img_w, img_h = _check_size(image_size)
    xs = F.clip(boxes[:, 0::2], 0.0, img_w)
    ys = F.clip(boxes[:, 1::2], 0.0, img_h)
    lvl = fpn_level(
        np.stack([xs.data[:, 0], ys.data[:, 0], xs.data[:, 1], ys.data[:, 1]], 1),
        canonical_size, min_level=levels[0], max_level=levels[-1],
    )
    scale = (0.5 ** lvl).astype(boxes.dtype)[:, None]
    # fractional positions of the sample points along a box side, in [0, 1]
    steps = (np.arange(pool)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling) / pool
    frac = steps.reshape(-1).astype(boxes.dtype)  # (P*s,)
    fx = xs * scale
    fy = ys * scale
    span_x = F.sub(fx[:, 1:2], fx[:, 0:1])
    span_y = F.sub(fy[:, 1:2], fy[:, 0:1])
    px = F.sub(F.add(fx[:, 0:1], F.mul(span_x, frac[None, :])), 0.5)  # (M, P*s)
    py = F.sub(F.add(fy[:, 0:1], F.mul(span_y, frac[None, :])), 0.5)
    n = pool * sampling
    # full grid (M, P*s [y], P*s [x])
    gx = F.add(F.reshape(px, (m, 1, n)), np.zeros((1, n, 1), dtype=boxes.dtype))
    gy = F.add(F.reshape(py, (m, n, 1)), np.zeros((1, 1, n), dtype=boxes.dtype))
    pieces, order = [], []
    for level in levels:
        rows = np.nonzero(lvl == level)[0]
        if rows.size == 0:
            continue
        sx = F.reshape(F.take(gx, rows, 0), (-1,))
        sy = F.reshape(F.take(gy, rows, 0), (-1,))
        bidx = np.repeat(batch_index[rows], n * n)
        pieces.append(F.bilinear_sample(fpn[level], bidx, sx, sy))
        order.append(rows)
    sampled = pieces[0] if len(pieces) == 1 else F.concat(pieces, axis=0)
    order = np.concatenate(order)
    sampled = F.reshape(sampled, (m, n * n * channels))
    if not np.array_equal(order, np.arange(m)):
        sampled = F.take(sampled, np.argsort(order), 0)
    grid = F.reshape(sampled, (m, pool, sampling, pool, sampling, channels))
    pooled = F.mean(grid, axis=(2, 4))  # (M, P, P, C)
    if channels_last:
        return F.reshape(pooled, (m, pool * pool, channels))
    return F.transpose(pooled, (0, 3, 1, 2))
