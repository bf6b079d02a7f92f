"""Detection datasets, COCO-subset and pseudo-label ingestion, synthetic shapes.

Vocabularies are never merged across datasets: each image keeps the label
set of the dataset it came from, and joint training federates datasets only
through per-image task sampling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from omdet.errors import ConfigError, DataError, FormatError, UsageError

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring")
HUMAN, PSEUDO = "human", "pseudo"


@dataclass(frozen=True)
class Annotation:
    label: str
    box: tuple[float, float, float, float]  # xyxy, absolute pixels
    source: str = HUMAN
    confidence: float = 1.0


@dataclass(frozen=True)
class ImageRecord:
    image_id: object
    width: int
    height: int
    file_name: str | None = None


class DetectionDataset:
    """Images, per-image annotations and an ordered vocabulary.

    Pixels come either from an in-memory array table (synthetic data) or are
    decoded lazily from ``image_root / file_name`` and cached.
    """

    def __init__(self, name: str, vocabulary: Sequence[str], images: Mapping[object, ImageRecord],
                 annotations: Mapping[object, Sequence[Annotation]] | None = None,
                 arrays: Mapping[object, np.ndarray] | None = None, image_root=None,
                 resize: tuple[int, int] | None = None):
        self.name = name
        self.vocabulary = list(vocabulary)
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise DataError(f"dataset {name!r}: duplicate vocabulary entries")
        self.images = dict(images)
        self.annotations: dict[object, list[Annotation]] = {i: [] for i in self.images}
        vocab = set(self.vocabulary)
        for image_id, anns in (annotations or {}).items():
            if image_id not in self.images:
                raise DataError(f"dataset {name!r}: annotations for unknown image {image_id!r}")
            rec = self.images[image_id]
            for a in anns:
                if a.label not in vocab:
                    raise DataError(f"dataset {name!r}: label {a.label!r} not in vocabulary")
                self.annotations[image_id].append(_clamped(a, rec))
        self._arrays = dict(arrays or {})
        self._root = Path(image_root) if image_root is not None else None
        self._resize = resize
        self._cache: dict[object, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_ids(self) -> list:
        return list(self.images)

    def labels_of(self, image_id) -> set[str]:
        return {a.label for a in self.annotations.get(image_id, [])}

    def num_annotations(self) -> int:
        return sum(len(v) for v in self.annotations.values())

    def pixels(self, image_id) -> np.ndarray:
        """(3, H, W) float array in [0, 1]."""
        if image_id in self._arrays:
            return self._arrays[image_id]
        if image_id not in self.images:
            raise DataError(f"dataset {self.name!r}: unknown image {image_id!r}")
        arr = self._cache.get(image_id)
        if arr is None:
            arr = self._decode(self.images[image_id])
            arr.setflags(write=False)
            self._cache[image_id] = arr
        return arr

    def _decode(self, rec: ImageRecord) -> np.ndarray:
        if self._root is None or rec.file_name is None:
            raise DataError(f"dataset {self.name!r}: no pixel source for image {rec.image_id!r}")
        path = self._root / rec.file_name
        if not path.exists():
            raise DataError(f"image file not found: {path}")
        from PIL import Image

        with Image.open(path) as im:
            im = im.convert("RGB")
            if self._resize is not None:
                im = im.resize(self._resize, Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))

    def with_annotations(self, extra: Mapping[object, Sequence[Annotation]], vocabulary=None) -> "DetectionDataset":
        anns = {i: list(v) for i, v in self.annotations.items()}
        for image_id, items in extra.items():
            anns.setdefault(image_id, []).extend(items)
        out = DetectionDataset(self.name, vocabulary or self.vocabulary, self.images, anns,
                               self._arrays, self._root, self._resize)
        out._cache = self._cache
        return out

    def subset(self, image_ids: Sequence) -> "DetectionDataset":
        ids = list(image_ids)
        return DetectionDataset(self.name, self.vocabulary, {i: self.images[i] for i in ids},
                                {i: self.annotations[i] for i in ids},
                                {i: self._arrays[i] for i in ids if i in self._arrays},
                                self._root, self._resize)


def _clamped(a: Annotation, rec: ImageRecord) -> Annotation:
    x1, y1, x2, y2 = (float(v) for v in a.box)
    x1, x2 = sorted((min(max(x1, 0.0), rec.width), min(max(x2, 0.0), rec.width)))
    y1, y2 = sorted((min(max(y1, 0.0), rec.height), min(max(y2, 0.0), rec.height)))
    return Annotation(a.label, (x1, y1, x2, y2), a.source, float(a.confidence))


# ------------------------------------------------------------------ COCO subset


def load_coco_json(path, image_root=None, name: str | None = None, resize=None) -> DetectionDataset:
    """Read the images / annotations / categories subset of the COCO schema."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})", exc.pos) from None
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise FormatError(f"{path}: missing array {key!r}")
    cats = {}
    for c in doc["categories"]:
        _require(c, ("id", "name"), "category")
        cats[c["id"]] = c["name"]
    vocabulary = [cats[i] for i in sorted(cats)]
    images = {}
    for im in doc["images"]:
        _require(im, ("id", "width", "height"), "image")
        if im["id"] in images:
            raise FormatError(f"duplicate image id {im['id']!r}")
        images[im["id"]] = ImageRecord(im["id"], int(im["width"]), int(im["height"]), im.get("file_name"))
    anns: dict[object, list[Annotation]] = {}
    for a in doc["annotations"]:
        _require(a, ("image_id", "bbox", "category_id"), "annotation")
        ident = a.get("id", "?")
        if a["image_id"] not in images:
            raise FormatError(f"annotation {ident}: unknown image_id {a['image_id']!r}")
        if a["category_id"] not in cats:
            raise FormatError(f"annotation {ident}: unknown category_id {a['category_id']!r}")
        x, y, w, h = (float(v) for v in a["bbox"])
        anns.setdefault(a["image_id"], []).append(Annotation(cats[a["category_id"]], (x, y, x + w, y + h)))
    root = Path(image_root) if image_root is not None else path.parent
    return DetectionDataset(name or path.stem, vocabulary, images, anns, image_root=root, resize=resize)


def _require(entry, keys, kind: str) -> None:
    if not isinstance(entry, dict):
        raise FormatError(f"{kind} entry is not an object: {entry!r}")
    missing = [k for k in keys if k not in entry]
    if missing:
        raise FormatError(f"{kind} {entry.get('id', '?')}: missing keys {missing}")


# ------------------------------------------------------------------ pseudo labels


@dataclass
class IngestStats:
    kept: int = 0
    dropped_low_confidence: int = 0
    skipped_unknown_image: int = 0
    new_labels: list[str] = field(default_factory=list)


def ingest_pseudo_labels(dataset: DetectionDataset, path, min_confidence: float = 0.5
                         ) -> tuple[DetectionDataset, IngestStats]:
    """Append pseudo annotations from JSON lines ``{image_id, label, bbox, confidence}``."""
    stats = IngestStats()
    vocab = list(dataset.vocabulary)
    extra: dict[object, list[Annotation]] = {}
    path = Path(path)
    if not path.exists():
        raise DataError(f"pseudo-label file not found: {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        _require(rec, ("image_id", "label", "bbox", "confidence"), f"pseudo label (line {lineno})")
        if rec["image_id"] not in dataset.images:
            stats.skipped_unknown_image += 1
            log.warning("%s:%d: unknown image_id %r, skipped", path, lineno, rec["image_id"])
            continue
        conf = float(rec["confidence"])
        if conf < min_confidence:
            stats.dropped_low_confidence += 1
            continue
        label = str(rec["label"])
        if label not in vocab:
            vocab.append(label)
            stats.new_labels.append(label)
        box = tuple(float(v) for v in rec["bbox"])
        if len(box) != 4:
            raise FormatError(f"{path}:{lineno}: bbox needs 4 numbers")
        extra.setdefault(rec["image_id"], []).append(Annotation(label, box, PSEUDO, conf))
        stats.kept += 1
    return dataset.with_annotations(extra, vocab), stats


# ------------------------------------------------------------------ synthetic shapes


@dataclass
class ConflictSpec:
    """Per-dataset vocabularies over the shape set, plus rendering parameters."""

    datasets: dict[str, list[str]] = field(default_factory=lambda: {
        "A": ["circle", "square", "triangle", "cross"], "B": ["circle"], "C": ["square"],
    })
    images_per_dataset: int | dict[str, int] = 300
    image_size: int = 96
    min_shapes: int = 1
    max_shapes: int = 4
    shape_size: tuple[int, int] = (18, 34)
    noise_std: float = 0.08
    draw: list[str] | None = None  # shapes that may appear; default: union of vocabularies

    def __post_init__(self):
        for name, vocab in self.datasets.items():
            unknown = sorted(set(vocab) - set(SHAPES))
            if unknown:
                raise ConfigError(f"dataset {name!r}: unknown shapes {unknown}; choose from {list(SHAPES)}")
        if self.draw is not None and set(self.draw) - set(SHAPES):
            raise ConfigError(f"unknown shapes in draw list: {sorted(set(self.draw) - set(SHAPES))}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 1 <= min_shapes <= max_shapes")
        if self.image_size < 8:
            raise ConfigError("image_size too small")

    def count(self, name: str) -> int:
        n = self.images_per_dataset
        return int(n[name] if isinstance(n, dict) else n)

    def drawable(self) -> list[str]:
        if self.draw is not None:
            return list(self.draw)
        return sorted({s for v in self.datasets.values() for s in v}, key=SHAPES.index)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ConflictSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {unknown}")
        kw = dict(raw)
        if "shape_size" in kw:
            kw["shape_size"] = tuple(kw["shape_size"])
        return cls(**kw)


COLORS = {
    "circle": (0.9, 0.25, 0.2), "square": (0.2, 0.45, 0.95), "triangle": (0.2, 0.8, 0.3),
    "cross": (0.95, 0.8, 0.15), "ring": (0.75, 0.3, 0.85),
}


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean (size, size) stencil of a shape filling its square cell."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    r = size / 2.0
    if shape == "circle":
        m = (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    elif shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "triangle":
        m = np.abs(xx - c) <= (yy / size) * r
    elif shape == "cross":
        t = max(size / 6.0, 1.0)
        m = (np.abs(xx - c) <= t) | (np.abs(yy - c) <= t)
    elif shape == "ring":
        d2 = (xx - c) ** 2 + (yy - c) ** 2
        m = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return m


def tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Pixel-edge xyxy extent of the true pixels of a mask."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise UsageError("empty mask has no extent")
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def _render_image(rng: np.random.Generator, spec: ConflictSpec, kinds: list[str]):
    s = spec.image_size
    img = np.clip(0.5 + spec.noise_std * rng.standard_normal((3, s, s)), 0.0, 1.0)
    occupied = np.zeros((s, s), dtype=bool)
    placed = []
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        for _attempt in range(50):
            size = int(rng.integers(spec.shape_size[0], spec.shape_size[1] + 1))
            x0 = int(rng.integers(0, s - size + 1))
            y0 = int(rng.integers(0, s - size + 1))
            # one-pixel margin keeps shapes from touching
            lo_y, lo_x = max(y0 - 1, 0), max(x0 - 1, 0)
            if occupied[lo_y:y0 + size + 1, lo_x:x0 + size + 1].any():
                continue
            stencil = shape_mask(kind, size)
            full = np.zeros((s, s), dtype=bool)
            full[y0:y0 + size, x0:x0 + size] = stencil
            occupied[y0:y0 + size, x0:x0 + size] = True
            color = np.asarray(COLORS[kind])[:, None]
            img[:, full] = color
            placed.append((kind, tight_box(full)))
            break
    return img, placed


def generate_synthetic(spec: ConflictSpec | None = None, seed: int = 0) -> list[DetectionDataset]:
    """Render one dataset per vocabulary; every shape is drawn, only own labels annotated."""
    spec = spec or ConflictSpec()
    kinds = spec.drawable()
    out = []
    root = np.random.SeedSequence(seed)
    for child, (name, vocab) in zip(root.spawn(len(spec.datasets)), spec.datasets.items()):
        rng = np.random.default_rng(child)
        images, anns, arrays = {}, {}, {}
        own = set(vocab)
        for i in range(spec.count(name)):
            image_id = f"{name}-{i:05d}"
            img, placed = _render_image(rng, spec, kinds)
            img.setflags(write=False)
            arrays[image_id] = img
            images[image_id] = ImageRecord(image_id, spec.image_size, spec.image_size)
            anns[image_id] = [Annotation(kind, box) for kind, box in placed if kind in own]
        out.append(DetectionDataset(name, vocab, images, anns, arrays))
    return out


def shapes_in_image(dataset: DetectionDataset, image_id, spec: ConflictSpec) -> list[tuple[str, tuple]]:
    """Recover every drawn shape (annotated or not) by colour segmentation."""
    img = dataset.pixels(image_id)
    from scipy import ndimage

    found = []
    for kind in spec.drawable():
        color = np.asarray(COLORS[kind])[:, None, None]
        mask = np.all(np.abs(img - color) < 1e-9, axis=0)
        labelled, count = ndimage.label(mask)
        for sl in ndimage.find_objects(labelled):
            if sl is None:
                continue
            ys, xs = sl
            if (ys.stop - ys.start) * (xs.stop - xs.start) < 16:
                continue  # isolated noise pixels that happen to match exactly
            found.append((kind, (float(xs.start), float(ys.start), float(xs.stop), float(ys.stop))))
    return found


# ------------------------------------------------------------------ registry


class FederatedRegistry:
    """Datasets plus sampling weights; draws are a pure function of (seed, step)."""

    def __init__(self, datasets: Sequence[DetectionDataset], weights: Sequence[float] | None = None, seed: int = 0):
        if not datasets:
            raise UsageError("registry needs at least one dataset")
        names = [d.name for d in datasets]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate dataset names: {names}")
        self.datasets = list(datasets)
        if weights is None:
            weights = [len(d) for d in self.datasets]
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(self.datasets),) or (w < 0).any() or w.sum() <= 0:
            raise ConfigError(f"invalid dataset weights {list(weights)}")
        self.weights = w / w.sum()
        self.seed = int(seed)

    def __getitem__(self, name: str) -> DetectionDataset:
        for d in self.datasets:
            if d.name == name:
                return d
        raise KeyError(name)

    def draw(self, step: int, batch_size: int) -> list[tuple[DetectionDataset, object]]:
        """The ``step``-th batch of (dataset, image id) pairs."""
        rng = np.random.default_rng([self.seed, int(step)])
        picks = rng.choice(len(self.datasets), size=batch_size, p=self.weights)
        out = []
        for j in picks:
            ds = self.datasets[j]
            ids = ds.image_ids
            out.append((ds, ids[int(rng.integers(len(ids)))]))
        return out

    def epoch_size(self) -> int:
        return sum(len(d) for d in self.datasets)
