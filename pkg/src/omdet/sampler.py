"""Per-image task sampling for multi-dataset training.

For every image a task size ``k ~ Uniform{1..K}`` is drawn. If the image has
more label types than ``k`` a random subset is kept and the other labels'
annotations are dropped for this step only; otherwise the task is topped up
with negatives from the image's own dataset vocabulary, and finally with pad
slots when the vocabulary runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from omdet.errors import UsageError
from omdet.geometry import box_convert
from omdet.matching import GroundTruth
from omdet.text import PAD


@dataclass
class SampledTask:
    words: list[str]  # real words only, in task order
    positives: list[str]
    negatives: list[str]
    pad_count: int
    filtered_gts: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.words) + self.pad_count

    def slots(self) -> list[str | None]:
        return list(self.words) + [PAD] * self.pad_count

    def to_json(self) -> dict:
        return {
            "words": self.words, "positives": self.positives, "negatives": self.negatives,
            "pad_count": self.pad_count, "num_gts": len(self.filtered_gts),
        }


def num_possible_tasks(vocab_size: int, k: int) -> int:
    """Distinct k-word tasks over a vocabulary (order ignored)."""
    return math.comb(vocab_size, k)


def sample_task(image_labels, dataset_vocab, max_k: int, rng: np.random.Generator,
                annotations: Sequence | None = None, shuffle: bool = True) -> SampledTask:
    """Draw one task for an image; ``annotations`` items expose ``.label``."""
    if max_k < 1:
        raise UsageError("K must be >= 1")
    labels = sorted(set(image_labels))
    vocab = set(dataset_vocab)
    if not labels and not vocab:
        raise UsageError("cannot sample a task: image has no labels and the vocabulary is empty")
    if not set(labels) <= vocab:
        raise UsageError(f"image labels {sorted(set(labels) - vocab)} are missing from the vocabulary")
    k = int(rng.integers(1, max_k + 1))
    if len(labels) > k:
        keep = rng.choice(len(labels), size=k, replace=False)
        positives = [labels[i] for i in sorted(keep)]
    else:
        positives = labels
    negatives: list[str] = []
    if len(positives) < k:
        pool = sorted(vocab - set(labels))
        n_neg = min(k - len(positives), len(pool))
        if n_neg:
            picks = rng.choice(len(pool), size=n_neg, replace=False)
            negatives = [pool[i] for i in sorted(picks)]
    words = positives + negatives
    if shuffle:
        words = [words[i] for i in rng.permutation(len(words))]
    pad = k - len(words)
    kept = set(positives)
    filtered = [a for a in (annotations or []) if a.label in kept]
    return SampledTask(words, positives, negatives, pad, filtered)


def full_vocabulary_task(image_labels, dataset_vocab, annotations: Sequence | None = None) -> SampledTask:
    """The whole vocabulary in alphabetical order, every annotation kept."""
    vocab = sorted(set(dataset_vocab))
    labels = set(image_labels)
    if not vocab:
        raise UsageError("cannot build a task from an empty vocabulary")
    if not labels <= set(vocab):
        raise UsageError(f"image labels {sorted(labels - set(vocab))} are missing from the vocabulary")
    return SampledTask(vocab, [w for w in vocab if w in labels], [w for w in vocab if w not in labels], 0,
                       list(annotations or []))


@dataclass
class TrainingBatch:
    images: np.ndarray  # (B, 3, H, W)
    tasks: list[list[str | None]]
    gts: list[GroundTruth]
    sampled: list[SampledTask]
    sources: list[tuple[str, object]]  # (dataset name, image id)

    @property
    def valid(self) -> np.ndarray:
        width = max(len(t) for t in self.tasks)
        return np.array([[i < len(t) and t[i] is not PAD for i in range(width)] for t in self.tasks])


def task_targets(task: SampledTask, image_size) -> GroundTruth:
    """Ground truths of a sampled task with class indices = positions in the task."""
    index = {w: i for i, w in enumerate(task.words)}
    classes, boxes = [], []
    for ann in task.filtered_gts:
        classes.append(index[ann.label])
        boxes.append(box_convert(np.asarray(ann.box, dtype=np.float64), "xyxy", "cxcywh", image_size))
    return GroundTruth(np.array(classes, dtype=np.intp), np.array(boxes).reshape(-1, 4))


def build_batch(items: Sequence, max_k: int, rng: np.random.Generator, mode: str = "sampled") -> TrainingBatch:
    """Assemble a batch from ``(dataset, image_id)`` pairs with one task per image.

    ``mode="full_vocabulary"`` replaces sampling with the fixed evaluation task.
    """
    if not items:
        raise UsageError("empty batch")
    if mode not in ("sampled", "full_vocabulary"):
        raise UsageError(f"unknown task mode {mode!r}")
    images, tasks, gts, sampled, sources = [], [], [], [], []
    size = None
    for dataset, image_id in items:
        pixels = dataset.pixels(image_id)
        if size is None:
            size = pixels.shape
        elif pixels.shape != size:
            raise UsageError(f"batch mixes image shapes {size} and {pixels.shape}")
        anns = dataset.annotations.get(image_id, [])
        labels = {a.label for a in anns}
        if mode == "sampled":
            task = sample_task(labels, dataset.vocabulary, max_k, rng, anns)
        else:
            task = full_vocabulary_task(labels, dataset.vocabulary, anns)
            if task.k > max_k:
                raise UsageError(f"vocabulary of {dataset.name!r} has {task.k} words but K={max_k}")
        images.append(pixels)
        sampled.append(task)
        tasks.append(task.slots())
        gts.append(task_targets(task, (pixels.shape[2], pixels.shape[1])))
        sources.append((dataset.name, image_id))
    width = max(len(t) for t in tasks)
    tasks = [t + [PAD] * (width - len(t)) for t in tasks]
    return TrainingBatch(np.stack(images), tasks, gts, sampled, sources)
