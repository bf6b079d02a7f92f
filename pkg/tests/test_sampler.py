import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.stats import chisquare

from omdet.errors import UsageError
from omdet.sampler import build_batch, full_vocabulary_task, num_possible_tasks, sample_task
from omdet.text import PAD


def ann(label):
    return SimpleNamespace(label=label, box=(0.0, 0.0, 4.0, 4.0))


def test_possible_tasks_count():
    assert num_possible_tasks(1200, 20) == math.comb(1200, 20)
    assert f"{num_possible_tasks(1200, 20):.2e}" == "1.34e+43"


def test_subset_rule_drops_annotations():
    labels = ["a", "b", "c", "d", "e"]
    anns = [ann(x) for x in labels] + [ann("a")]
    for seed in range(50):
        rng = np.random.default_rng(seed)
        t = sample_task(labels, labels + ["f"], 8, rng, anns)
        if t.k == 2:
            assert len(t.positives) == 2 and not t.negatives
            assert {a.label for a in t.filtered_gts} == set(t.positives)
            assert len(t.filtered_gts) == sum(a.label in t.positives for a in anns)
            break
    else:
        pytest.fail("k=2 never drawn")


def test_padding_rule():
    for seed in range(200):
        t = sample_task({"a"}, {"a"}, 4, np.random.default_rng(seed))
        if t.k == 4:
            assert t.words == ["a"] and t.pad_count == 3 and not t.negatives
            assert t.slots() == ["a", PAD, PAD, PAD]
            return
    pytest.fail("k=4 never drawn")


def test_errors():
    with pytest.raises(UsageError):
        sample_task(set(), set(), 4, np.random.default_rng(0))
    with pytest.raises(UsageError):
        sample_task({"a"}, {"b"}, 4, np.random.default_rng(0))
    with pytest.raises(UsageError):
        sample_task({"a"}, {"a"}, 0, np.random.default_rng(0))


def test_k_uniform_and_invariants_over_1e5_draws():
    rng = np.random.default_rng(7)
    vocab = [f"w{i}" for i in range(12)]
    counts = np.zeros(8, dtype=int)
    for i in range(100_000):
        m = i % 7
        labels = vocab[i % 5 : i % 5 + m]
        t = sample_task(labels, vocab, 8, rng)
        counts[t.k - 1] += 1
        words = set(t.words)
        assert set(t.positives) | set(t.negatives) == words
        assert not set(t.positives) & set(t.negatives)
        assert set(t.positives) <= set(labels)
        assert not set(t.negatives) & set(labels)
        assert len(t.words) + t.pad_count == t.k
    assert chisquare(counts).pvalue > 0.01


def test_negatives_fill_then_pad():
    vocab = ["a", "b", "c"]
    for seed in range(100):
        t = sample_task({"a"}, vocab, 6, np.random.default_rng(seed))
        assert len(t.negatives) == min(t.k - 1, 2)
        assert t.pad_count == max(0, t.k - 3)


def test_determinism():
    vocab = [f"w{i}" for i in range(20)]
    a = [sample_task(vocab[:3], vocab, 8, np.random.default_rng(3)).words for _ in range(5)]
    b = [sample_task(vocab[:3], vocab, 8, np.random.default_rng(3)).words for _ in range(5)]
    assert a == b


class _FakeDataset:
    name = "F"
    vocabulary = [f"w{i}" for i in range(50)]

    def __init__(self):
        from omdet.data import Annotation
        self.annotations = {0: [Annotation("w3", (0.0, 0.0, 16.0, 8.0)), Annotation("w7", (8.0, 8.0, 32.0, 32.0))]}

    def pixels(self, image_id):
        return np.zeros((3, 32, 32), dtype=np.float32)


def test_build_batch_remaps_classes_and_samples_independently():
    ds = _FakeDataset()
    batch = build_batch([(ds, 0), (ds, 0)], 8, np.random.default_rng(11))
    assert batch.images.shape == (2, 3, 32, 32)
    assert batch.tasks[0] != batch.tasks[1]
    for task, gt, s in zip(batch.tasks, batch.gts, batch.sampled):
        for cls, box in zip(gt.classes, gt.boxes):
            label = task[cls]
            assert label in s.positives
            ref = next(a for a in s.filtered_gts if a.label == label)
            cx = (ref.box[0] + ref.box[2]) / 2 / 32
            assert box[0] == pytest.approx(cx)
    assert batch.valid.shape == (2, max(len(t) for t in batch.tasks))


def test_full_vocabulary_task():
    t = full_vocabulary_task({"b"}, ["c", "a", "b"], [ann("b")])
    assert t.words == ["a", "b", "c"] and t.positives == ["b"] and t.negatives == ["a", "c"]
    with pytest.raises(UsageError):
        build_batch([(_FakeDataset(), 0)], 8, np.random.default_rng(0), mode="full_vocabulary")
