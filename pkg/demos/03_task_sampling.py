"""How a training task is built from one image's labels.

Run: python3 demos/03_task_sampling.py
"""

from collections import Counter
from types import SimpleNamespace

import numpy as np

from omdet.sampler import num_possible_tasks, sample_task

vocab = ["circle", "square", "triangle", "cross", "ring"]
image = [SimpleNamespace(label=l, box=(0, 0, 8, 8)) for l in ("circle", "circle", "square", "triangle")]
labels = sorted({a.label for a in image})

rng = np.random.default_rng(4)
for _ in range(5):
    t = sample_task(labels, vocab, 4, rng, image)
    # k is drawn first; positives are a subset of what is in the picture,
    # negatives fill up from words that are absent, pads fill the rest
    print(f"k={t.k} words={t.slots()} kept boxes={len(t.filtered_gts)}")

# With only one word in the vocabulary the task is padded instead.
t = sample_task(["circle"], ["circle"], 4, rng, image[:2])
print("one-word dataset:", t.slots())

print("k histogram over 10000 draws:",
      sorted(Counter(sample_task(labels, vocab, 4, rng).k for _ in range(10_000)).items()))
print(f"distinct 20-word tasks from 1200 words: {num_possible_tasks(1200, 20):.2e}")
