"""Acceptance suite: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they happen;
they are also collected into the terminal summary. The training criteria
(4, 5, 6, 8, 10) carry the ``slow`` marker, deselect them with ``-m "not slow"``.
"""

import copy
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from omdet.autodiff import Tensor, precision
from omdet.autodiff.gradcheck import gradient_check_params
from omdet.data import ConflictSpec, generate_synthetic
from omdet.evaluation import EvalTarget, compute_ap, evaluate_dataset
from omdet.geometry import giou, iou, pairwise_iou
from omdet.matching import GroundTruth, brute_force_assignment, hungarian, set_prediction_loss
from omdet.mdn import OmDet
from omdet.sampler import sample_task
from omdet.train import TrainConfig, load_datasets, train

from conftest import ACCEPTANCE, tiny_config

OVERFIT_SPEC = {"datasets": {"O": ["circle", "square"]}, "images_per_dataset": 8, "image_size": 64,
                "shape_size": [14, 26], "max_shapes": 3}
CONFLICT_SPEC = {"images_per_dataset": 300, "image_size": 64, "shape_size": [14, 24], "max_shapes": 3}
CONFLICT_MODEL = {"backbone_channels": [16, 32, 64, 64], "pool": 4}
CONFLICT_STEPS = 4000
CONFLICT_LR = 2e-3
# every class of A is implicit background in B or C: B leaves squares, triangles and crosses unannotated,
# C circles, triangles and crosses
CONFLICTED = ("circle", "square", "triangle", "cross")
SEEDS = (0, 1, 2)


def record(num: int, ok: bool, detail: str, started: float | None = None):
    if started is not None:
        detail += f" [{time.time() - started:.1f}s]"
    verdict = "PASS" if ok else "FAIL"
    ACCEPTANCE.append((num, verdict, detail))
    print(f"criterion {num}: {verdict}  {detail}")
    assert ok, detail


def test_c01_hungarian_matches_exhaustive_search():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(1000):
        r, c = rng.integers(1, 7, size=2)
        cost = rng.standard_normal((r, c))
        agree += abs(hungarian(cost).cost - brute_force_assignment(cost)) <= 1e-9
    record(1, agree == 1000 and time.time() - t0 < 10, f"{agree}/1000 optimal", t0)


def test_c02_geometry_suite():
    t0 = time.time()
    hand = [([0, 0, 2, 2], [1, 0, 3, 2], 1 / 3, 1 / 3), ([0, 0, 1, 1], [2, 2, 3, 3], 0.0, -7 / 9),
            ([1, 1, 4, 5], [1, 1, 4, 5], 1.0, 1.0), ([0, 0, 4, 4], [2, 2, 6, 6], 4 / 28, 4 / 28 - 8 / 36)]
    hand_err = max(max(abs(iou(np.array(a, float), np.array(b, float)) - wi),
                       abs(giou(np.array(a, float), np.array(b, float)) - wg)) for a, b, wi, wg in hand)
    rng = np.random.default_rng(5)
    p = rng.uniform(0, 100, (10_000, 2, 4))
    a = np.concatenate([np.minimum(p[:, 0, :2], p[:, 0, 2:]), np.maximum(p[:, 0, :2], p[:, 0, 2:])], 1)
    b = np.concatenate([np.minimum(p[:, 1, :2], p[:, 1, 2:]), np.maximum(p[:, 1, :2], p[:, 1, 2:])], 1)
    i, g = iou(a, b), giou(a, b)
    props = bool(np.all(g <= i + 1e-12) and np.all(g > -1) and np.all(g <= 1))
    ok = hand_err <= 1e-9 and props and time.time() - t0 < 5
    record(2, ok, f"hand max err {hand_err:.1e}, 10^4 pairs bounded={props}", t0)


def test_c03_end_to_end_loss_gradient():
    t0 = time.time()
    with precision("float64"):
        m = OmDet(tiny_config(num_proposals=5, d=16, stages=2, max_k=3, detach_boxes=False))
        # keep the proposal boxes off the unit-square clamp, where the loss has a kink
        m.proposal_boxes.data[...] = [0.45, 0.55, 0.7, 0.6] + np.random.default_rng(8).uniform(-0.05, 0.05, (5, 4))
        task = [["circle", "square", "triangle"]]
        m.register_words(task[0])
        img = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 32, 32)))
        gts = [GroundTruth([0, 2], [[0.3, 0.4, 0.3, 0.25], [0.7, 0.6, 0.2, 0.35]])]
        out = m.forward(img, task)
        fixed = set_prediction_loss(out.stages, gts, out.context.valid)[1].assignments

        def loss():
            o = m.forward(img, task)
            return set_prediction_loss(o.stages, gts, o.context.valid, assignments=fixed)[0]

        params = dict(m.named_parameters())
        # conv biases feeding GroupNorm have an exactly-zero gradient; the floor absorbs ~1e-9 of round-off
        errs = gradient_check_params(loss, params, eps=1e-5, coords_per_param=4, rng=np.random.default_rng(1),
                                     floor=1e-5)
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-3 and time.time() - t0 < 120
    record(3, ok, f"{len(errs)} parameter groups, max rel err {errs[worst]:.1e} ({worst})", t0)


def overfit_config(out_dir) -> TrainConfig:
    return TrainConfig.from_dict(dict(
        datasets=[{"type": "synthetic", "seed": 0, "spec": OVERFIT_SPEC}], lr=1e-3, steps=500, steps_per_epoch=100,
        batch_mode="all", task_mode="full_vocabulary", K=2, N=20, S=4, seed=0, weight_decay=0.0,
        output_dir=str(out_dir)))


@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    runs = []
    for name in ("first", "second"):
        cfg = overfit_config(tmp_path_factory.mktemp("overfit") / name)
        t0 = time.time()
        result = train(cfg)
        runs.append((cfg, result, time.time() - t0))
    return runs


@pytest.mark.slow
def test_c04_overfit_sanity(overfit_runs):
    cfg, result, seconds = overfit_runs[0]
    rep = evaluate_dataset(result.model, load_datasets(cfg)[0])
    ok = result.last_loss < 0.05 and rep.ap50 == 1.0 and seconds < 600
    record(4, ok, f"final loss {result.last_loss:.4f}, AP50 {rep.ap50:.3f} after {result.steps} steps "
                  f"[{seconds:.0f}s train]")


@pytest.mark.slow
def test_c10_determinism(overfit_runs):
    (cfg_a, res_a, _), (cfg_b, res_b, _) = overfit_runs
    same_ckpt = res_a.checkpoint.read_bytes() == res_b.checkpoint.read_bytes()
    same_log = res_a.metrics_path.read_bytes() == res_b.metrics_path.read_bytes()
    record(10, same_ckpt and same_log, f"checkpoints identical={same_ckpt}, metric logs identical={same_log}")


@pytest.fixture(scope="module")
def conflict_runs(tmp_path_factory):
    """Deep and shallow joint models on A, B, C for each seed, plus a held-out copy of A."""
    root = tmp_path_factory.mktemp("conflict")
    models, seconds = {}, 0.0
    for seed in SEEDS:
        for shallow in (False, True):
            cfg = TrainConfig.from_dict(dict(
                datasets=[{"type": "synthetic", "seed": 100 + seed, "spec": CONFLICT_SPEC}], lr=CONFLICT_LR,
                steps=CONFLICT_STEPS, steps_per_epoch=CONFLICT_STEPS, batch_size=8, K=4, N=16, S=3, d=32,
                shallow=shallow, seed=seed, model=dict(CONFLICT_MODEL),
                output_dir=str(root / f"{'shallow' if shallow else 'deep'}{seed}")))
            t0 = time.time()
            models[shallow, seed] = train(cfg).model
            seconds += time.time() - t0
    test_a = generate_synthetic(ConflictSpec.from_dict({**CONFLICT_SPEC, "images_per_dataset": 100}), 999)[0]
    return models, test_a, seconds


@pytest.mark.slow
def test_c05_deep_fusion_beats_shallow_on_conflicted_classes(conflict_runs):
    models, test_a, seconds = conflict_runs
    recall = {False: [], True: []}
    class_ap50 = {False: [], True: []}
    ap50 = {False: [], True: []}
    for (shallow, seed), model in sorted(models.items()):
        rep = evaluate_dataset(model, test_a)
        recall[shallow].append(np.mean([rep.by_name(c).recall50_at_score for c in CONFLICTED]))
        class_ap50[shallow].append([rep.by_name(c).ap50 for c in CONFLICTED])
        ap50[shallow].append(rep.ap50)
    gap = float(np.mean(recall[False]) - np.mean(recall[True]))
    deep_ap50 = float(np.mean(ap50[False]))
    ok = gap >= 0.15 and deep_ap50 >= 0.80 and seconds <= 3600
    per_class = "; ".join(f"{c} {d:.2f}/{s:.2f}" for c, d, s in
                          zip(CONFLICTED, np.mean(class_ap50[False], 0), np.mean(class_ap50[True], 0)))
    record(5, ok, f"recall@0.5 (score>=0.3) deep {np.round(recall[False], 3).tolist()} vs shallow "
                  f"{np.round(recall[True], 3).tolist()}, gap {gap:+.3f}; AP50 deep {deep_ap50:.3f} vs shallow "
                  f"{np.mean(ap50[True]):.3f}; per-class AP50 deep/shallow {per_class} [{seconds:.0f}s train]")


@pytest.mark.slow
def test_c06_task_conditioning(conflict_runs):
    models, test_a, _ = conflict_runs
    t0 = time.time()
    model = models[False, SEEDS[0]]
    stray, found, total, used = 0, 0, 0, 0
    for image_id in test_a.image_ids:
        anns = test_a.annotations[image_id]
        labels = {a.label for a in anns}
        if not {"circle", "square"} <= labels:
            continue
        used += 1
        px = test_a.pixels(image_id)[None]
        squares = np.array([a.box for a in anns if a.label == "square"])
        (only_circle,) = model.detect(px, ["circle"], score_thresh=0.3)
        if len(only_circle):
            stray += int((pairwise_iou(only_circle.boxes, squares) >= 0.5).any(axis=1).sum())
        (both,) = model.detect(px, ["circle", "square"], score_thresh=0.3)
        for a in anns:
            if a.label not in ("circle", "square"):
                continue
            total += 1
            hit = both.classes == ["circle", "square"].index(a.label)
            found += bool(hit.any() and (pairwise_iou(both.boxes[hit], np.array([a.box])) >= 0.5).any())
    recall = found / max(total, 1)
    ok = used > 0 and stray == 0 and recall >= 0.9 and time.time() - t0 < 60
    record(6, ok, f"{used} circle+square images: {stray} square hits under task {{circle}}, "
                  f"recall {recall:.3f} under {{circle, square}}", t0)


def test_c07_sampler_statistics():
    t0 = time.time()
    rng = np.random.default_rng(11)
    vocab = [f"w{i}" for i in range(12)]
    counts = np.zeros(8, dtype=int)
    broken = 0
    for i in range(100_000):
        labels = vocab[i % 5 : i % 5 + i % 7]
        t = sample_task(labels, vocab, 8, rng)
        counts[t.k - 1] += 1
        pos, neg = set(t.positives), set(t.negatives)
        broken += not (pos | neg == set(t.words) and not pos & neg and pos <= set(labels)
                       and not neg & set(labels) and len(t.words) + t.pad_count == t.k)
    p = chisquare(counts).pvalue
    ok = p > 0.01 and broken == 0 and time.time() - t0 < 30
    record(7, ok, f"chi-square p={p:.3f}, invariant violations {broken}", t0)


@pytest.mark.slow
def test_c08_permutation_equivariance(conflict_runs):
    models, test_a, _ = conflict_runs
    t0 = time.time()
    model = copy.deepcopy(models[False, SEEDS[0]])
    # widen the trained float32 weights so reordering only shows float64 round-off
    for _, p in model.named_parameters():
        p.data = p.data.astype(np.float64)
    rng = np.random.default_rng(3)
    vocab = test_a.vocabulary
    worst, class_ok = 0.0, True
    with precision("float64"):
        for trial in range(100):
            image_id = test_a.image_ids[trial % len(test_a)]
            px = test_a.pixels(image_id)[None].astype(np.float64)
            k = int(rng.integers(1, len(vocab) + 1))
            task = list(rng.choice(vocab, size=k, replace=False))
            perm = rng.permutation(k)
            (a,) = model.detect(px, task, score_thresh=0.0)
            (b,) = model.detect(px, [task[j] for j in perm], score_thresh=0.0)
            da = {(p, a.words[c]): (box, s) for p, c, box, s in zip(a.proposals, a.classes, a.boxes, a.scores)}
            db = {(p, b.words[c]): (box, s) for p, c, box, s in zip(b.proposals, b.classes, b.boxes, b.scores)}
            class_ok &= da.keys() == db.keys()
            class_ok &= all(b.words[c] == task[perm[c]] for c in b.classes)
            for key in da.keys() & db.keys():
                (ba, sa), (bb, sb) = da[key], db[key]
                worst = max(worst, np.max(np.abs(ba - bb) / np.maximum(np.abs(ba), 1.0)), abs(sa - sb) / max(sa, 1e-12))
    ok = class_ok and worst < 1e-5 and time.time() - t0 < 60
    record(8, ok, f"100 tasks, max rel deviation {worst:.1e}, classes permuted exactly={class_ok}", t0)


def test_c09_ap_evaluator():
    t0 = time.time()

    def dets(boxes, classes, scores):
        from types import SimpleNamespace
        return SimpleNamespace(boxes=np.array(boxes, float).reshape(-1, 4), classes=np.array(classes),
                               scores=np.array(scores, float))

    boxes = [[0, 0, 10, 10], [20, 20, 30, 34]]
    half = compute_ap([dets(boxes[:1], [0], [0.9])], [EvalTarget([0, 0], boxes)], ["a"], iou_thresholds=[0.5]).ap50
    perfect = compute_ap([dets(boxes, [0, 1], [0.9, 0.8])], [EvalTarget([0, 1], boxes)], ["a", "b"])
    dup = compute_ap([dets([boxes[0], boxes[0]], [0, 0], [0.9, 0.8])], [EvalTarget([0], boxes[:1])], ["a"])
    dup_fp = dup.by_name("a").tp50 == 1
    # a higher-scored near-duplicate that misses IoU 0.5 halves precision at full recall
    low = compute_ap([dets([[0, 0, 4, 10], boxes[0]], [0, 0], [0.9, 0.8])], [EvalTarget([0], boxes[:1])], ["a"],
                     iou_thresholds=[0.5]).ap50
    ok = (abs(half - 51 / 101) <= 1e-6 and abs(half - 0.50495) <= 1e-5 and perfect.ap == 1.0 and dup_fp
          and dup.ap50 == 1.0 and abs(low - 0.5) <= 1e-9 and time.time() - t0 < 5)
    record(9, ok, f"half-recall AP50 {half:.6f} (51/101={51 / 101:.6f}), duplicate counted FP={dup_fp}", t0)
