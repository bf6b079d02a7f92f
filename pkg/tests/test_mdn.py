import numpy as np
import pytest

from omdet.autodiff import Tape, Tensor, precision
from omdet.autodiff import functional as F
from omdet.autodiff.gradcheck import gradient_check_params
from omdet.errors import ConfigError, UsageError
from omdet.geometry import box_convert
from omdet.mdn import OmDet, init_proposals, stage_trace_json

from conftest import tiny_config


def _images(b=1, size=32, seed=0):
    return np.random.default_rng(seed).uniform(size=(b, 3, size, size)).astype(np.float32)


def test_init_proposals():
    q, b = init_proposals(4, 8, np.random.default_rng(0))
    assert q.shape == (4, 8)
    np.testing.assert_array_equal(box_convert(b, "cxcywh", "xyxy", (64, 64)), np.tile([0, 0, 64, 64], (4, 1)))
    q2, _ = init_proposals(4, 8, np.random.default_rng(0))
    np.testing.assert_array_equal(q, q2)
    with pytest.raises(ConfigError):
        init_proposals(0, 8, np.random.default_rng(0))


def test_same_seed_same_model():
    a, b = OmDet(tiny_config()), OmDet(tiny_config())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_forward_shapes_and_single_proposal():
    m = OmDet(tiny_config(num_proposals=1))
    out = m.forward(_images(2), [["circle", "square"], ["circle", None]])
    assert len(out.stages) == 2
    assert out.stages[-1].logits.shape == (2, 1, 2)
    assert out.stages[-1].boxes.shape == (2, 1, 4)
    masked = out.stages[-1].masked_logits()
    assert np.isneginf(masked[1, :, 1]).all() and np.isfinite(masked[0]).all()
    assert np.abs(out.stages[-1].logits.data).max() <= 20.0 + 1e-4


def test_task_errors(tiny_model):
    img = _images()
    with pytest.raises(UsageError):
        tiny_model.forward(img, [[None, None]])
    with pytest.raises(UsageError):
        tiny_model.forward(img, [["a", "a"]])
    with pytest.raises(UsageError):
        tiny_model.forward(img, [["a", "b", "c", "d", "e"]])
    with pytest.raises(ConfigError):
        tiny_model.forward(img, [["a"]], num_stages=3)


def test_one_stage_is_prefix(tiny_model):
    img = _images()
    one = tiny_model.forward(img, [["a", "b"]], num_stages=1)
    two = tiny_model.forward(img, [["a", "b"]])
    np.testing.assert_array_equal(one.stages[0].logits.data, two.stages[0].logits.data)
    np.testing.assert_array_equal(one.stages[0].boxes.data, two.stages[0].boxes.data)


def test_shallow_boxes_ignore_task_content():
    m = OmDet(tiny_config(shallow=True))
    img = _images()
    a = m.forward(img, [["circle", "square"]])
    b = m.forward(img, [["cross", "ring"]])
    np.testing.assert_array_equal(a.stages[-1].boxes.data, b.stages[-1].boxes.data)
    assert not np.array_equal(a.stages[-1].logits.data, b.stages[-1].logits.data)
    deep = OmDet(tiny_config())
    a = deep.forward(img, [["circle", "square"]])
    b = deep.forward(img, [["cross", "ring"]])
    assert not np.array_equal(a.stages[-1].boxes.data, b.stages[-1].boxes.data)


def test_task_permutation_equivariance(tiny_model64):
    img = _images().astype(np.float64)
    words = ["circle", "square", "triangle", None]
    perm = [2, 0, 1, 3]
    with precision("float64"):
        a = tiny_model64.forward(img, [words])
        b = tiny_model64.forward(img, [[words[i] for i in perm]])
    for sa, sb in zip(a.stages, b.stages):
        np.testing.assert_allclose(sb.logits.data[..., :3], sa.logits.data[..., perm][..., :3], rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(sb.boxes.data, sa.boxes.data, rtol=1e-9, atol=1e-12)


def test_stage_gradients_match_finite_differences():
    with precision("float64"):
        m = OmDet(tiny_config(detach_boxes=False))
    # move the proposal boxes off the clamp at w = h = 1
    m.proposal_boxes.data[...] = [0.45, 0.55, 0.7, 0.6] + np.random.default_rng(8).uniform(-0.05, 0.05, (5, 4))
    img = Tensor(_images().astype(np.float64))
    m.register_words(["circle", "square"])
    w = np.random.default_rng(9).standard_normal((1, 5, 2))

    def f():
        out = m.forward(img, [["circle", "square"]])
        return F.add(F.sum(F.mul(out.stages[-1].logits, w)), F.sum(out.stages[-1].boxes))

    with precision("float64"):
        params = {"q0": m.proposal_features, "b0": m.proposal_boxes, "word": m.word_embeddings["circle"],
                  "cls": m.stages[1].cls_out.weight, "attn": m.stages[0].attn.qkv.weight, "fpn": m.fpn.smooth[0].weight}
        errs = gradient_check_params(f, params, eps=1e-6, coords_per_param=6)
    assert max(errs.values()) < 1e-3, errs


def test_detect_contract(tiny_model):
    img = _images(size=64)
    (det,) = tiny_model.detect(img, ["circle"], score_thresh=0.0)
    assert len(det) == 5 and set(det.classes.tolist()) == {0}
    assert np.all(np.diff(det.scores) <= 0)
    assert np.all(det.boxes >= 0) and np.all(det.boxes[:, [0, 2]] <= 64) and np.all(det.boxes[:, [1, 3]] <= 64)
    (none,) = tiny_model.detect(img, ["circle"], score_thresh=1.0)
    assert len(none) == 0
    (few,) = tiny_model.detect(img, ["circle", "square"], score_thresh=0.0, max_det=3)
    assert len(few) == 3
    (traced,) = tiny_model.detect(img, ["circle", "square"], score_thresh=0.0, trace=True)
    assert traced.trace_boxes.shape == (2, len(traced), 4)
    np.testing.assert_allclose(traced.trace_boxes[-1], traced.boxes)
    items = __import__("json").loads(stage_trace_json(traced, top=2))
    assert len(items) == 2 and len(items[0]["stage_trace"]) == 2


def test_forward_deterministic(tiny_model):
    img = _images()
    with Tape():
        a = tiny_model.forward(img, [["a", "b"]]).stages[-1].logits.data
    b = tiny_model.forward(img, [["a", "b"]]).stages[-1].logits.data
    np.testing.assert_array_equal(a, b)
