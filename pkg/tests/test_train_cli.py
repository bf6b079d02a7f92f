import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from omdet.checkpoint import config_hash, load_checkpoint, save_checkpoint
from omdet.cli import main
from omdet.errors import ConfigError, FormatError, NumericError
from omdet.train import (
    AdamW,
    TrainConfig,
    apply_freeze_mask,
    build_model,
    load_datasets,
    load_model,
    lr_at,
    read_metrics,
    train,
)

SPEC = {"datasets": {"A": ["circle", "square"], "B": ["circle"]}, "images_per_dataset": 4, "image_size": 32,
        "shape_size": [8, 14], "max_shapes": 2}
SMALL = {"backbone_channels": [4, 4, 8, 8], "stem_channels": 4, "pool": 2, "encoder_layers": 1, "ffn_hidden": 16,
         "d_text": 8}


def small_cfg(tmp_path, **kw) -> TrainConfig:
    raw = dict(datasets=[{"type": "synthetic", "seed": 0, "spec": SPEC}], lr=1e-3, steps=6, steps_per_epoch=3,
               batch_size=2, K=2, N=4, S=2, d=16, model=dict(SMALL), output_dir=str(tmp_path / "run"))
    raw.update(kw)
    return TrainConfig.from_dict(raw)


def test_lr_schedule():
    assert lr_at(0, 100, 5e-5) == 5e-5
    assert lr_at(69, 100, 5e-5) == 5e-5
    assert lr_at(75, 100, 5e-5) == pytest.approx(5e-6)
    assert lr_at(95, 100, 5e-5) == pytest.approx(5e-7)
    assert TrainConfig().lr == 5e-5


def test_config_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="lrr"):
        TrainConfig.from_dict({"lrr": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"tuning_mode": "everything"})
    with pytest.raises(ConfigError, match="colour"):
        load_datasets(small_cfg(tmp_path, datasets=[{"type": "synthetic", "colour": 1}]))


def test_freeze_masks(tmp_path):
    cfg = small_cfg(tmp_path, model={**SMALL, "d_text": 32})
    model = build_model(cfg, ["circle", "square", "triangle"])
    total = sum(p.data.size for _, p in model.named_parameters())
    words = sum(p.data.size for n, p in model.named_parameters() if n.startswith("word_embeddings."))
    full = apply_freeze_mask(model, "full")
    assert sum(p.data.size for p in full.values()) == total - words
    head = apply_freeze_mask(model, "head_only")
    assert not any(n.startswith(("backbone.", "fpn.", "word_embeddings.")) for n in head)
    prompt = apply_freeze_mask(model, "prompt", ["circle", "square", "triangle"])
    assert sum(p.data.size for p in prompt.values()) == 96
    with pytest.raises(ConfigError):
        apply_freeze_mask(model, "bogus")


@pytest.mark.parametrize("mode", ["head_only", "prompt"])
def test_frozen_parameters_stay_bit_identical(tmp_path, mode):
    cfg = small_cfg(tmp_path, tuning_mode=mode, steps=3, prompt_words=["circle"] if mode == "prompt" else None)
    before = build_model(cfg, ["circle", "square"])
    snapshot = {n: p.data.copy() for n, p in before.named_parameters()}
    result = train(cfg)
    changed = set()
    for n, p in result.model.named_parameters():
        if n in snapshot and not np.array_equal(snapshot[n], p.data):
            changed.add(n)
    assert changed
    if mode == "head_only":
        assert not any(n.startswith(("backbone.", "fpn.", "word_embeddings.")) for n in changed)
    else:
        assert changed == {"word_embeddings.circle"}


def test_adamw_clips_and_decays():
    from omdet.autodiff import Tensor

    p = Tensor(np.ones(4), requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.5, clip_norm=1.0)
    norm = opt.step({p: np.full(4, 10.0)}, lr=0.1)
    assert norm == pytest.approx(20.0)
    # first Adam step moves each coordinate by lr * (1 + wd * p)
    np.testing.assert_allclose(p.data, 1 - 0.1 * (1 + 0.5), rtol=1e-6)


def test_checkpoint_round_trip_and_errors(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5]), "c": np.arange(3)}
    path = tmp_path / "x.omck"
    save_checkpoint(path, arrays, {"step": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"step": 3}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)
    raw = path.read_bytes()
    for blob in (b"NOPE" + raw[4:], raw[:-5]):
        path.write_bytes(blob)
        with pytest.raises(FormatError):
            load_checkpoint(path)
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_training_is_deterministic_and_resumable(tmp_path):
    a = train(small_cfg(tmp_path, output_dir=str(tmp_path / "a")))
    b = train(small_cfg(tmp_path, output_dir=str(tmp_path / "b")))
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    assert (tmp_path / "a/last.omck").read_bytes() == (tmp_path / "b/last.omck").read_bytes()
    # interrupt after the first epoch, then resume from its checkpoint
    cfg = small_cfg(tmp_path, output_dir=str(tmp_path / "c"))
    train(cfg, stop_after=4)
    train(cfg, resume=tmp_path / "c/epoch001.omck")
    assert (tmp_path / "c/metrics.jsonl").read_bytes() == (tmp_path / "a/metrics.jsonl").read_bytes()
    assert (tmp_path / "c/last.omck").read_bytes() == (tmp_path / "a/last.omck").read_bytes()
    assert len(read_metrics(tmp_path / "a/metrics.jsonl")) == 6
    with pytest.raises(ConfigError):
        train(small_cfg(tmp_path, lr=2e-3, output_dir=str(tmp_path / "d")), resume=tmp_path / "c/epoch001.omck")
    model, _, meta = load_model(tmp_path / "a/last.omck")
    assert meta["step"] == 6 and model.config.num_proposals == 4


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("OMDET_OUTPUT_DIR", str(tmp_path / "env"))
    train(small_cfg(tmp_path, steps=1))
    assert (tmp_path / "env/metrics.jsonl").exists()


@pytest.mark.filterwarnings("ignore:overflow")
def test_numeric_abort(tmp_path):
    with pytest.raises(NumericError, match="last good checkpoint"):
        train(small_cfg(tmp_path, lr=1e36, clip_norm=None, steps=20))


def _write_yaml(path: Path, data) -> Path:
    path.write_text(yaml.safe_dump(data))
    return path


def _cfg_yaml(tmp_path, **kw):
    raw = dict(datasets=[{"type": "synthetic", "seed": 0, "spec": SPEC}], lr=1e-3, steps=2, steps_per_epoch=2,
               batch_size=2, K=2, N=4, S=2, d=16, model=SMALL, output_dir="run")
    raw.update(kw)
    return _write_yaml(tmp_path / "cfg.yaml", raw)


@pytest.mark.filterwarnings("ignore:overflow")
def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", str(_write_yaml(tmp_path / "bad.yaml", {"nope": 1}))]) == 2
    missing = _cfg_yaml(tmp_path, datasets=[{"type": "coco", "path": "missing.json"}])
    assert main(["train", str(missing)]) == 3
    assert "missing.json" in capsys.readouterr().err
    nan = _cfg_yaml(tmp_path, lr=1e36, clip_norm=None, steps=20)
    assert main(["train", str(nan)]) == 4
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty), "--out", str(tmp_path / "rep")]) == 3
    assert not (tmp_path / "rep").exists() or not any((tmp_path / "rep").iterdir())


def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = _cfg_yaml(tmp_path)
    assert main(["sample-task", str(cfg), "--steps", "2"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert len(lines) == 4 and all(set(x["positives"]) <= set(x["words"]) for x in lines)

    assert main(["train", str(cfg)]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert Path(ckpt).exists()

    spec = _write_yaml(tmp_path / "spec.yaml", SPEC)
    assert main(["gen-synthetic", str(spec), "--out", str(tmp_path / "syn"), "--seed", "3"]) == 0
    written = json.loads(capsys.readouterr().out)
    a_json = next(w["json"] for w in written if w["dataset"] == "A")

    report = tmp_path / "eval.json"
    assert main(["eval", ckpt, a_json, "--output", str(report), "--pr-csv", str(tmp_path / "pr.csv")]) == 0
    capsys.readouterr()
    assert 0.0 <= json.loads(report.read_text())["ap"] <= 1.0
    assert (tmp_path / "pr.csv").exists()

    image = sorted((tmp_path / "syn/A").glob("*.png"))[0]
    out = tmp_path / "det.json"
    svg = tmp_path / "trace.svg"
    assert main(["detect", ckpt, str(image), "--task", "circle,square", "--score-thresh", "0",
                 "--output", str(out), "--trace-svg", str(svg)]) == 0
    doc = json.loads(out.read_text())
    assert doc["task"] == ["circle", "square"] and len(doc["detections"]) == 8
    assert svg.read_text().lstrip().startswith("<?xml")
    assert main(["detect", ckpt, str(image), "--task", "circle,circle"]) == 2
    capsys.readouterr()

    assert main(["report", str(tmp_path / "run"), "--out", str(tmp_path / "rep")]) == 0
    files = json.loads(capsys.readouterr().out)
    assert {Path(f).name for f in files} >= {"loss_curves.csv", "loss_curves.svg"}
