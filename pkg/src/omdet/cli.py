"""Command-line interface: train, eval, detect, sample-task, gen-synthetic, report.

Exit codes: 0 success, 2 configuration or usage errors, 3 data errors,
4 numeric aborts. Messages go to standard error. ``OMDET_OUTPUT_DIR``
overrides every default output location.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from omdet.errors import ConfigError, DataError, NumericError, UsageError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _out_dir(default) -> Path:
    return Path(os.environ.get("OMDET_OUTPUT_DIR") or default)


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return raw


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    from omdet.train import TrainConfig, train

    cfg = TrainConfig.from_file(args.config)
    if args.steps is not None:
        cfg.steps = args.steps
    if args.output_dir:
        cfg.output_dir = str(Path(args.output_dir).resolve())
    result = train(cfg, resume=args.resume, quiet=not args.verbose)
    print(json.dumps({"checkpoint": str(result.checkpoint), "metrics": str(result.metrics_path),
                      "steps": result.steps, "final_loss": result.last_loss}))
    return 0


def _load_eval_dataset(path, name=None, image_root=None):
    from omdet.data import load_coco_json
    from omdet.train import TrainConfig, load_datasets

    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    if path.suffix == ".json":
        return load_coco_json(path, image_root)
    raw = _read_yaml(path)
    cfg = TrainConfig.from_dict(raw if "datasets" in raw else {"datasets": [raw]}, base_dir=path.parent)
    datasets = load_datasets(cfg)
    if name is None:
        if len(datasets) != 1:
            raise ConfigError(f"{path} defines {[d.name for d in datasets]}; pick one with --name")
        return datasets[0]
    for d in datasets:
        if d.name == name:
            return d
    raise ConfigError(f"no dataset named {name!r} in {path}")


def cmd_eval(args) -> int:
    from omdet.evaluation import evaluate_dataset
    from omdet.train import load_model

    model, _, _ = load_model(args.checkpoint)
    ds = _load_eval_dataset(args.dataset, args.name, args.image_root)
    ids = ds.image_ids[: args.limit] if args.limit else None
    report = evaluate_dataset(model, ds, image_ids=ids, score_threshold=args.score_threshold)
    text = report.to_json()
    if args.output:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    if args.pr_csv:
        Path(args.pr_csv).write_text(report.pr_csv())
    # the full report (with PR curves) goes to --output; stdout gets the headline numbers
    keys = ("name", "ap", "ap50", "ap75", "recall50_at_score", "num_gt")
    summary = {"ap": report.ap, "ap50": report.ap50, "ap75": report.ap75, "num_images": report.num_images,
               "classes": [{k: getattr(m, k) for k in keys} for m in report.classes]}
    print(json.dumps(summary))
    return 0


def _read_image(path, resize=None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DataError(f"{path}: expected a (3, H, W) array, got {arr.shape}")
        return arr
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if resize:
                im = im.resize(resize, Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from None
    return arr.transpose(2, 0, 1)


def cmd_detect(args) -> int:
    from omdet.report import stage_trace_svg
    from omdet.train import load_model

    words = [w.strip() for w in args.task.split(",") if w.strip()]
    if not words:
        raise UsageError("--task needs at least one word")
    model, _, _ = load_model(args.checkpoint)
    resize = tuple(int(v) for v in args.resize.split("x")) if args.resize else None
    image = _read_image(args.image, resize)
    det = model.detect(image[None], [words], score_thresh=args.score_thresh, trace=bool(args.trace_svg))[0]
    doc = {"image": str(args.image), "task": words, "detections": det.to_json()}
    text = json.dumps(doc)
    if args.output:
        Path(args.output).write_text(text + "\n")
    if args.trace_svg:
        stage_trace_svg(image, det, args.trace_svg, top=args.trace_top)
    print(text)
    return 0


def cmd_sample_task(args) -> int:
    from omdet.data import FederatedRegistry
    from omdet.sampler import build_batch
    from omdet.train import TrainConfig, load_datasets

    cfg = TrainConfig.from_file(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    datasets = load_datasets(cfg)
    registry = FederatedRegistry(datasets, cfg.dataset_weights, seed)
    for step in range(args.steps):
        rng = np.random.default_rng([seed, step, 1])
        batch = build_batch(registry.draw(step, cfg.batch_size), cfg.K, rng, cfg.task_mode)
        for (name, image_id), task in zip(batch.sources, batch.sampled):
            print(json.dumps({"step": step, "dataset": name, "image_id": image_id, **task.to_json()}))
    return 0


def cmd_gen_synthetic(args) -> int:
    from PIL import Image

    from omdet.data import ConflictSpec, generate_synthetic

    raw = _read_yaml(args.spec)
    seed = int(raw.pop("seed", 0)) if args.seed is None else args.seed
    spec = ConflictSpec.from_dict(raw)
    out = _out_dir(args.out or "synthetic")
    datasets = generate_synthetic(spec, seed)
    written = []
    for ds in datasets:
        img_dir = out / ds.name
        img_dir.mkdir(parents=True, exist_ok=True)
        images, anns = [], []
        cat_ids = {w: i + 1 for i, w in enumerate(ds.vocabulary)}
        for n, image_id in enumerate(ds.image_ids):
            file_name = f"{ds.name}/{image_id}.png"
            pixels = np.round(np.transpose(ds.pixels(image_id), (1, 2, 0)) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(out / file_name)
            rec = ds.images[image_id]
            images.append({"id": n + 1, "file_name": file_name, "width": rec.width, "height": rec.height})
            for a in ds.annotations[image_id]:
                x1, y1, x2, y2 = a.box
                anns.append({"id": len(anns) + 1, "image_id": n + 1, "category_id": cat_ids[a.label],
                             "bbox": [x1, y1, x2 - x1, y2 - y1]})
        doc = {"images": images, "annotations": anns,
               "categories": [{"id": i, "name": w} for w, i in cat_ids.items()]}
        path = out / f"{ds.name}.json"
        path.write_text(json.dumps(doc))
        written.append({"dataset": ds.name, "json": str(path), "images": len(images), "annotations": len(anns)})
    print(json.dumps(written))
    return 0


def cmd_report(args) -> int:
    from omdet.report import write_report

    out = args.out or os.environ.get("OMDET_OUTPUT_DIR") or args.logdir
    files = write_report(args.logdir, out)
    print(json.dumps([str(f) for f in files]))
    return 0


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omdet", description="Task-conditioned object detection at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("config")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--steps", type=int, help="override the total step count")
    t.add_argument("--output-dir")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP of a checkpoint on a dataset (COCO JSON or YAML dataset spec)")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--name", help="dataset to pick when the spec defines several")
    e.add_argument("--image-root")
    e.add_argument("--limit", type=int, help="evaluate only the first N images")
    e.add_argument("--score-threshold", type=float, default=0.3, help="score cut for the recall column")
    e.add_argument("--output", help="write the report JSON here")
    e.add_argument("--pr-csv", help="write IoU-0.5 precision/recall curves here")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detect the words of a task in one image")
    d.add_argument("checkpoint")
    d.add_argument("image", help="PNG/JPEG file or a .npy (3, H, W) array")
    d.add_argument("--task", required=True, help="comma-separated words, e.g. circle,square")
    d.add_argument("--score-thresh", type=float, default=0.3)
    d.add_argument("--resize", help="WxH, e.g. 96x96")
    d.add_argument("--output")
    d.add_argument("--trace-svg", help="write per-stage boxes of the top detections as SVG")
    d.add_argument("--trace-top", type=int, default=5)
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("sample-task", help="print sampled training tasks as JSON lines")
    s.add_argument("config")
    s.add_argument("--steps", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample_task)

    g = sub.add_parser("gen-synthetic", help="render the synthetic shape datasets as COCO JSON + PNG")
    g.add_argument("spec")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_synthetic)

    r = sub.add_parser("report", help="CSV/SVG summaries of the runs below a log directory")
    r.add_argument("logdir")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"omdet: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"omdet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, UsageError) as exc:
        print(f"omdet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
