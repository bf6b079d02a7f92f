"""CSV / SVG exports: vocabulary size vs AP across runs, loss curves, stage traces."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from omdet.errors import DataError

RUN_FILE = "run.json"


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed ids and no timestamp keep the SVG a pure function of its inputs
    matplotlib.rcParams["svg.hashsalt"] = "omdet"
    return plt


def _save_svg(fig, path: Path) -> None:
    path.write_text(_svg_text(fig))


def collect_runs(logdir) -> list[dict]:
    """Every run below ``logdir``: its run.json summary plus parsed metrics."""
    logdir = Path(logdir)
    if not logdir.is_dir():
        raise DataError(f"log directory not found: {logdir}")
    runs = []
    for run_file in sorted(logdir.rglob(RUN_FILE)):
        summary = json.loads(run_file.read_text())
        metrics_path = run_file.parent / "metrics.jsonl"
        records = []
        if metrics_path.exists():
            records = [json.loads(x) for x in metrics_path.read_text().splitlines() if x.strip()]
        runs.append({"dir": run_file.parent, "summary": summary, "records": records})
    return runs


def _last_eval(records: list[dict]) -> dict | None:
    evals = [r for r in records if "eval" in r]
    return evals[-1] if evals else None


def vocab_ap_rows(runs: list[dict], logdir: Path) -> list[dict]:
    rows = []
    for run in runs:
        ev = _last_eval(run["records"])
        if ev is None:
            continue
        for name, m in sorted(ev["eval"].items()):
            rows.append({
                "run": str(run["dir"].relative_to(logdir)), "tuning_mode": run["summary"].get("tuning_mode", ""),
                "pretrain_vocab_size": run["summary"].get("pretrain_vocab_size", 0), "dataset": name,
                "step": ev["step"], "ap": m["ap"], "ap50": m["ap50"], "ap75": m["ap75"],
            })
    return rows


def write_report(logdir, out_dir=None) -> list[Path]:
    """Emit vocab_vs_ap.{csv,svg} and loss_curves.{csv,svg}; nothing is written on error."""
    logdir = Path(logdir)
    runs = collect_runs(logdir)
    if not runs:
        raise DataError(f"no training runs ({RUN_FILE}) found under {logdir}")
    out_dir = Path(out_dir) if out_dir is not None else logdir
    rows = vocab_ap_rows(runs, logdir)
    loss_rows = [
        {"run": str(r["dir"].relative_to(logdir)), "step": rec["step"], "loss": rec["loss"]}
        for r in runs for rec in r["records"] if "loss" in rec
    ]
    if not rows and not loss_rows:
        raise DataError(f"runs under {logdir} have no logged metrics")

    plt = _pyplot()
    files: dict[Path, str] = {}
    files[out_dir / "vocab_vs_ap.csv"] = _csv(rows, ["run", "tuning_mode", "pretrain_vocab_size", "dataset",
                                                     "step", "ap", "ap50", "ap75"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_mode: dict[str, list] = {}
    for r in rows:
        by_mode.setdefault(r["tuning_mode"], []).append((r["pretrain_vocab_size"], r["ap"]))
    for mode, pts in sorted(by_mode.items()):
        agg: dict[int, list] = {}
        for v, a in pts:
            agg.setdefault(v, []).append(a)
        xs = sorted(agg)
        ax.plot(xs, [float(np.mean(agg[x])) for x in xs], marker="o", label=mode or "run")
    ax.set_xscale("log")
    ax.set_xlabel("pre-training vocabulary size")
    ax.set_ylabel("AP")
    if by_mode:
        ax.legend()
    fig.tight_layout()
    svg_vocab = _svg_text(fig)
    plt.close(fig)
    files[out_dir / "vocab_vs_ap.svg"] = svg_vocab

    files[out_dir / "loss_curves.csv"] = _csv(loss_rows, ["run", "step", "loss"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for run in sorted({r["run"] for r in loss_rows}):
        pts = [(r["step"], r["loss"]) for r in loss_rows if r["run"] == run]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=run, linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    if loss_rows:
        ax.legend(fontsize=6)
    fig.tight_layout()
    files[out_dir / "loss_curves.svg"] = _svg_text(fig)
    plt.close(fig)

    out_dir.mkdir(parents=True, exist_ok=True)
    for path, text in files.items():
        path.write_text(text)
    return list(files)


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _svg_text(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def stage_trace_svg(image: np.ndarray, det, path, top: int = 5) -> Path:
    """Boxes of the top detections at every refinement stage, one panel per stage."""
    plt = _pyplot()
    path = Path(path)
    if det.trace_boxes is None:
        raise DataError("detections carry no stage trace; run detect with trace enabled")
    stages = det.trace_boxes.shape[0]
    n = min(top, len(det))
    fig, axes = plt.subplots(1, stages, figsize=(2.2 * stages, 2.4), squeeze=False)
    rgb = np.clip(np.transpose(image, (1, 2, 0)), 0, 1)
    colors = plt.get_cmap("tab10")
    for s in range(stages):
        ax = axes[0, s]
        ax.imshow(rgb, interpolation="nearest")
        for i in range(n):
            x1, y1, x2, y2 = det.trace_boxes[s, i]
            score = det.trace_scores[s, i]
            ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False,
                                       edgecolor=colors(int(det.classes[i]) % 10), linewidth=1.2,
                                       alpha=float(np.clip(0.3 + score, 0.3, 1.0))))
        ax.set_title(f"stage {s + 1}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    _save_svg(fig, path)
    plt.close(fig)
    return path
