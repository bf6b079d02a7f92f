"""Training configuration, freeze masks, AdamW, checkpoints and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from omdet.autodiff import Tape, Tensor, precision
from omdet.checkpoint import config_hash, load_checkpoint, save_checkpoint
from omdet.data import ConflictSpec, DetectionDataset, FederatedRegistry, generate_synthetic, ingest_pseudo_labels, load_coco_json
from omdet.errors import ConfigError, DataError, NumericError
from omdet.evaluation import evaluate_dataset
from omdet.matching import LossWeights, set_prediction_loss
from omdet.mdn import ModelConfig, OmDet
from omdet.sampler import build_batch

log = logging.getLogger(__name__)

TUNING_MODES = ("full", "head_only", "prompt")
OUTPUT_DIR_ENV = "OMDET_OUTPUT_DIR"
METRICS_FILE = "metrics.jsonl"
LAST_CHECKPOINT = "last.omck"


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    """Schema of the YAML training config; unknown keys are rejected.

    ``datasets`` entries are mappings with ``type: synthetic`` (keys ``spec``,
    ``seed``, ``use``) or ``type: coco`` (keys ``path``, ``image_root``,
    ``name``, ``resize``, ``pseudo_labels``, ``min_confidence``).
    """

    datasets: list = field(default_factory=lambda: [{"type": "synthetic"}])
    lr: float = 5e-5
    epochs: int = 1
    steps: int | None = None  # overrides epochs * steps_per_epoch
    steps_per_epoch: int | None = None  # default: ceil(total images / batch_size)
    batch_size: int = 8
    batch_mode: str = "random"  # random | all (every image of every dataset each step)
    task_mode: str = "sampled"  # sampled | full_vocabulary
    K: int = 8
    N: int = 30
    S: int = 6
    d: int = 64
    seed: int = 0
    tuning_mode: str = "full"
    prompt_words: list | None = None
    loss_weights: dict = field(default_factory=lambda: {"cls": 2.0, "l1": 5.0, "giou": 2.0})
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    logit_scale: float = 20.0
    shallow: bool = False
    model: dict = field(default_factory=dict)  # extra ModelConfig fields
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    dataset_weights: list | None = None
    eval_every: int = 0
    eval_images: int = 32
    init_checkpoint: str | None = None
    dtype: str = "float32"
    output_dir: str = "runs/omdet"
    base_dir: str | None = field(default=None, repr=False)  # resolves relative paths; not hashed

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.tuning_mode not in TUNING_MODES:
            raise ConfigError(f"tuning_mode must be one of {TUNING_MODES}, got {self.tuning_mode!r}")
        if self.batch_mode not in ("random", "all"):
            raise ConfigError(f"batch_mode must be 'random' or 'all', got {self.batch_mode!r}")
        if self.task_mode not in ("sampled", "full_vocabulary"):
            raise ConfigError(f"task_mode must be 'sampled' or 'full_vocabulary', got {self.task_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for key in ("epochs", "batch_size", "K", "N", "S", "d"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1")
        unknown = set(self.loss_weights) - {"cls", "l1", "giou"}
        if unknown:
            raise ConfigError(f"unknown loss_weights keys {sorted(unknown)}")
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        bad = set(self.model) - (model_keys - {"num_proposals", "d", "stages", "max_k", "logit_scale", "shallow", "seed"})
        if bad:
            raise ConfigError(f"model section: unknown or duplicated keys {sorted(bad)}")
        if not isinstance(self.datasets, list) or not self.datasets:
            raise ConfigError("datasets must be a non-empty list")

    @classmethod
    def from_dict(cls, raw: Mapping, base_dir=None) -> "TrainConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError("config root must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw, base_dir=str(base_dir) if base_dir is not None else None)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        return cls.from_dict(raw or {}, base_dir=path.parent)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        return out

    def hashable(self) -> dict:
        """Everything that affects results (output location excluded)."""
        out = self.to_dict()
        out.pop("output_dir")
        return out

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_proposals=self.N, d=self.d, stages=self.S, max_k=self.K,
                           logit_scale=self.logit_scale, shallow=self.shallow, seed=self.seed, **self.model)

    def loss(self) -> LossWeights:
        w = {"cls": 2.0, "l1": 5.0, "giou": 2.0, **self.loss_weights}
        return LossWeights(w["cls"], w["l1"], w["giou"], self.focal_alpha, self.focal_gamma)

    def resolve(self, path) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.resolve(self.output_dir))


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Piecewise-constant schedule: x0.1 at 70% and again at 90% of the steps."""
    if step < 0.7 * total_steps:
        return base_lr
    if step < 0.9 * total_steps:
        return base_lr * 0.1
    return base_lr * 0.01


# ------------------------------------------------------------------ datasets


def load_datasets(cfg: TrainConfig) -> list[DetectionDataset]:
    out: list[DetectionDataset] = []
    for i, entry in enumerate(cfg.datasets):
        if not isinstance(entry, Mapping) or "type" not in entry:
            raise ConfigError(f"datasets[{i}] needs a 'type'")
        kind = entry["type"]
        if kind == "synthetic":
            _check_keys(entry, {"type", "spec", "seed", "use"}, i)
            spec = ConflictSpec.from_dict(entry.get("spec") or {})
            made = generate_synthetic(spec, int(entry.get("seed", cfg.seed)))
            use = entry.get("use")
            if use is not None:
                names = {d.name for d in made}
                missing = sorted(set(use) - names)
                if missing:
                    raise ConfigError(f"datasets[{i}]: unknown synthetic datasets {missing}")
                made = [d for d in made if d.name in set(use)]
            out.extend(made)
        elif kind == "coco":
            _check_keys(entry, {"type", "path", "image_root", "name", "resize", "pseudo_labels", "min_confidence"}, i)
            if "path" not in entry:
                raise ConfigError(f"datasets[{i}]: coco entry needs 'path'")
            root = entry.get("image_root")
            resize = tuple(entry["resize"]) if entry.get("resize") else None
            ds = load_coco_json(cfg.resolve(entry["path"]), cfg.resolve(root) if root else None,
                                entry.get("name"), resize)
            if entry.get("pseudo_labels"):
                ds, stats = ingest_pseudo_labels(ds, cfg.resolve(entry["pseudo_labels"]),
                                                 float(entry.get("min_confidence", 0.5)))
                log.info("pseudo labels for %s: %s", ds.name, stats)
            out.append(ds)
        else:
            raise ConfigError(f"datasets[{i}]: unknown type {kind!r}")
    return out


def _check_keys(entry: Mapping, allowed: set, i: int) -> None:
    unknown = sorted(set(entry) - allowed)
    if unknown:
        raise ConfigError(f"datasets[{i}]: unknown keys {unknown}")


# ------------------------------------------------------------------ freeze masks


def apply_freeze_mask(model: OmDet, mode: str, words: Sequence[str] | None = None) -> dict[str, Tensor]:
    """Switch ``requires_grad`` per tuning mode; returns the trainable parameters.

    Raw word vectors are frozen in ``full`` and ``head_only``. In ``prompt``
    only the word vectors (optionally just ``words``) are trainable.
    """
    if mode not in TUNING_MODES:
        raise ConfigError(f"unknown tuning mode {mode!r}; expected one of {TUNING_MODES}")
    if words is not None:
        model.register_words(words)
    chosen = None if words is None else {f"word_embeddings.{w}" for w in words}
    for name, p in model.named_parameters():
        is_word = name.startswith("word_embeddings.")
        if mode == "full":
            p.requires_grad = not is_word
        elif mode == "head_only":
            p.requires_grad = not (is_word or name.startswith(("backbone.", "fpn.")))
        else:
            p.requires_grad = is_word and (chosen is None or name in chosen)
    return model.trainable_parameters()


# ------------------------------------------------------------------ optimizer


class AdamW:
    """Decoupled weight decay Adam with global-norm gradient clipping."""

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = 1.0):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads, lr: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        g = {k: grads[p] for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(np.square(x, dtype=np.float64))) for x in g.values()))
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            gk = g[k] * scale if scale != 1.0 else g[k]
            dt = p.data.dtype
            self.m[k] = (self.b1 * self.m[k] + (1 - self.b1) * gk).astype(dt)
            self.v[k] = (self.b2 * self.v[k] + (1 - self.b2) * gk * gk).astype(dt)
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(dt)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        for k, p in self.params.items():
            try:
                self.m[k] = arrays[f"adam_m/{k}"].astype(p.data.dtype)
                self.v[k] = arrays[f"adam_v/{k}"].astype(p.data.dtype)
            except KeyError:
                raise DataError(f"checkpoint lacks optimizer moments for {k!r}") from None
        self.t = int(t)


# ------------------------------------------------------------------ checkpoints


def build_model(cfg: TrainConfig, words: Sequence[str] = ()) -> OmDet:
    with precision(cfg.dtype):
        model = OmDet(cfg.model_config())
        model.register_words(words)
    return model


def save_training_state(path, model: OmDet, opt: AdamW | None, cfg: TrainConfig, step: int, extra=None) -> None:
    arrays = {f"param/{k}": p.data for k, p in model.named_parameters()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = {
        "format": "omdet-checkpoint",
        "step": int(step),
        "optimizer_t": opt.t if opt is not None else 0,
        "config": cfg.hashable(),
        "config_hash": config_hash(cfg.hashable()),
        "model": model.config.to_dict(),
        "words": sorted(model.word_embeddings),
        # batches and tasks are drawn from generators keyed by (seed, step),
        # so the position in the stream is the whole RNG state
        "rng": {"kind": "counter", "seed": cfg.seed, "next_step": int(step)},
        **(extra or {}),
    }
    save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[OmDet, dict, dict]:
    """Rebuild a model from a checkpoint; returns (model, arrays, meta)."""
    arrays, meta = load_checkpoint(path)
    mc = dict(meta["model"])
    dtype = "float32"
    for k, a in arrays.items():
        if k.startswith("param/"):
            dtype = str(a.dtype)
            break
    with precision(dtype):
        model = OmDet(ModelConfig(**mc))
        model.register_words(meta.get("words", []))
    _assign_params(model, arrays)
    return model, arrays, meta


def _assign_params(model: OmDet, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
    params = model.parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in arrays:
            if strict:
                raise DataError(f"checkpoint lacks parameter {name!r}")
            continue
        if arrays[key].shape != p.data.shape:
            raise DataError(f"parameter {name!r}: checkpoint shape {arrays[key].shape} vs model {p.data.shape}")
        p.data = arrays[key].astype(p.data.dtype)


# ------------------------------------------------------------------ loop


@dataclass
class TrainResult:
    model: OmDet
    checkpoint: Path | None
    metrics_path: Path
    steps: int
    last_loss: float
    history: list = field(default_factory=list)


def total_steps(cfg: TrainConfig, registry: FederatedRegistry) -> tuple[int, int]:
    """(total steps, steps per epoch)."""
    if cfg.batch_mode == "all":
        per_epoch = cfg.steps_per_epoch or 1
    else:
        per_epoch = cfg.steps_per_epoch or max(1, math.ceil(registry.epoch_size() / cfg.batch_size))
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    return int(total), int(per_epoch)


def _batch_items(cfg: TrainConfig, registry: FederatedRegistry, step: int):
    if cfg.batch_mode == "all":
        return [(d, i) for d in registry.datasets for i in d.image_ids]
    return registry.draw(step, cfg.batch_size)


def train_step(model: OmDet, batch, opt: AdamW, lr: float, weights: LossWeights):
    images = Tensor(batch.images, dtype=model.proposal_features.dtype)
    with Tape() as tape:
        out = model.forward(images, batch.tasks)
        loss, breakdown = set_prediction_loss(out.stages, batch.gts, out.context.valid, weights)
    if not math.isfinite(loss.item()):
        raise NumericError("loss is not finite")
    grads = tape.backward(loss)
    norm = opt.step(grads, lr)
    return breakdown, norm


def train(cfg: TrainConfig, resume: str | os.PathLike | None = None, datasets=None,
          stop_after: int | None = None, quiet: bool = True) -> TrainResult:
    """Run (or resume) training; ``stop_after`` ends early after that many total steps."""
    datasets = datasets if datasets is not None else load_datasets(cfg)
    registry = FederatedRegistry(datasets, cfg.dataset_weights, cfg.seed)
    words = sorted({w for d in datasets for w in d.vocabulary} | set(cfg.prompt_words or []))
    out_dir = cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS_FILE

    model = build_model(cfg, words)
    pretrain_vocab = len({w for d in datasets for w in d.vocabulary})
    if cfg.init_checkpoint:
        arrays, init_meta = load_checkpoint(cfg.resolve(cfg.init_checkpoint))
        _assign_params(model, arrays, strict=False)
        pretrain_vocab = int(init_meta.get("pretrain_vocab_size", len(init_meta.get("words", []))))
    run_info = {"tuning_mode": cfg.tuning_mode, "pretrain_vocab_size": pretrain_vocab,
                "datasets": [d.name for d in datasets], "config_hash": config_hash(cfg.hashable())}
    (out_dir / "run.json").write_text(json.dumps(run_info, sort_keys=True, indent=1) + "\n")
    trainable = apply_freeze_mask(model, cfg.tuning_mode, cfg.prompt_words)
    opt = AdamW(trainable, cfg.weight_decay, cfg.betas, cfg.adam_eps, cfg.clip_norm)
    weights = cfg.loss()
    total, per_epoch = total_steps(cfg, registry)

    start = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta.get("config_hash") != config_hash(cfg.hashable()):
            raise ConfigError("checkpoint was produced by a different config")
        _assign_params(model, arrays)
        opt.load_state_arrays(arrays, meta["optimizer_t"])
        start = int(meta["step"])
        _truncate_log(metrics_path, start)
    elif metrics_path.exists():
        metrics_path.unlink()

    end = total if stop_after is None else min(total, stop_after)
    last_ckpt = out_dir / LAST_CHECKPOINT if (out_dir / LAST_CHECKPOINT).exists() and resume else None
    history, loss_value = [], float("nan")
    with metrics_path.open("a") as logf:
        for step in range(start, end):
            rng = np.random.default_rng([cfg.seed, step, 1])
            batch = build_batch(_batch_items(cfg, registry, step), cfg.K, rng, cfg.task_mode)
            lr = lr_at(step, total, cfg.lr)
            try:
                br, norm = train_step(model, batch, opt, lr, weights)
            except NumericError as exc:
                record = {"step": step, "error": str(exc), "last_checkpoint": str(last_ckpt) if last_ckpt else None}
                logf.write(json.dumps(record) + "\n")
                raise NumericError(f"step {step}: {exc}; last good checkpoint: {last_ckpt}") from exc
            loss_value = br.total
            record = {"step": step, "epoch": step // per_epoch, "lr": lr, "loss": br.total, "cls": br.cls,
                      "l1": br.l1, "giou": br.giou, "num_gt": br.num_gt, "grad_norm": norm}
            logf.write(json.dumps(record) + "\n")
            history.append(record)
            if not quiet:
                print(f"step {step:5d} loss {br.total:.4f} lr {lr:.2e}", flush=True)
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                logf.write(json.dumps({"step": step, "eval": _quick_eval(model, datasets, cfg)}) + "\n")
            if (step + 1) % per_epoch == 0 or step + 1 == total:
                epoch = (step + 1 + per_epoch - 1) // per_epoch
                ckpt = out_dir / f"epoch{epoch:03d}.omck"
                extra = {"pretrain_vocab_size": pretrain_vocab}
                save_training_state(ckpt, model, opt, cfg, step + 1, extra)
                save_training_state(out_dir / LAST_CHECKPOINT, model, opt, cfg, step + 1, extra)
                last_ckpt = out_dir / LAST_CHECKPOINT
            logf.flush()
    return TrainResult(model, last_ckpt, metrics_path, end, loss_value, history)


def _quick_eval(model: OmDet, datasets, cfg: TrainConfig) -> dict:
    out = {}
    for ds in datasets:
        if len(ds.vocabulary) > cfg.K:
            continue
        rep = evaluate_dataset(model, ds, image_ids=ds.image_ids[: cfg.eval_images])
        out[ds.name] = {"ap": rep.ap, "ap50": rep.ap50, "ap75": rep.ap75, "vocab_size": len(ds.vocabulary)}
    return out


def _truncate_log(path: Path, step: int) -> None:
    """Keep only records of steps before ``step`` (resume point)."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line).get("step", 0) < step:
            keep.append(line)
    path.write_text("".join(k + "\n" for k in keep))


def read_metrics(path) -> list[dict]:
    path = Path(path)
    return [json.loads(x) for x in path.read_text().splitlines() if x.strip()]
