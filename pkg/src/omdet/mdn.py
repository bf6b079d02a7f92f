"""Multimodal detection network: proposals, fusion stages and the detect path."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from omdet.autodiff import (
    AttentionWeights,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    mhsa,
    no_record,
)
from omdet.autodiff import functional as F
from omdet.backbone import FPN, Backbone, FeaturePyramid
from omdet.errors import ConfigError, NumericError, UsageError
from omdet.geometry import box_convert, clamp_xyxy, roi_align
from omdet.text import PAD, EmbeddingProvider, HashEmbeddingProvider, SetEncoder, TaskContext, pad_tasks

MAX_DETECTIONS = 300


@dataclass
class ModelConfig:
    num_proposals: int = 30
    d: int = 64
    stages: int = 6
    heads: int = 4
    max_k: int = 8
    d_text: int = 32
    backbone_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    stem_channels: int = 16
    pool: int = 7
    sampling: int = 2
    encoder_layers: int = 2
    ffn_hidden: int = 128
    logit_scale: float = 20.0
    learn_logit_scale: bool = False
    shallow: bool = False
    detach_boxes: bool = True  # off only for end-to-end finite-difference checks
    canonical_size: float = 224.0
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.num_proposals < 1:
            raise ConfigError("num_proposals must be >= 1")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.max_k < 1:
            raise ConfigError("max_k must be >= 1")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % 4:
            raise ConfigError(f"d={self.d} must be divisible by 4 (dynamic conv bottleneck)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone_channels"] = list(self.backbone_channels)
        return out


def init_proposals(n: int, d: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random proposal features and whole-image boxes ``[0.5, 0.5, 1, 1]``."""
    if n < 1:
        raise ConfigError("need at least one proposal")
    q0 = rng.standard_normal((n, d))
    b0 = np.tile(np.array([0.5, 0.5, 1.0, 1.0]), (n, 1))
    return q0, b0


@dataclass
class ProposalState:
    q: Tensor  # (B, N, d)
    boxes: Tensor  # (B, N, 4) normalised cxcywh
    t: Tensor  # (B, K, d)


@dataclass
class StageOutput:
    logits: Tensor  # (B, N, K); pad columns are meaningless, see masked_logits
    boxes: Tensor  # (B, N, 4) normalised cxcywh, clamped to [0, 1]
    q: Tensor
    t: Tensor
    valid: np.ndarray = field(repr=False)

    def masked_logits(self) -> np.ndarray:
        """Logits with pad classes set to -inf (materialised, not differentiable)."""
        return np.where(self.valid[:, None, :], self.logits.data, -np.inf)


class DynamicConv(Module):
    """Per-proposal 1x1 kernels d -> d/4 -> d generated from the proposal feature."""

    def __init__(self, d: int, pool: int, rng: np.random.Generator):
        self.d = d
        self.hidden = d // 4
        self.generate = Linear(d, 2 * d * self.hidden, rng, scale=0.5)
        self.norm1 = LayerNorm(self.hidden)
        self.norm2 = LayerNorm(d)
        self.out = Linear(pool * pool * d, d, rng)
        self.norm3 = LayerNorm(d)

    def forward(self, q: Tensor, roi: Tensor) -> Tensor:
        """q: (M, d); roi: (M, P*P, d) -> (M, d)."""
        m, d, h = q.shape[0], self.d, self.hidden
        params = self.generate(q)
        k1 = F.reshape(params[:, : d * h], (m, d, h))
        k2 = F.reshape(params[:, d * h :], (m, h, d))
        x = F.relu(self.norm1(F.matmul(roi, k1)))
        x = F.relu(self.norm2(F.matmul(x, k2)))
        x = F.reshape(x, (m, -1))
        return F.relu(self.norm3(self.out(x)))


class MDNStage(Module):
    """One fusion block: RoI pooling, joint attention, dynamic conv, heads."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d
        self.heads = cfg.heads
        self.pool = cfg.pool
        self.sampling = cfg.sampling
        self.canonical_size = cfg.canonical_size
        self.attn = AttentionWeights(d, rng)
        self.dynamic = DynamicConv(d, cfg.pool, rng)
        self.norm = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_hidden, rng)
        self.cls_fc = Linear(d, d, rng)
        self.cls_norm = LayerNorm(d)
        self.cls_out = Linear(d, d, rng)
        self.reg_fc = Linear(d, d, rng)
        self.reg_norm = LayerNorm(d)
        self.reg_out = Linear(d, 4, rng, scale=0.01)

    def forward(self, state: ProposalState, fpn: FeaturePyramid, labels: Tensor, valid: np.ndarray,
                image_size: tuple[int, int], shallow: bool = False, logit_scale=20.0) -> StageOutput:
        bsz, n, d = state.q.shape
        valid = np.asarray(valid, dtype=bool)
        if valid.shape[1] == 0 or not valid.any(axis=1).all():
            raise UsageError("every image needs a task with k >= 1 words")
        w, h = image_size
        scale = np.array([w, h, w, h], dtype=state.boxes.dtype)
        # v = RoiPooler(P2..P5, B): boxes are materialised as clamped absolute xyxy
        unit = F.clip(state.boxes, 0.0, 1.0)
        cxcy, wh = unit[..., 0:2], F.mul(unit[..., 2:4], 0.5)
        xyxy = F.mul(F.concat([F.sub(cxcy, wh), F.add(cxcy, wh)], axis=-1), scale)
        roi = roi_align(
            fpn.as_mapping(), F.reshape(xyxy, (bsz * n, 4)), np.repeat(np.arange(bsz), n),
            pool=self.pool, sampling=self.sampling, image_size=(w, h),
            canonical_size=self.canonical_size, channels_last=True,
        )
        # [Q1, T1] = MHSA([Q0, T0]); the shallow variant never lets T touch Q
        if shallow:
            q1 = mhsa(state.q, self.attn, self.heads)
            t1 = state.t
        else:
            k = state.t.shape[1]
            joint = F.concat([state.q, state.t], axis=1)
            mask = np.concatenate([np.ones((bsz, n), dtype=bool), valid], axis=1)
            fused = mhsa(joint, self.attn, self.heads, key_mask=mask)
            q1, t1 = fused[:, :n], fused[:, n : n + k]
        # Q2 = DynamicConv(Q1, v)
        q_flat = F.reshape(q1, (bsz * n, d))
        q2 = self.norm(F.add(q_flat, self.dynamic(q_flat, roi)))
        q2 = F.reshape(self.ffn(q2), (bsz, n, d))
        # B' = B + RegHead(Q2), deltas in normalised cxcywh
        delta = self.reg_out(F.relu(self.reg_norm(self.reg_fc(q2))))
        boxes = F.clip(F.add(state.boxes, delta), 0.0, 1.0)
        # C = gamma * cosine(ClsHead(Q2), L)
        emb = self.cls_out(F.relu(self.cls_norm(self.cls_fc(q2))))
        sims = F.matmul(F.l2_normalize(emb), F.transpose(F.l2_normalize(labels), (0, 2, 1)))
        logits = F.mul(sims, logit_scale)
        if not np.isfinite(logits.data).all() or not np.isfinite(boxes.data).all():
            raise NumericError("non-finite stage output")
        return StageOutput(logits, boxes, q2, t1, valid)


@dataclass
class Detection:
    box: np.ndarray
    class_index: int
    score: float
    stage_trace: list | None = None


@dataclass
class DetectionSet:
    """Detections of one image: xyxy boxes, class indices into the task, scores."""

    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray
    words: list = field(default_factory=list)
    proposals: np.ndarray | None = None
    trace_boxes: np.ndarray | None = None  # (S, n, 4) per-stage boxes of each detection
    trace_scores: np.ndarray | None = None  # (S, n)

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self):
        for i in range(len(self)):
            trace = None
            if self.trace_boxes is not None:
                trace = [{"box": self.trace_boxes[s, i].tolist(), "score": float(self.trace_scores[s, i])}
                         for s in range(self.trace_boxes.shape[0])]
            yield Detection(self.boxes[i], int(self.classes[i]), float(self.scores[i]), trace)

    def to_json(self) -> list[dict]:
        out = []
        for det in self:
            item = {"box": [float(v) for v in det.box], "class_index": det.class_index,
                    "label": self.words[det.class_index] if self.words else None, "score": det.score}
            if det.stage_trace is not None:
                item["stage_trace"] = det.stage_trace
            out.append(item)
        return out

    @classmethod
    def empty(cls, words=()) -> "DetectionSet":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=int), np.zeros(0), list(words))


@dataclass
class ForwardOutput:
    stages: list[StageOutput]
    context: TaskContext
    image_size: tuple[int, int]


class OmDet(Module):
    """Backbone + FPN, task/label set encoders and a cascade of fusion stages."""

    def __init__(self, cfg: ModelConfig | None = None, provider: EmbeddingProvider | None = None):
        cfg = cfg or ModelConfig()
        self._cfg = cfg
        self._provider = provider or HashEmbeddingProvider(cfg.d_text)
        if self._provider.dim != cfg.d_text:
            raise ConfigError(f"provider dim {self._provider.dim} != d_text {cfg.d_text}")
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(rng, cfg.backbone_channels, cfg.stem_channels)
        self.fpn = FPN(cfg.backbone_channels, cfg.d, rng)
        self.task_encoder = SetEncoder(cfg.d_text, cfg.d, rng, cfg.encoder_layers, cfg.heads)
        self.label_encoder = SetEncoder(cfg.d_text, cfg.d, rng, cfg.encoder_layers, cfg.heads)
        q0, b0 = init_proposals(cfg.num_proposals, cfg.d, rng)
        self.proposal_features = Parameter(q0)
        self.proposal_boxes = Parameter(b0)
        self.stages = [MDNStage(cfg, rng) for _ in range(cfg.stages)]
        self.logit_scale = Parameter([cfg.logit_scale]) if cfg.learn_logit_scale else None
        self.word_embeddings: dict[str, Tensor] = {}

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def provider(self) -> EmbeddingProvider:
        return self._provider

    # -------------------------------------------------------------- text side

    def register_words(self, words) -> None:
        """Hold raw vectors for ``words`` as parameters (frozen unless prompt-tuned)."""
        dtype = self.proposal_features.dtype
        for word in sorted(set(words)):
            if word not in self.word_embeddings:
                self.word_embeddings[word] = Parameter(self._provider.vector(word), dtype=dtype)

    def raw_embeddings(self, tasks: Sequence[Sequence[str | None]]) -> Tensor:
        bsz, width = len(tasks), len(tasks[0])
        dtype = self.proposal_features.dtype
        uniq = sorted({w for t in tasks for w in t if w is not PAD})
        rows = [Tensor(np.zeros(self._cfg.d_text), dtype=dtype)]
        for word in uniq:
            param = self.word_embeddings.get(word)
            rows.append(param if param is not None else Tensor(self._provider.vector(word), dtype=dtype))
        table = F.stack(rows, axis=0)
        pos = {w: i + 1 for i, w in enumerate(uniq)}
        idx = np.array([pos[w] if w is not PAD else 0 for t in tasks for w in t])
        return F.reshape(F.take(table, idx, 0), (bsz, width, self._cfg.d_text))

    def encode_tasks(self, tasks: Sequence[Sequence[str | None]]) -> TaskContext:
        tasks = pad_tasks(tasks)
        for t in tasks:
            real = [w for w in t if w is not PAD]
            if not real:
                raise UsageError("task must contain at least one word")
            if len(real) > self._cfg.max_k:
                raise UsageError(f"task has {len(real)} words but K={self._cfg.max_k}")
            if len(set(real)) != len(real):
                raise UsageError(f"task words must be distinct: {real}")
        valid = np.array([[w is not PAD for w in t] for t in tasks], dtype=bool)
        raw = self.raw_embeddings(tasks)
        ctx = TaskContext(tasks, raw, valid)
        if not self._cfg.shallow:
            ctx.task_tokens = self.task_encoder(raw, valid)
        ctx.label_tokens = self.label_encoder(raw, valid)
        return ctx

    # -------------------------------------------------------------- forward

    def features(self, images: Tensor) -> FeaturePyramid:
        return self.fpn(self.backbone(images))

    def forward(self, images, tasks: Sequence[Sequence[str | None]], num_stages: int | None = None) -> ForwardOutput:
        images = images if isinstance(images, Tensor) else Tensor(images, dtype=self.proposal_features.dtype)
        if images.ndim == 3:
            images = F.reshape(images, (1,) + images.shape)
        if tasks and isinstance(tasks[0], str):
            tasks = [list(tasks)]
        bsz, _, h, w = images.shape
        if len(tasks) != bsz:
            raise UsageError(f"{len(tasks)} tasks for {bsz} images")
        s_count = self._cfg.stages if num_stages is None else num_stages
        if not 1 <= s_count <= len(self.stages):
            raise ConfigError(f"num_stages must be in [1, {len(self.stages)}]")
        ctx = self.encode_tasks(tasks)
        fpn = self.features(images)
        n, d = self.proposal_features.shape
        q = F.add(F.reshape(self.proposal_features, (1, n, d)), np.zeros((bsz, 1, 1), dtype=images.dtype))
        boxes = F.add(F.reshape(self.proposal_boxes, (1, n, 4)), np.zeros((bsz, 1, 1), dtype=images.dtype))
        t = ctx.task_tokens if ctx.task_tokens is not None else Tensor(np.zeros((bsz, ctx.width, d)), dtype=images.dtype)
        state = ProposalState(q, boxes, t)
        scale = self.logit_scale if self.logit_scale is not None else self._cfg.logit_scale
        outputs = []
        for s in range(s_count):
            out = self.stages[s](state, fpn, ctx.label_tokens, ctx.valid, (w, h), self._cfg.shallow, scale)
            outputs.append(out)
            # boxes are detached between stages; features and task tokens carry gradient
            boxes = out.boxes.detach() if self._cfg.detach_boxes else out.boxes
            state = ProposalState(out.q, boxes, out.t)
        return ForwardOutput(outputs, ctx, (w, h))

    # -------------------------------------------------------------- inference

    def detect(self, images, tasks, score_thresh: float = 0.05, max_det: int = MAX_DETECTIONS,
               trace: bool = False) -> list[DetectionSet]:
        """Last-stage sigmoid scores over every (proposal, real class) pair, no NMS."""
        single = isinstance(tasks[0], str) if tasks else False
        with no_record():
            out = self.forward(images, [tasks] if single else tasks)
        sets = [
            postprocess(out.stages, b, out.context.words[b], out.image_size, score_thresh, max_det, trace)
            for b in range(len(out.context.words))
        ]
        return sets


def postprocess(stages: Sequence[StageOutput], b: int, words, image_size, score_thresh: float,
                max_det: int = MAX_DETECTIONS, trace: bool = False) -> DetectionSet:
    last = stages[-1]
    words = list(words)
    k = sum(w is not PAD for w in words)
    logits = last.logits.data[b][:, :k].astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-logits))
    flat = scores.reshape(-1)
    keep = np.nonzero(flat >= score_thresh)[0]
    order = keep[np.argsort(-flat[keep], kind="stable")][:max_det]
    props, classes = np.divmod(order, k)
    boxes_unit = last.boxes.data[b].astype(np.float64)
    xyxy = clamp_xyxy(box_convert(boxes_unit[props], "cxcywh", "xyxy", image_size), image_size)
    det = DetectionSet(xyxy, classes, flat[order], words[:k], props)
    if trace:
        tb, ts = [], []
        for st in stages:
            sb = box_convert(st.boxes.data[b].astype(np.float64)[props], "cxcywh", "xyxy", image_size)
            tb.append(clamp_xyxy(sb, image_size))
            sl = st.logits.data[b].astype(np.float64)[props, classes]
            ts.append(1.0 / (1.0 + np.exp(-sl)))
        det.trace_boxes = np.stack(tb) if tb else None
        det.trace_scores = np.stack(ts) if ts else None
    return det


def stage_trace_json(det: DetectionSet, top: int | None = None) -> str:
    """Per-stage boxes and scores of each detection as a JSON array."""
    items = det.to_json()
    if top is not None:
        items = items[:top]
    return json.dumps(items)
