"""Three-stage training: optimiser, learning-rate schedule and the clip loop.

A training step samples one clip, initialises a session on its first frame,
runs the frame loop with gradients flowing through memory, and back-propagates
every ``window`` frames. Memory is detached at window boundaries, so no
gradient reaches frames before the current window.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteError, StateError
from .losses import LossWeights, mask_bce, quarter_targets, total_loss
from .model import MattingModel
from .nn import Parameter, batch_norms, freeze_batch_norm
from .pipeline import init_session, step_frame
from .synth import LabeledSequence, corrupt_mask, generate_sequence, random_scene, segmentation_clip, with_size
from .transformer import AblationConfig

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Parameter], weight_decay: float = 0.0, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.ndim > 1:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def lr_at(step: int, total: int, base_lr: float, warmup: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay reaching 0 at the last step."""
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    span = max(total - 1 - warmup, 1)
    progress = min(max((step - warmup) / span, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainConfig:
    stage: int = 2
    steps: int = 2000
    base_lr: float = 5e-4
    weight_decay: float = 0.07
    warmup_steps: int = 100
    clip_len: int = 4
    window: int = 4
    scale: int = 1
    alternate: bool = True
    teacher_forcing: bool = False
    init_corruption: float = 0.3
    max_grad_norm: float = 1.0
    # normalise with running statistics during this stage (matches inference)
    freeze_bn: bool = False
    # re-estimate batch-norm running statistics from the stage's data before it starts
    recalibrate_bn: bool = False
    # random channel permutation, horizontal flip and time reversal per sampled clip
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"unknown stage {self.stage}")
        if min(self.steps, self.clip_len, self.window, self.scale) < 1 or self.warmup_steps < 0:
            raise ConfigError("step, clip and window counts must be positive")


def default_schedule() -> list[TrainConfig]:
    return [
        TrainConfig(stage=1, steps=1000, base_lr=1e-3, weight_decay=0.03, warmup_steps=50,
                    alternate=False, teacher_forcing=True, seed=1),
        TrainConfig(stage=2, steps=2000, base_lr=5e-4, weight_decay=0.07, warmup_steps=100,
                    alternate=True, seed=2),
        TrainConfig(stage=3, steps=300, base_lr=1e-4, weight_decay=0.07, warmup_steps=20,
                    alternate=False, scale=2, seed=3),
    ]


@dataclass
class TrainData:
    matting: list[LabeledSequence]
    segmentation: list[LabeledSequence] = field(default_factory=list)


def make_dataset(seeds, frames: int = 16, size=(64, 64), scale: int = 1) -> list[LabeledSequence]:
    out = []
    for s in seeds:
        spec = random_scene(s, frames=frames, size=size)
        out.append(generate_sequence(with_size(spec, scale) if scale > 1 else spec))
    return out


def make_segmentation_set(seeds, frames: int = 16, size=(64, 64)) -> list[LabeledSequence]:
    return [segmentation_clip(s, frames, size) for s in seeds]


def augment_clip(seq: LabeledSequence, start: int, n: int, rng: np.random.Generator) -> LabeledSequence:
    """Cut ``n`` frames from ``start`` and apply one random channel order, flip and direction."""
    perm = rng.permutation(3)
    flip = bool(rng.random() < 0.5)
    order = list(range(start, start + n))
    if rng.random() < 0.5:
        order.reverse()

    def tf(a, channels=False):
        a = a[perm] if channels else a
        return np.ascontiguousarray(a[..., ::-1]) if flip else a

    return LabeledSequence([tf(seq.frames[t], True) for t in order], [tf(seq.alpha_gt[t]) for t in order],
                           [tf(seq.mask_gt[t]) for t in order])


class TrainingDiverged(StateError):
    pass


def _initial_mask(seq: LabeledSequence, start: int, rng: np.random.Generator, p_corrupt: float) -> np.ndarray:
    mask = seq.mask_gt[start]
    if p_corrupt > 0 and rng.random() < p_corrupt:
        kind = ("dilate", "erode")[int(rng.integers(2))]
        mask = corrupt_mask(mask, kind, int(rng.integers(1, 4)))
    return mask


def clip_loss_step(model: MattingModel, seq: LabeledSequence, start: int, cfg: TrainConfig,
                   mask_only: bool, rng: np.random.Generator, weights: LossWeights = LossWeights(),
                   ablation: AblationConfig = AblationConfig()) -> dict[str, float]:
    """Forward/backward over one clip; gradients accumulate into the parameters."""
    n = cfg.clip_len
    sess = init_session(seq.frames[start], _initial_mask(seq, start, rng, cfg.init_corruption), model, ablation)
    sums = {"total": 0.0, "mask": 0.0, "coarse": 0.0, "fine": 0.0}
    window_loss = None
    for i in range(n):
        t = start + i
        override = seq.mask_gt[t] if cfg.teacher_forcing else None
        out = step_frame(sess, seq.frames[t], guidance_override=override)
        alpha_q, m_q = quarter_targets(seq.alpha_gt[t])
        if mask_only:
            loss = mask_bce(out.mask_p, m_q)
            parts = {"total": loss.item(), "mask": loss.item(), "coarse": 0.0, "fine": 0.0}
        else:
            br = total_loss(out, seq.alpha_gt[t], alpha_q, m_q, weights)
            loss = br.total
            parts = br.as_floats()
        for k in sums:
            sums[k] += parts[k] / n
        loss = loss * (1.0 / n)
        window_loss = loss if window_loss is None else window_loss + loss
        if (i + 1) % cfg.window == 0 or i == n - 1:
            window_loss.backward()
            window_loss = None
            sess.bank.detach()
    return sums


def train_stage(model: MattingModel, cfg: TrainConfig, data: TrainData, log_path: Path | None = None,
                weights: LossWeights = LossWeights()) -> list[dict]:
    """Run one stage and return its trace (one record per optimiser step)."""
    rng = np.random.default_rng([cfg.seed, cfg.stage])
    if cfg.recalibrate_bn:
        recalibrate_batch_norm(model, data.matting)
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    model.train()
    if cfg.freeze_bn:
        freeze_batch_norm(model)
    trace = []
    sink = open(log_path, "a") if log_path else None
    try:
        for step in range(cfg.steps):
            lr = lr_at(step, cfg.steps, cfg.base_lr, cfg.warmup_steps)
            if cfg.stage == 1:
                kind, pool = "segmentation", data.segmentation or data.matting
            elif cfg.stage == 2 and cfg.alternate and data.segmentation and step % 2 == 1:
                kind, pool = "segmentation", data.segmentation
            else:
                kind, pool = "matting", data.matting
            seq = pool[int(rng.integers(len(pool)))]
            start = int(rng.integers(len(seq) - cfg.clip_len + 1))
            if cfg.augment:
                seq, start = augment_clip(seq, start, cfg.clip_len, rng), 0
            model.zero_grad()
            try:
                parts = clip_loss_step(model, seq, start, cfg, kind == "segmentation", rng, weights)
            except NonFiniteError as exc:
                _dump(model, cfg, step, trace, log_path)
                raise TrainingDiverged(f"stage {cfg.stage} step {step}: {exc}") from exc
            if not all(math.isfinite(v) for v in parts.values()):
                _dump(model, cfg, step, trace, log_path)
                raise TrainingDiverged(f"stage {cfg.stage} step {step}: non-finite loss {parts}")
            gnorm = clip_grad_norm(params, cfg.max_grad_norm)
            opt.step(lr)
            rec = {"stage": cfg.stage, "step": step, "lr": lr, "kind": kind, "grad_norm": gnorm, **parts}
            trace.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
            if step % 100 == 0:
                log.info("stage %d step %d lr %.2e loss %.4f", cfg.stage, step, lr, parts["total"])
    finally:
        if sink:
            sink.close()
    return trace


def recalibrate_batch_norm(model: MattingModel, sequences: list[LabeledSequence]) -> None:
    """Pool per-channel statistics over every frame of ``sequences`` into the running buffers."""
    bns = batch_norms(model)
    model.train()
    for bn in bns:
        bn.begin_calibration()
    try:
        with T.no_grad():
            for seq in sequences:
                sess = init_session(seq.frames[0], seq.mask_gt[0], model)
                for frame in seq.frames:
                    step_frame(sess, frame)
    finally:
        for bn in bns:
            bn.end_calibration()


def _dump(model: MattingModel, cfg: TrainConfig, step: int, trace: list[dict], log_path: Path | None) -> None:
    info = {"config": asdict(cfg), "step": step, "recent": trace[-5:],
            "param_absmax": {n: float(np.abs(p.data).max()) for n, p in model.named_parameters()}}
    log.error("training diverged: %s", json.dumps(info)[:2000])
    if log_path:
        Path(log_path).with_suffix(".diverged.json").write_text(json.dumps(info, indent=1))


def smoothed(values, k: int = 50) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - k)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


@dataclass
class ScheduleResult:
    trace: list[dict]
    seconds: dict


def train_schedule(model: MattingModel, stages: list[TrainConfig], train_seeds=range(6), frames: int = 16,
                   size=(64, 64), log_path: Path | None = None, segmentation_stills: int = 48) -> ScheduleResult:
    """Run the stages in order, building each stage's data at its resolution.

    The segmentation pool (stages 1 and 2) is ``segmentation_stills`` motion-augmented
    hard-alpha stills with seeds disjoint from the matting sequences.
    """
    trace, seconds = [], {}
    seg_seeds = [1000 + s for s in range(segmentation_stills)]
    for cfg in stages:
        t0 = time.perf_counter()
        sz = (size[0] * cfg.scale, size[1] * cfg.scale)
        data = TrainData(make_dataset(train_seeds, frames, size, cfg.scale),
                         make_segmentation_set(seg_seeds, frames, sz) if cfg.stage in (1, 2) else [])
        trace += train_stage(model, cfg, data, log_path)
        seconds[cfg.stage] = seconds.get(cfg.stage, 0.0) + time.perf_counter() - t0
    return ScheduleResult(trace, seconds)


def native_tail() -> TrainConfig:
    """Short frozen-BN fine-tune at native resolution that follows the 2x stage."""
    return TrainConfig(stage=3, steps=300, base_lr=1e-4, weight_decay=0.07, warmup_steps=20,
                       alternate=False, scale=1, seed=4)


def train_desk_model(model: MattingModel, stages: list[TrainConfig] | None = None, train_seeds=range(6),
                     frames: int = 16, size=(64, 64), log_path: Path | None = None,
                     tail: TrainConfig | None = native_tail()) -> ScheduleResult:
    """Desk-scale recipe: the given schedule plus batch-norm pooling and a native-resolution tail.

    Stages 1 and 2 train with per-frame batch-norm statistics. Before any later
    stage the running statistics are pooled over the native-resolution matting
    set and frozen, so stage 3 and ``tail`` optimise the network that inference
    actually runs. ``tail`` (None to skip) brings the weights back to the
    evaluation resolution after the 2x stage.
    """
    stages = default_schedule() if stages is None else stages
    early = [c for c in stages if c.stage < 3]
    late = [c for c in stages if c.stage >= 3] + ([tail] if tail is not None else [])
    late = [replace(c, freeze_bn=True, recalibrate_bn=False) for c in late]
    first = train_schedule(model, early, train_seeds, frames, size, log_path)
    t0 = time.perf_counter()
    recalibrate_batch_norm(model, make_dataset(train_seeds, frames, size))
    calibration = time.perf_counter() - t0
    second = train_schedule(model, late, train_seeds, frames, size, log_path)
    seconds = {**first.seconds, "calibration": calibration}
    for k, v in second.seconds.items():
        seconds[k] = seconds.get(k, 0.0) + v
    return ScheduleResult(first.trace + second.trace, seconds)
