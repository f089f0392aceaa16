"""Per-frame inference: session setup, the frame loop and bi-directional replay."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .decoder import DecoderOutputs, mask_to_guidance
from .errors import ContractError, DimensionError
from .losses import pseudo_mask
from .model import MattingModel
from .synth import corrupt_mask
from .tensor import Tensor
from .transformer import AblationConfig, MemoryBank

log = logging.getLogger(__name__)


@dataclass
class Session:
    model: MattingModel
    bank: MemoryBank
    size: tuple[int, int]
    ablation: AblationConfig = AblationConfig()
    frame_index: int = 0
    warnings: list[str] = field(default_factory=list)
    # frame whose entry currently sits at the head of memory and may be overwritten
    _replace_next: bool = True


def _as_frame(frame) -> Tensor:
    return frame if isinstance(frame, Tensor) else T.Tensor(np.asarray(frame))


def guidance_from_mask(mask, grid: tuple[int, int]) -> Tensor:
    """Resize a 1×H×W (or H×W) mask onto the 1/16 grid, area-averaged when divisible."""
    m = mask if isinstance(mask, Tensor) else T.Tensor(np.asarray(mask, dtype=np.float32))
    if m.ndim == 2:
        m = T.reshape(m, (1,) + m.shape)
    h, w = m.shape[1:]
    gh, gw = grid
    if h % gh == 0 and w % gw == 0:
        return T.area_downsample(m, gh, gw)
    return T.clip(T.bilinear_resize(m, gh, gw), 0.0, 1.0)


def _embed_or_raw(sess: Session, v: Tensor, guidance: Tensor | None) -> Tensor:
    if sess.ablation.update == "none" or guidance is None:
        return v
    return sess.model.transformer.embed(v, guidance)


def init_session(frame0, initial_mask, model: MattingModel, ablation: AblationConfig = AblationConfig()) -> Session:
    """Encode the first frame and seed both memory compartments with its embedded Value."""
    frame0 = _as_frame(frame0)
    m = np.asarray(initial_mask.data if isinstance(initial_mask, Tensor) else initial_mask)
    if m.min() < 0 or m.max() > 1:
        raise ContractError("initial mask must lie in [0, 1]")
    sess = Session(model, model.transformer.new_bank(), tuple(frame0.shape[1:]), ablation)
    if m.sum() == 0:
        sess.warnings.append("initial mask has zero foreground area")
        log.warning("initial mask has zero foreground area")
    pyr = model.encode(frame0)
    qkv = model.transformer.project(pyr.z)
    guidance = guidance_from_mask(initial_mask, qkv.v.shape[1:])
    sess.bank.write(qkv.k, _embed_or_raw(sess, qkv.v, guidance))
    return sess


def frame_guidance(sess: Session, out: DecoderOutputs, grid: tuple[int, int]) -> Tensor | None:
    mode = sess.ablation.update
    if mode == "mask":
        return mask_to_guidance(out.mask_p)
    if mode == "alpha":
        # the fine alpha itself, box-averaged onto the memory grid
        return guidance_from_mask(out.alpha_fine, grid)
    return None


def step_frame(sess: Session, frame, guidance_override=None) -> DecoderOutputs:
    """One iteration of the frame loop: attend, decode, embed, store.

    ``guidance_override`` replaces the decoder-derived mask (teacher forcing
    during training).
    """
    frame = _as_frame(frame)
    if tuple(frame.shape[1:]) != sess.size:
        raise DimensionError(f"frame {frame.shape[1:]} does not match session size {sess.size}")
    model = sess.model
    pyr = model.encode(frame)
    z_prime, qkv = model.transformer(pyr.z, sess.bank, sess.frame_index, sess.ablation.attention)
    out = model.decoder.decode(z_prime, pyr)
    grid = qkv.v.shape[1:]
    if guidance_override is not None:
        guidance = guidance_from_mask(guidance_override, grid)
    else:
        guidance = frame_guidance(sess, out, grid)
    v_fb = _embed_or_raw(sess, qkv.v, guidance)
    if sess._replace_next:
        # the first loop iteration re-processes the initial frame; its decoder
        # mask supersedes the initial mask in memory
        sess.bank.replace_newest(qkv.k, v_fb)
        sess._replace_next = False
    else:
        sess.bank.write(qkv.k, v_fb)
    sess.frame_index += 1
    return out


@dataclass
class RunResult:
    alphas: list[np.ndarray]
    masks: list[np.ndarray]
    coarse: list[np.ndarray]
    timings: list[float]
    session: Session | None = None


def run_sequence(model: MattingModel, frames, initial_mask, ablation: AblationConfig = AblationConfig(),
                 session: Session | None = None) -> RunResult:
    """Initialise on frame 0 and process every frame in order (no gradients, eval mode)."""
    frames = list(frames)
    if not frames:
        raise ContractError("cannot run an empty sequence")
    was_training = model.training
    model.eval()
    res = RunResult([], [], [], [])
    try:
        with T.no_grad():
            sess = session or init_session(frames[0], initial_mask, model, ablation)
            for f in frames:
                t0 = time.perf_counter()
                out = step_frame(sess, f)
                res.timings.append(time.perf_counter() - t0)
                res.alphas.append(out.alpha_fine.data.copy())
                res.masks.append(T.softmax(out.mask_p, axis=0).data[1:2].copy())
                res.coarse.append(out.alpha_coarse.data.copy())
    finally:
        model.train(was_training)
    res.session = sess
    return res


@dataclass
class BidirectionalResult:
    alphas: list[np.ndarray]
    forward_alphas: list[np.ndarray]
    masks: list[np.ndarray]


def bidirectional_infer(model: MattingModel, frames, initial_mask,
                        ablation: AblationConfig = AblationConfig()) -> BidirectionalResult:
    """Forward pass to fill memory, then a reverse pass that continues from that memory.

    The reported alphas are the reverse-pass outputs, put back in
    chronological order.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ContractError("bi-directional inference needs at least two frames")
    fwd = run_sequence(model, frames, initial_mask, ablation)
    back = run_sequence(model, frames[::-1], None, ablation, session=fwd.session)
    return BidirectionalResult(back.alphas[::-1], fwd.alphas, back.masks[::-1])


def initial_mask_provider(kind: str, alpha_gt0=None, magnitude: int = 2, path: str | Path | None = None,
                          corruption: str = "dilate", seed: int = 0, tau: float = 0.5) -> np.ndarray:
    """Initial Fg/Bg mask for frame 0: ground-truth oracle, a corrupted oracle, or a file."""
    if kind == "oracle":
        return pseudo_mask(np.asarray(alpha_gt0, dtype=np.float32), tau)
    if kind in ("corrupted", "corrupted_oracle"):
        oracle = pseudo_mask(np.asarray(alpha_gt0, dtype=np.float32), tau)
        return corrupt_mask(oracle, corruption, magnitude, seed)
    if kind == "file":
        from .io import read_mask
        if path is None or not Path(path).exists():
            raise FileNotFoundError(f"initial mask file not found: {path}")
        return read_mask(path)
    raise ValueError(f"unknown initial mask provider {kind!r}")
