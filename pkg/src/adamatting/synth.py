"""Deterministic synthetic matting sequences.

Backgrounds are smooth sinusoid-plus-gradient textures evaluated analytically
at affinely moving coordinates, so static backgrounds repeat bit for bit.
Foregrounds are soft-edged disks and capsules whose alpha is a smoothstep of
the signed distance to the sprite union. Frames are composited as
``alpha·F + (1 − alpha)·B`` in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy import ndimage

from .errors import ConfigError

Mode = Literal["static_bg", "dynamic_bg"]


@dataclass(frozen=True)
class BgMotion:
    tx: float = 0.0
    ty: float = 0.0
    rotation: float = 0.0  # degrees per frame
    zoom: float = 0.0      # relative scale change per frame

    @property
    def is_identity(self) -> bool:
        return self.tx == self.ty == self.rotation == self.zoom == 0.0


@dataclass(frozen=True)
class Sprite:
    center: tuple[float, float]          # (y, x) at frame 0, pixels
    velocity: tuple[float, float] = (0.0, 0.0)
    radius: float = 8.0
    softness: float = 1.0
    # a capsule when non-zero: half-length and orientation of the core segment
    half_length: float = 0.0
    angle: float = 0.0
    wobble: float = 0.0                  # amplitude of a sinusoidal side-to-side drift

    def __post_init__(self):
        if self.softness <= 0:
            raise ConfigError("sprite edge softness must be positive")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    frames: int = 16
    size: tuple[int, int] = (64, 64)
    mode: Mode = "dynamic_bg"
    bg_motion: BgMotion = BgMotion()
    fg_shapes: tuple[Sprite, ...] = ()

    def __post_init__(self):
        h, w = self.size
        if h % 16 or w % 16 or h <= 0 or w <= 0:
            raise ConfigError(f"scene size {self.size} must be positive multiples of 16")
        if self.frames < 1:
            raise ConfigError("a scene needs at least one frame")
        if self.mode not in ("static_bg", "dynamic_bg"):
            raise ConfigError(f"unknown scene mode {self.mode!r}")
        if self.mode == "static_bg" and not self.bg_motion.is_identity:
            object.__setattr__(self, "bg_motion", BgMotion())


@dataclass
class LabeledSequence:
    frames: list[np.ndarray]           # 3×H×W float32 in [0, 1]
    alpha_gt: list[np.ndarray]         # 1×H×W float32 in [0, 1]
    mask_gt: list[np.ndarray]          # 1×H×W binary float32
    fg: list[np.ndarray] = field(default_factory=list)
    bg: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class Texture:
    """Sum of a few oriented sinusoids plus a linear ramp, per colour channel."""

    base: np.ndarray      # (3,)
    amps: np.ndarray      # (k, 3)
    freqs: np.ndarray     # (k, 2) cycles per pixel along (y, x)
    phases: np.ndarray    # (k,)
    ramp: np.ndarray      # (2, 3) colour change per pixel along (y, x)

    def __call__(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        out = np.empty((3,) + yy.shape, dtype=np.float64)
        for c in range(3):
            v = self.base[c] + self.ramp[0, c] * yy + self.ramp[1, c] * xx
            for a, f, ph in zip(self.amps[:, c], self.freqs, self.phases):
                v = v + a * np.sin(2 * math.pi * (f[0] * yy + f[1] * xx) + ph)
            out[c] = v
        return np.clip(out, 0.0, 1.0)


def random_texture(rng: np.random.Generator, size: int, contrast: float = 0.25) -> Texture:
    k = 3
    base = rng.uniform(0.25, 0.75, 3)
    amps = rng.uniform(0.3, 1.0, (k, 3)) * contrast / k * 2
    freqs = rng.uniform(-1.0, 1.0, (k, 2)) * rng.uniform(1.0, 4.0, (k, 1)) / size
    phases = rng.uniform(0, 2 * math.pi, k)
    ramp = rng.uniform(-0.15, 0.15, (2, 3)) / size
    return Texture(base, amps, freqs, phases, ramp)


def smoothstep(edge0: float, edge1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def sprite_center(s: Sprite, t: int) -> tuple[float, float]:
    cy = s.center[0] + s.velocity[0] * t
    cx = s.center[1] + s.velocity[1] * t
    if s.wobble:
        # drift perpendicular to the direction of travel
        cx += s.wobble * math.sin(0.5 * t)
    return cy, cx


def signed_distance(s: Sprite, t: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cy, cx = sprite_center(s, t)
    dy, dx = yy - cy, xx - cx
    if s.half_length > 0:
        uy, ux = math.sin(s.angle), math.cos(s.angle)
        proj = np.clip(dy * uy + dx * ux, -s.half_length, s.half_length)
        dy, dx = dy - proj * uy, dx - proj * ux
    return np.sqrt(dy * dy + dx * dx) - s.radius


def sprite_alpha(sprites, t: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Union alpha; each sprite's ramp spans ±1.5σ around its boundary (3σ wide)."""
    alpha = np.zeros(yy.shape)
    for s in sprites:
        a = smoothstep(-1.5 * s.softness, 1.5 * s.softness, -signed_distance(s, t, yy, xx))
        alpha = np.maximum(alpha, a)
    return alpha


def _bg_coords(m: BgMotion, t: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Texture coordinates seen at frame t: inverse of the accumulated affine motion."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if m.is_identity or t == 0:
        return yy, xx
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(m.rotation * t)
    scale = (1.0 + m.zoom) ** t
    y0, x0 = yy - cy - m.ty * t, xx - cx - m.tx * t
    c, s = math.cos(-theta), math.sin(-theta)
    ty = (c * y0 - s * x0) / scale + cy
    tx = (s * y0 + c * x0) / scale + cx
    return ty, tx


def composite(alpha: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """``alpha·F + (1 − alpha)·B`` in float32 (alpha is 1×H×W)."""
    alpha = alpha.astype(np.float32)
    return (alpha * fg.astype(np.float32) + (np.float32(1.0) - alpha) * bg.astype(np.float32)).astype(np.float32)


def _palettes(rng: np.random.Generator, size: int) -> tuple[Texture, Texture]:
    # foreground and background come from the same texture family; only the
    # per-scene colours tell them apart
    return random_texture(rng, size), random_texture(rng, size)


def random_scene(seed: int, frames: int = 16, size: tuple[int, int] = (64, 64),
                 mode: Mode | None = None, softness: float | None = None) -> SceneSpec:
    """Draw a scene with one or two moving sprites and (optionally) camera motion."""
    rng = np.random.default_rng([seed, 0x5CE])
    h, w = size
    if mode is None:
        mode = "dynamic_bg" if rng.random() < 0.5 else "static_bg"
    n = 1 + int(rng.random() < 0.4)
    sprites = []
    for _ in range(n):
        r = rng.uniform(0.14, 0.24) * min(h, w)
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        speed = rng.uniform(0.2, 0.9) * min(h, w) / 64
        ang = rng.uniform(0, 2 * math.pi)
        sprites.append(Sprite(
            center=(cy, cx), velocity=(speed * math.sin(ang), speed * math.cos(ang)), radius=r,
            softness=softness if softness is not None else rng.uniform(0.6, 2.0) * min(h, w) / 64,
            half_length=rng.uniform(0, 0.8) * r if rng.random() < 0.5 else 0.0,
            angle=rng.uniform(0, math.pi), wobble=rng.uniform(0, 2.0) * min(h, w) / 64,
        ))
    motion = BgMotion()
    if mode == "dynamic_bg":
        motion = BgMotion(tx=rng.uniform(-1, 1) * w / 64, ty=rng.uniform(-1, 1) * h / 64,
                          rotation=rng.uniform(-1.0, 1.0), zoom=rng.uniform(-0.01, 0.01))
    return SceneSpec(seed=seed, frames=frames, size=size, mode=mode, bg_motion=motion,
                     fg_shapes=tuple(sprites))


def generate_sequence(spec: SceneSpec) -> LabeledSequence:
    h, w = spec.size
    rng = np.random.default_rng([spec.seed, 0x7E7])
    fg_tex, bg_tex = _palettes(rng, max(h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    seq = LabeledSequence([], [], [], [], [])
    static_bg = None
    for t in range(spec.frames):
        if spec.mode == "static_bg":
            if static_bg is None:
                static_bg = bg_tex(yy, xx).astype(np.float32)
            bg = static_bg.copy()
        else:
            bg = bg_tex(*_bg_coords(spec.bg_motion, t, h, w)).astype(np.float32)
        # foreground texture rides with the first sprite
        if spec.fg_shapes:
            cy, cx = sprite_center(spec.fg_shapes[0], t)
            c0y, c0x = spec.fg_shapes[0].center
            fg = fg_tex(yy - (cy - c0y), xx - (cx - c0x)).astype(np.float32)
        else:
            fg = fg_tex(yy, xx).astype(np.float32)
        alpha = sprite_alpha(spec.fg_shapes, t, yy, xx)[None].astype(np.float32)
        seq.frames.append(composite(alpha, fg, bg))
        seq.alpha_gt.append(alpha)
        seq.mask_gt.append((alpha >= 0.5).astype(np.float32))
        seq.fg.append(fg)
        seq.bg.append(bg)
    return seq


def _warp(img: np.ndarray, dy: float, dx: float, angle: float, scale: float, fill: str) -> np.ndarray:
    """Rotate/scale about the centre and translate by (dy, dx), bilinear."""
    if dy == dx == angle == 0.0 and scale == 1.0:
        return img.copy()
    h, w = img.shape[-2:]
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    cos, sin = math.cos(math.radians(angle)), math.sin(math.radians(angle))
    # output -> input mapping
    mat = np.array([[cos, sin], [-sin, cos]]) / scale
    offset = c - mat @ (c + np.array([dy, dx]))
    mode = "nearest" if fill == "edge" else "constant"
    return np.stack([ndimage.affine_transform(ch.astype(np.float64), mat, offset, order=1, mode=mode, cval=0.0)
                     for ch in img]).astype(np.float32)


@dataclass(frozen=True)
class MotionTrajectory:
    velocity: tuple[float, float] = (0.0, 0.0)
    spin: float = 0.0      # degrees per frame
    zoom: float = 0.0      # relative scale change per frame

    def at(self, t: int) -> tuple[float, float, float, float]:
        return self.velocity[0] * t, self.velocity[1] * t, self.spin * t, (1.0 + self.zoom) ** t


def random_trajectory(rng: np.random.Generator, magnitude: float) -> MotionTrajectory:
    return MotionTrajectory(
        velocity=tuple(rng.uniform(-1.0, 1.0, 2) * magnitude),
        spin=float(rng.uniform(-1.0, 1.0) * magnitude),
        zoom=float(rng.uniform(-0.01, 0.01) * magnitude),
    )


def motion_augment(still: LabeledSequence, frames: int, seed: int, magnitude: float = 1.0,
                   fg_motion: MotionTrajectory | None = None,
                   bg_motion: MotionTrajectory | None = None) -> LabeledSequence:
    """Turn a single composited still into a clip by moving its layers independently."""
    if len(still) != 1 or not still.fg or not still.bg:
        raise ConfigError("motion_augment needs a single frame with foreground and background layers")
    rng = np.random.default_rng([seed, 0xA09])
    fg_motion = fg_motion or random_trajectory(rng, magnitude)
    bg_motion = bg_motion or random_trajectory(rng, magnitude)
    fg0, bg0, a0 = still.fg[0], still.bg[0], still.alpha_gt[0]
    out = LabeledSequence([], [], [], [], [])
    for t in range(frames):
        fdy, fdx, fang, fsc = fg_motion.at(t)
        bdy, bdx, bang, bsc = bg_motion.at(t)
        fg = _warp(fg0, fdy, fdx, fang, fsc, "edge")
        alpha = np.clip(_warp(a0, fdy, fdx, fang, fsc, "zero"), 0.0, 1.0).astype(np.float32)
        bg = _warp(bg0, bdy, bdx, bang, bsc, "edge")
        out.frames.append(composite(alpha, fg, bg))
        out.alpha_gt.append(alpha)
        out.mask_gt.append((alpha >= 0.5).astype(np.float32))
        out.fg.append(fg)
        out.bg.append(bg)
    return out


def segmentation_clip(seed: int, frames: int, size: tuple[int, int] = (64, 64)) -> LabeledSequence:
    """Hard-alpha still animated by random layer motion (mask-only supervision data)."""
    spec = random_scene(seed, frames=1, size=size, mode="static_bg", softness=1e-3)
    return motion_augment(generate_sequence(spec), frames, seed, magnitude=min(size) / 64)


_CROSS = ndimage.generate_binary_structure(2, 1)


def corrupt_mask(mask: np.ndarray, kind: str, magnitude: int, seed: int = 0) -> np.ndarray:
    """Dilate, erode (4-neighbourhood, ``magnitude`` iterations) or flip a seeded rectangle."""
    m = np.asarray(mask)
    squeeze = m.ndim == 3
    b = (m[0] if squeeze else m) >= 0.5
    if magnitude <= 0:
        out = b
    elif kind == "dilate":
        out = ndimage.binary_dilation(b, _CROSS, iterations=magnitude)
    elif kind == "erode":
        out = ndimage.binary_erosion(b, _CROSS, iterations=magnitude, border_value=1)
    elif kind == "flip_region":
        rng = np.random.default_rng([seed, 0xF11])
        h, w = b.shape
        rh, rw = min(h, 2 * magnitude + 1), min(w, 2 * magnitude + 1)
        y0, x0 = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        out = b.copy()
        out[y0:y0 + rh, x0:x0 + rw] = ~out[y0:y0 + rh, x0:x0 + rw]
    else:
        raise ConfigError(f"unknown corruption {kind!r}")
    out = out.astype(np.float32)
    return out[None] if squeeze else out


def with_size(spec: SceneSpec, scale: int) -> SceneSpec:
    """The same scene rendered at an integer multiple of its resolution."""
    h, w = spec.size
    sprites = tuple(replace(s, center=(s.center[0] * scale, s.center[1] * scale),
                            velocity=(s.velocity[0] * scale, s.velocity[1] * scale),
                            radius=s.radius * scale, softness=s.softness * scale,
                            half_length=s.half_length * scale, wobble=s.wobble * scale)
                    for s in spec.fg_shapes)
    m = spec.bg_motion
    return replace(spec, size=(h * scale, w * scale), fg_shapes=sprites,
                   bg_motion=BgMotion(m.tx * scale, m.ty * scale, m.rotation, m.zoom))
