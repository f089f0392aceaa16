"""Training objective: Fg/Bg mask BCE, alpha L1 and Laplacian-pyramid terms."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .decoder import DecoderOutputs
from .errors import ConfigError, DimensionError
from .tensor import Tensor

PROB_EPS = 1e-7
MAX_LEVELS = 5


@dataclass(frozen=True)
class LossWeights:
    w_m: float = 0.5
    w_c: float = 0.5
    w_f: float = 1.0

    def __post_init__(self):
        if min(self.w_m, self.w_c, self.w_f) < 0:
            raise ConfigError("loss weights must be non-negative")


def pseudo_mask(alpha_gt, tau: float = 0.5) -> np.ndarray:
    """Binary foreground indicator ``alpha >= tau``."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {tau}")
    a = alpha_gt.data if isinstance(alpha_gt, Tensor) else np.asarray(alpha_gt)
    return (a >= tau).astype(a.dtype if a.dtype.kind == "f" else np.float32)


def fg_probability(mask_logits: Tensor) -> Tensor:
    return T.softmax(mask_logits, axis=0)[1:2]


def mask_bce(mask_logits: Tensor, m_star) -> Tensor:
    p = T.clip(fg_probability(mask_logits), PROB_EPS, 1.0 - PROB_EPS)
    m = T.as_tensor(m_star, like=p)
    if m.shape != p.shape:
        m = T.reshape(m, p.shape) if m.size == p.size else None
        if m is None:
            raise DimensionError(f"mask target does not match prediction {p.shape}")
    return T.mean(-(m * T.log(p) + (1.0 - m) * T.log(1.0 - p)))


def alpha_l1(alpha_p: Tensor, alpha_gt) -> Tensor:
    gt = T.as_tensor(alpha_gt, like=alpha_p)
    if gt.shape != alpha_p.shape:
        raise DimensionError(f"alpha shapes differ: {alpha_p.shape} vs {gt.shape}")
    return T.mean(T.abs_(alpha_p - gt))


_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _reflect(i: int, n: int) -> int:
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


@lru_cache(maxsize=None)
def _blur_down(n: int) -> np.ndarray:
    """5-tap binomial blur with mirror boundaries followed by keeping every other sample."""
    m = np.zeros(((n + 1) // 2, n))
    for r, c in enumerate(range(0, n, 2)):
        for t, wt in enumerate(_BINOMIAL):
            m[r, _reflect(c + t - 2, n)] += wt
    return m


@lru_cache(maxsize=None)
def _up(n: int) -> np.ndarray:
    """Zero-insertion to length ``n`` followed by the doubled binomial blur."""
    small = (n + 1) // 2
    m = np.zeros((n, small))
    for r in range(n):
        for t, wt in enumerate(_BINOMIAL):
            src = _reflect(r + t - 2, n)
            if src % 2 == 0:
                m[r, src // 2] += 2.0 * wt
    return m


def pyramid_levels(h: int, w: int, max_levels: int = MAX_LEVELS) -> int:
    """Number of pyramid levels (bands plus residual) that fit an h×w map.

    A level is only split further while both sides are at least 4, so the
    coarsest residual is never smaller than 2 pixels per side.
    """
    levels = 1
    while levels < max_levels and min(h, w) >= 4:
        h, w = (h + 1) // 2, (w + 1) // 2
        levels += 1
    return levels


def laplacian_pyramid(x: Tensor, levels: int | None = None) -> list[Tensor]:
    """Band-pass levels from fine to coarse, with the low-pass residual last."""
    h, w = x.shape[-2:]
    if levels is None:
        levels = pyramid_levels(h, w)
    bands = []
    cur = x
    for _ in range(levels - 1):
        h, w = cur.shape[-2:]
        down = T.separable_map(cur, _blur_down(h), _blur_down(w))
        up = T.separable_map(down, _up(h), _up(w))
        bands.append(cur - up)
        cur = down
    bands.append(cur)
    return bands


def laplacian_pyramid_loss(alpha_p: Tensor, alpha_gt) -> Tensor:
    """Σ_s 2^(s-1)/5 · mean|L_s(pred) − L_s(gt)| over the available levels."""
    gt = T.as_tensor(alpha_gt, like=alpha_p)
    if gt.shape != alpha_p.shape:
        raise DimensionError(f"alpha shapes differ: {alpha_p.shape} vs {gt.shape}")
    levels = pyramid_levels(*alpha_p.shape[-2:])
    # the pyramid is linear, so decompose the difference once
    diff = laplacian_pyramid(alpha_p - gt, levels)
    return T.total(T.mean(T.abs_(band)) * (2.0 ** s / 5.0) for s, band in enumerate(diff))


@dataclass
class LossBreakdown:
    total: Tensor
    mask: Tensor
    coarse: Tensor
    fine: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "mask", "coarse", "fine")}


def total_loss(outputs: DecoderOutputs, alpha_gt_full, alpha_gt_quarter, m_star_quarter,
               w: LossWeights = LossWeights()) -> LossBreakdown:
    mask = mask_bce(outputs.mask_p, m_star_quarter)
    coarse = alpha_l1(outputs.alpha_coarse, alpha_gt_quarter) + laplacian_pyramid_loss(
        outputs.alpha_coarse, alpha_gt_quarter)
    fine = alpha_l1(outputs.alpha_fine, alpha_gt_full) + laplacian_pyramid_loss(
        outputs.alpha_fine, alpha_gt_full)
    total = mask * w.w_m + coarse * w.w_c + fine * w.w_f
    return LossBreakdown(total, mask, coarse, fine)


def quarter_targets(alpha_gt: np.ndarray, tau: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Area-averaged 1/4-scale alpha and the pseudo-mask thresholded from it."""
    a = np.asarray(alpha_gt)
    h, w = a.shape[-2:]
    q = T.area_matrix(h, h // 4) @ a @ T.area_matrix(w, w // 4).T
    q = q.astype(a.dtype)
    return q, pseudo_mask(q, tau)
