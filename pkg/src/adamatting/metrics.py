"""Alpha-matte error metrics: MAD, MSE, Grad, Conn and dtSSD.

Sequences are arrays shaped (frames, H, W) (a trailing singleton channel
axis is squeezed). Reported values are scaled: ×1e3 for MAD/MSE/Grad/Conn and
×1e2 for dtSSD. Metrics that cannot be evaluated return ``None``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError

SPATIAL_SCALE = 1e3
TEMPORAL_SCALE = 1e2
GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_SOURCE = 0.9
CONN_FOLD = 0.15


def _seq(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 4 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DimensionError(f"expected (frames, H, W) alphas, got shape {np.shape(x)}")
    return a


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _seq(pred), _seq(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def mad(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)) * SPATIAL_SCALE)


def mse(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean((p - g) ** 2) * SPATIAL_SCALE)


def gaussian_derivative_kernel(sigma: float = GRAD_SIGMA) -> np.ndarray:
    """2-D x-derivative-of-Gaussian kernel, radius ⌈3σ⌉, unit L2 norm."""
    r = math.ceil(3 * sigma)
    u = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-u ** 2 / (2 * sigma ** 2)) / (sigma * math.sqrt(2 * math.pi))
    dg = -u * g / sigma ** 2
    k = np.outer(g, dg)  # rows smooth, columns differentiate
    return k / np.sqrt(np.sum(k * k))


def gradient_magnitude(alpha: np.ndarray, sigma: float = GRAD_SIGMA) -> np.ndarray:
    kx = gaussian_derivative_kernel(sigma)
    gx = ndimage.convolve(alpha, kx, mode="nearest")
    gy = ndimage.convolve(alpha, kx.T, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def grad_error(pred, gt, sigma: float = GRAD_SIGMA) -> float:
    p, g = _pair(pred, gt)
    per_frame = [np.mean((gradient_magnitude(a, sigma) - gradient_magnitude(b, sigma)) ** 2)
                 for a, b in zip(p, g)]
    return float(np.mean(per_frame) * SPATIAL_SCALE)


_FOUR = ndimage.generate_binary_structure(2, 1)


def _largest_component(binary: np.ndarray) -> np.ndarray | None:
    labels, n = ndimage.label(binary, structure=_FOUR)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _connectivity_level(alpha: np.ndarray, source: np.ndarray, step: float) -> np.ndarray:
    """Highest threshold at which each pixel still connects to the source region."""
    level = np.zeros_like(alpha)
    for th in _thresholds(step):
        labels, _ = ndimage.label(alpha >= th, structure=_FOUR)
        hit = np.unique(labels[source & (labels > 0)])
        connected = np.isin(labels, hit) & (labels > 0)
        level[connected] = th
    return level


def _thresholds(step: float) -> np.ndarray:
    n = int(round(CONN_SOURCE / step))
    return np.round(np.arange(1, n + 1) * step, 10)


def connectivity_degree(alpha: np.ndarray, source: np.ndarray, step: float = CONN_STEP) -> np.ndarray:
    d = alpha - _connectivity_level(alpha, source, step)
    return 1.0 - d * (d >= CONN_FOLD)


def conn_error(pred, gt, theta_step: float = CONN_STEP) -> float | None:
    """Connectivity error of one frame (or the frame average of a sequence)."""
    p, g = _pair(pred, gt)
    values = []
    for a, b in zip(p, g):
        source = _largest_component((a >= CONN_SOURCE) & (b >= CONN_SOURCE))
        if source is None:
            return None
        phi_p = connectivity_degree(a, source, theta_step)
        phi_g = connectivity_degree(b, source, theta_step)
        values.append(np.mean(np.abs(phi_p - phi_g)))
    return float(np.mean(values) * SPATIAL_SCALE)


def dtssd(pred, gt) -> float | None:
    p, g = _pair(pred, gt)
    if p.shape[0] < 2:
        return None
    diff = np.diff(p, axis=0) - np.diff(g, axis=0)
    per_step = np.sqrt(np.mean(diff.reshape(diff.shape[0], -1) ** 2, axis=1))
    return float(np.mean(per_step) * TEMPORAL_SCALE)


@dataclass
class MetricReport:
    mad: float
    mse: float
    grad: float
    conn: float | None
    dtssd: float | None
    frames: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def raw(self) -> dict:
        """The same values without the reporting scale factors."""
        def un(v, s):
            return None if v is None else v / s
        return {"mad": un(self.mad, SPATIAL_SCALE), "mse": un(self.mse, SPATIAL_SCALE),
                "grad": un(self.grad, SPATIAL_SCALE), "conn": un(self.conn, SPATIAL_SCALE),
                "dtssd": un(self.dtssd, TEMPORAL_SCALE)}


def evaluate_sequence(pred, gt, with_conn: bool = True) -> MetricReport:
    p, g = _pair(pred, gt)
    return MetricReport(
        mad=mad(p, g), mse=mse(p, g), grad=grad_error(p, g),
        conn=conn_error(p, g) if with_conn else None,
        dtssd=dtssd(p, g), frames=p.shape[0],
    )


def aggregate(reports: list[MetricReport]) -> MetricReport:
    """Frame-weighted mean; a metric absent from any sequence stays absent."""
    if not reports:
        raise ValueError("nothing to aggregate")
    weights = np.array([r.frames or 1 for r in reports], dtype=np.float64)

    def avg(name):
        vals = [getattr(r, name) for r in reports]
        if any(v is None for v in vals):
            return None
        return float(np.dot(vals, weights) / weights.sum())

    return MetricReport(avg("mad"), avg("mse"), avg("grad"), avg("conn"), avg("dtssd"),
                        int(weights.sum()))
