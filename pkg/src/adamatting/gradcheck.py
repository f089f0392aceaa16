"""Central finite-difference checks for the autodiff core (run in float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (all, or just ``indices``)."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    idx = list(np.ndindex(x.shape)) if indices is None else list(indices)
    for i in idx:
        old = x.data[i]
        x.data[i] = old + h
        up = f().item()
        x.data[i] = old - h
        down = f().item()
        x.data[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(f: Callable[[], Tensor], xs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in xs:
        x.grad = None
    f().backward()
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(f: Callable[[], Tensor], xs: Sequence[Tensor], h: float = 1e-3) -> float:
    """Largest relative error across the inputs ``xs``."""
    ana = analytic_grads(f, xs)
    return max(rel_err(a, numerical_grad(f, x, h)) for a, x in zip(ana, xs))


def sample_entries(params: Sequence[tuple[str, Tensor]], n: int, rng: np.random.Generator
                   ) -> list[tuple[str, Tensor, tuple]]:
    """Pick ``n`` (name, tensor, index) triples, spreading picks over distinct tensors first."""
    order = rng.permutation(len(params))
    picks = []
    while len(picks) < n:
        for j in order:
            name, p = params[j]
            picks.append((name, p, tuple(int(rng.integers(s)) for s in p.shape)))
            if len(picks) == n:
                break
    return picks
