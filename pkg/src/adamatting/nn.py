"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always participates in the tape."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    training = True

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for prefix, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield prefix + name, value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name in getattr(mod, "_buffer_names", ()):
                yield prefix + name, getattr(mod, name)

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by dotted name, in a stable order."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = {}
        for prefix, mod in self.named_modules():
            for name in getattr(mod, "_buffer_names", ()):
                bufs[prefix + name] = (mod, name)
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[0]}")
        for name, value in state.items():
            if name in own:
                target = own[name].data
            elif name in bufs:
                target = getattr(*bufs[name])
            else:
                raise KeyError(f"unexpected entry {name}")
            if target.shape != np.shape(value):
                raise ValueError(f"shape mismatch for {name}: model {target.shape}, state {np.shape(value)}")
            target[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for name in getattr(mod, "_buffer_names", ()):
                setattr(mod, name, getattr(mod, name).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype())


class Linear(Module):
    """Per-token affine map on a (tokens, in) matrix."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, bound, (n_in, n_out)))
        self.bias = Parameter(_uniform(rng, bound, (n_out,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 dilation: int = 1, bias: bool = True):
        self.stride, self.dilation = stride, dilation
        self.pad = dilation * (k // 2)
        fan_in = c_in * k * k
        # He-uniform: the convs feed ReLUs
        self.weight = Parameter(_uniform(rng, math.sqrt(6.0 / fan_in), (c_out, c_in, k, k)))
        self.bias = Parameter(np.zeros(c_out, dtype=T.get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        dt = T.get_default_dtype()
        self.weight = Parameter(np.ones(c, dtype=dt))
        self.bias = Parameter(np.zeros(c, dtype=dt))
        self.running_mean = np.zeros(c, dtype=dt)
        self.running_var = np.ones(c, dtype=dt)
        self.momentum, self.eps = momentum, eps
        # (count, sum, sum of squares) while population statistics are being collected
        self._calibration: list | None = None

    def forward(self, x: Tensor) -> Tensor:
        if self._calibration is not None:
            d = x.data.astype(np.float64).reshape(x.shape[0], -1)
            acc = self._calibration
            acc[0] += d.shape[1]
            acc[1] += d.sum(axis=1)
            acc[2] += (d * d).sum(axis=1)
        return T.norm_layer(x, "batch", self)

    def begin_calibration(self) -> None:
        c = self.weight.shape[0]
        self._calibration = [0, np.zeros(c), np.zeros(c)]

    def end_calibration(self) -> None:
        """Replace the running buffers with the pooled statistics seen since ``begin_calibration``."""
        n, s1, s2 = self._calibration
        self._calibration = None
        if n == 0:
            return
        mean = s1 / n
        var = np.maximum(s2 / n - mean * mean, 0.0) * (n / max(n - 1, 1))
        self.running_mean[...] = mean
        self.running_var[...] = var


def batch_norms(module: Module) -> list[BatchNorm2d]:
    return [m for _, m in module.named_modules() if isinstance(m, BatchNorm2d)]


def freeze_batch_norm(module: Module) -> Module:
    """Switch every batch-norm layer to its running statistics, leaving the rest in training mode."""
    for bn in batch_norms(module):
        bn.training = False
    return module


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        dt = T.get_default_dtype()
        self.weight = Parameter(np.ones(d, dtype=dt))
        self.bias = Parameter(np.zeros(d, dtype=dt))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.norm_layer(x, "layer", self)


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1, dilation: int = 1):
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=stride, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
