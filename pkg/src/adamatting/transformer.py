"""Fg/Bg structuring transformer.

The current frame's coarse features act as queries against a memory of Keys
and Fg/Bg-embedded Values from earlier frames. Two attention paths read the
memory: a dense path over every position of every long-term entry, and a
local path restricted to an ω×ω spatial window in the most recent
short-term entries. Their outputs are summed.

Feature maps are hidden×h×w throughout; attention works on (h·w)×hidden
token matrices internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, StateError
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import Tensor

AttentionMode = Literal["both", "short_only", "long_only"]
UpdateMode = Literal["mask", "alpha", "none"]
LongRead = Literal["every_frame", "every_l"]


@dataclass(frozen=True)
class AblationConfig:
    """Which attention paths feed the fusion and what drives the Value embedding."""

    attention: AttentionMode = "both"
    update: UpdateMode = "mask"

    def __post_init__(self):
        if self.attention not in ("both", "short_only", "long_only"):
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        if self.update not in ("mask", "alpha", "none"):
            raise ConfigError(f"unknown update mode {self.update!r}")


def ablation_config(mode: str = "both", update: str = "mask") -> AblationConfig:
    aliases = {"short": "short_only", "long": "long_only"}
    return AblationConfig(aliases.get(mode, mode), update)


@dataclass
class QKV:
    q: Tensor
    k: Tensor
    v: Tensor


@dataclass
class MemoryBank:
    """FIFO Key/Value stores with a sparse long-term and a dense short-term compartment.

    Every write lands in the short-term compartment; only every
    ``write_stride``-th frame also lands in the long-term one. Entries are kept
    oldest first and eviction always drops index 0.
    """

    long_capacity: int = 10
    short_capacity: int = 1
    write_stride: int = 10
    long_keys: list = field(default_factory=list)
    long_values: list = field(default_factory=list)
    long_frames: list = field(default_factory=list)
    short_keys: list = field(default_factory=list)
    short_values: list = field(default_factory=list)
    short_frames: list = field(default_factory=list)
    frame_counter: int = 0

    def __post_init__(self):
        if min(self.long_capacity, self.short_capacity, self.write_stride) < 1:
            raise ConfigError("memory capacities and write stride must be positive")

    def _check(self, k: Tensor, v: Tensor) -> None:
        if k.shape != v.shape:
            raise DimensionError(f"key {k.shape} and value {v.shape} disagree")
        ref = self.short_keys[-1] if self.short_keys else None
        if ref is not None and ref.shape != k.shape:
            raise DimensionError(f"memory entries are {ref.shape}, got {k.shape}")

    def write(self, k: Tensor, v: Tensor) -> "MemoryBank":
        self._check(k, v)
        t = self.frame_counter
        self.short_keys.append(k)
        self.short_values.append(v)
        self.short_frames.append(t)
        while len(self.short_keys) > self.short_capacity:
            del self.short_keys[0], self.short_values[0], self.short_frames[0]
        if t % self.write_stride == 0:
            self.long_keys.append(k)
            self.long_values.append(v)
            self.long_frames.append(t)
            while len(self.long_keys) > self.long_capacity:
                del self.long_keys[0], self.long_values[0], self.long_frames[0]
        self.frame_counter += 1
        return self

    def replace_newest(self, k: Tensor, v: Tensor) -> "MemoryBank":
        """Overwrite the most recent frame's entry in whichever compartments hold it."""
        self._check(k, v)
        if not self.short_frames:
            raise StateError("nothing to replace in an empty memory")
        t = self.short_frames[-1]
        self.short_keys[-1], self.short_values[-1] = k, v
        if self.long_frames and self.long_frames[-1] == t:
            self.long_keys[-1], self.long_values[-1] = k, v
        return self

    def detach(self) -> "MemoryBank":
        """Cut every stored entry off the gradient tape (truncated backprop boundary)."""
        for store in (self.long_keys, self.long_values, self.short_keys, self.short_values):
            store[:] = [t.detach() for t in store]
        return self

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.long_capacity, self.short_capacity, self.write_stride,
                          list(self.long_keys), list(self.long_values), list(self.long_frames),
                          list(self.short_keys), list(self.short_values), list(self.short_frames),
                          self.frame_counter)


def memory_write(bank: MemoryBank, k: Tensor, v_fb: Tensor) -> MemoryBank:
    return bank.write(k, v_fb)


class FgBgEmbeddings(Module):
    def __init__(self, hidden: int, rng: np.random.Generator):
        dt = T.get_default_dtype()
        self.e_f = Parameter(rng.normal(0.0, 0.5, hidden).astype(dt))
        self.e_b = Parameter(rng.normal(0.0, 0.5, hidden).astype(dt))


def project_qkv(z: Tensor, wq: Linear, wk: Linear, wv: Linear) -> QKV:
    """Three independent per-position linear maps of a hidden×h×w map."""
    if z.shape[0] != wq.weight.shape[0]:
        raise DimensionError(f"projection expects width {wq.weight.shape[0]}, got {z.shape[0]}")
    h, w = z.shape[1:]
    tok = T.tokens(z)
    return QKV(*(T.untokens(lin(tok), h, w) for lin in (wq, wk, wv)))


def embed_fgbg(v: Tensor, mask_d: Tensor, emb: FgBgEmbeddings) -> Tensor:
    """``v + m·E_f + (1 − m)·E_b`` with the mask broadcast over channels."""
    mask_d = T.as_tensor(mask_d, like=v)
    m = mask_d.data
    if m.ndim != 3 or m.shape[0] != 1 or m.shape[1:] != v.shape[1:]:
        raise DimensionError(f"mask {m.shape} does not match value map {v.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ContractError("Fg/Bg guidance must lie in [0, 1]")
    d = v.shape[0]
    ef = T.reshape(emb.e_f, (d, 1, 1))
    eb = T.reshape(emb.e_b, (d, 1, 1))
    return v + (mask_d * ef + (1.0 - mask_d) * eb)


def _split_heads(tok: Tensor, heads: int) -> Tensor:
    n, d = tok.shape
    return T.transpose(T.reshape(tok, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, heads * dh))


def dense_attention(q_tok: Tensor, k_tok: Tensor, v_tok: Tensor, heads: int = 1):
    """Multi-head softmax(QKᵀ/√d)V on token matrices; returns (output, weights)."""
    d = q_tok.shape[1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    qh = _split_heads(q_tok, heads)
    kh = T.transpose(_split_heads(k_tok, heads), (0, 2, 1))
    vh = _split_heads(v_tok, heads)
    scores = T.matmul(qh, kh) * (1.0 / math.sqrt(d // heads))
    weights = T.softmax(scores, axis=-1)
    return _merge_heads(T.matmul(weights, vh)), weights


def long_term_attention(q: Tensor, bank: MemoryBank, heads: int = 1, return_weights: bool = False):
    """Every query position attends to every position of every long-term entry."""
    if not bank.long_keys:
        raise StateError("long-term memory is empty")
    d, h, w = q.shape
    keys = T.concat([T.tokens(k) for k in bank.long_keys], axis=0)
    values = T.concat([T.tokens(v) for v in bank.long_values], axis=0)
    out, weights = dense_attention(T.tokens(q), keys, values, heads)
    out = T.untokens(out, h, w)
    return (out, weights) if return_weights else out


def short_term_attention(q: Tensor, bank: MemoryBank, omega: int = 7, s: int = 1, heads: int = 1,
                         return_weights: bool = False):
    """Attention restricted to an ω×ω×s tube around each query position.

    Window cells that fall outside the map are dropped from the softmax rather
    than padded.
    """
    if omega < 1 or omega % 2 == 0:
        raise ConfigError(f"short-term window must be odd, got {omega}")
    if not bank.short_keys:
        raise StateError("short-term memory is empty")
    d, h, w = q.shape
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    p = h * w
    gathered_k, gathered_v, masks = [], [], []
    for k, v in zip(bank.short_keys[-s:], bank.short_values[-s:]):
        if k.shape != q.shape:
            raise DimensionError(f"memory entry {k.shape} does not match query {q.shape}")
        gk, valid = T.window_gather(k, omega)
        gv, _ = T.window_gather(v, omega)
        gathered_k.append(gk)
        gathered_v.append(gv)
        masks.append(valid)
    keys = T.concat(gathered_k, axis=1)
    values = T.concat(gathered_v, axis=1)
    valid = np.concatenate(masks, axis=1)
    n = keys.shape[1]

    qh = T.transpose(T.reshape(T.tokens(q), (p, heads, 1, dh)), (1, 0, 2, 3))
    kh = T.transpose(T.reshape(keys, (p, n, heads, dh)), (2, 0, 3, 1))
    vh = T.transpose(T.reshape(values, (p, n, heads, dh)), (2, 0, 1, 3))
    scores = T.matmul(qh, kh) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1, mask=valid[None, :, None, :])
    out = T.matmul(weights, vh)
    out = T.reshape(T.transpose(out, (1, 0, 2, 3)), (p, d))
    out = T.untokens(out, h, w)
    return (out, weights) if return_weights else out


def fuse(zl: Tensor, zs: Tensor) -> Tensor:
    if zl.shape != zs.shape:
        raise DimensionError(f"cannot fuse {zl.shape} with {zs.shape}")
    return zl + zs


@dataclass(frozen=True)
class TransformerConfig:
    hidden: int = 64
    heads: int = 4
    layers: int = 3
    mlp_ratio: int = 2
    long_capacity: int = 10
    write_stride: int = 10
    short_len: int = 1
    window: int = 7
    long_read: LongRead = "every_frame"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.window % 2 == 0:
            raise ConfigError(f"short-term window must be odd, got {self.window}")
        if self.long_read not in ("every_frame", "every_l"):
            raise ConfigError(f"unknown long_read mode {self.long_read!r}")


class TransformerLayer(Module):
    """Pre-norm residual block: memory attention, then a two-layer GELU MLP."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        d = cfg.hidden
        self.cfg = cfg
        self.ln1 = LayerNorm(d)
        self.query = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, d * cfg.mlp_ratio, rng)
        self.fc2 = Linear(d * cfg.mlp_ratio, d, rng)

    def attend(self, q: Tensor, bank: MemoryBank, attention: str, read_long: bool) -> Tensor:
        cfg = self.cfg
        zl = zs = None
        if attention in ("both", "long_only") and read_long:
            zl = long_term_attention(q, bank, cfg.heads)
        if attention in ("both", "short_only"):
            zs = short_term_attention(q, bank, cfg.window, cfg.short_len, cfg.heads)
        if zl is None and zs is None:
            return T.zeros(q.shape, dtype=q.dtype)
        if zl is None:
            zl = T.zeros(q.shape, dtype=q.dtype)
        if zs is None:
            zs = T.zeros(q.shape, dtype=q.dtype)
        return fuse(zl, zs)

    def forward(self, z: Tensor, bank: MemoryBank, attention: str = "both", read_long: bool = True,
                q: Tensor | None = None) -> Tensor:
        d, h, w = z.shape
        if d != self.cfg.hidden:
            raise DimensionError(f"layer expects width {self.cfg.hidden}, got {d}")
        if q is None:
            q = T.untokens(self.query(self.ln1(T.tokens(z))), h, w)
        a = self.attend(q, bank, attention, read_long)
        tok = T.tokens(z) + self.out(T.tokens(a))
        tok = tok + self.fc2(T.gelu(self.fc1(self.ln2(tok))))
        return T.untokens(tok, h, w)


def transformer_layer(z: Tensor, bank: MemoryBank, layer: TransformerLayer, attention: str = "both",
                      read_long: bool = True) -> Tensor:
    return layer(z, bank, attention, read_long)


class FgBgTransformer(Module):
    """Stack of memory-attention layers plus the frame-level Key/Value projections.

    The first layer's normalised input yields the query for that layer and
    the Key/Value pair that is later embedded and stored for this frame.
    """

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [TransformerLayer(cfg, rng) for _ in range(cfg.layers)]
        self.key = Linear(cfg.hidden, cfg.hidden, rng)
        self.value = Linear(cfg.hidden, cfg.hidden, rng)
        self.embeddings = FgBgEmbeddings(cfg.hidden, rng)

    def new_bank(self) -> MemoryBank:
        c = self.cfg
        return MemoryBank(c.long_capacity, c.short_len, c.write_stride)

    def project(self, z: Tensor) -> QKV:
        first = self.layers[0]
        h, w = z.shape[1:]
        zn = T.untokens(first.ln1(T.tokens(z)), h, w)
        return project_qkv(zn, first.query, self.key, self.value)

    def forward(self, z: Tensor, bank: MemoryBank, frame_index: int = 0,
                attention: str = "both") -> tuple[Tensor, QKV]:
        qkv = self.project(z)
        read_long = self.cfg.long_read == "every_frame" or frame_index % self.cfg.write_stride == 0
        x = z
        for i, layer in enumerate(self.layers):
            x = layer(x, bank, attention, read_long, q=qkv.q if i == 0 else None)
        return x, qkv

    def embed(self, v: Tensor, mask_d: Tensor) -> Tensor:
        return embed_fgbg(v, mask_d, self.embeddings)
