"""On-disk formats: binary netpbm images, raw float32 mattes, sequence directories.

Every write goes to a temporary file in the destination directory and is then
renamed into place, so readers never see a partial file.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, FormatError, IndexGapError, MalformedHeaderError

MAXVAL = 255


def atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def quantize(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes with round-half-up: ⌊255·x + 0.5⌋."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * MAXVAL + 0.5).astype(np.uint8)


def dequantize(b: np.ndarray) -> np.ndarray:
    return (np.asarray(b, dtype=np.float32) / np.float32(MAXVAL)).astype(np.float32)


def encode_netpbm(img: np.ndarray) -> bytes:
    """uint8 H×W (P5) or H×W×3 (P6) to bytes."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        raise FormatError(f"netpbm encoder expects uint8, got {a.dtype}")
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot encode array of shape {a.shape} as netpbm")
    h, w = a.shape[:2]
    return magic + f"\n{w} {h}\n{MAXVAL}\n".encode("ascii") + np.ascontiguousarray(a).tobytes()


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_netpbm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse a binary P5/P6 image with maxval 255."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise MalformedHeaderError(f"{source}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"{source}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise MalformedHeaderError(f"{source}: non-numeric header field") from None
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"{source}: non-positive size {w}x{h}")
    if maxval != MAXVAL:
        raise MalformedHeaderError(f"{source}: maxval {maxval} is not {MAXVAL}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise MalformedHeaderError(f"{source}: missing separator after header")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    body = raw[pos:pos + n]
    if len(body) != n:
        raise MalformedHeaderError(f"{source}: expected {n} data bytes, found {len(body)}")
    a = np.frombuffer(body, dtype=np.uint8)
    return (a.reshape(h, w, 3) if channels == 3 else a.reshape(h, w)).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    """3×H×W float RGB in [0, 1] to binary P6."""
    atomic_write(path, encode_netpbm(quantize(np.moveaxis(np.asarray(rgb), 0, -1))))


def read_ppm(path) -> np.ndarray:
    a = decode_netpbm(Path(path).read_bytes(), str(path))
    if a.ndim != 3:
        raise MalformedHeaderError(f"{path}: expected a P6 colour image")
    return np.moveaxis(dequantize(a), -1, 0).copy()


def write_pgm(path, alpha: np.ndarray) -> None:
    """1×H×W or H×W float in [0, 1] to binary P5."""
    a = np.asarray(alpha)
    atomic_write(path, encode_netpbm(quantize(a[0] if a.ndim == 3 else a)))


def read_pgm(path) -> np.ndarray:
    """Binary P5 to a 1×H×W float32 array."""
    a = decode_netpbm(Path(path).read_bytes(), str(path))
    if a.ndim != 2:
        raise MalformedHeaderError(f"{path}: expected a P5 grey image")
    return dequantize(a)[None]


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_f32(path, alpha: np.ndarray) -> None:
    """Raw little-endian float32, row-major, with a ``<name>.json`` sidecar holding {h, w}."""
    path = Path(path)
    a = np.asarray(alpha, dtype=np.float32)
    if a.ndim == 3:
        a = a[0]
    h, w = a.shape
    atomic_write(path, a.astype("<f4").tobytes())
    atomic_write(_sidecar(path), json.dumps({"h": h, "w": w}).encode())


def read_f32(path) -> np.ndarray:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
        h, w = int(meta["h"]), int(meta["w"])
    except (OSError, ValueError, KeyError) as exc:
        raise MalformedHeaderError(f"{path}: unreadable sidecar ({exc})") from None
    raw = path.read_bytes()
    if len(raw) != 4 * h * w:
        raise DimensionMismatchError(f"{path}: {len(raw)} bytes does not match {h}x{w} float32")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(1, h, w)


def read_mask(path) -> np.ndarray:
    """Initial mask from a .pgm or .f32 file, 1×H×W float32."""
    path = Path(path)
    return read_f32(path) if path.suffix == ".f32" else read_pgm(path)


FRAME = "frame_{:05d}.ppm"
ALPHA = "alpha_{:05d}.pgm"
ALPHA_F32 = "alpha_{:05d}.f32"
MASK = "mask_00000.pgm"
META = "meta.json"


@dataclass
class Sequence:
    """In-memory form of a sequence directory. Alphas prefer the f32 files when present."""

    frames: list[np.ndarray] | None
    alphas: list[np.ndarray] | None
    mask: np.ndarray | None
    meta: dict


def _indices(root: Path, pattern: str) -> list[int]:
    prefix, suffix = pattern.split("{")[0], pattern.rsplit("}", 1)[1]
    rx = re.compile(re.escape(prefix) + r"(\d{5})" + re.escape(suffix) + "$")
    found = sorted(int(m.group(1)) for p in root.iterdir() if (m := rx.match(p.name)))
    if found and found != list(range(len(found))):
        missing = sorted(set(range(found[-1] + 1)) - set(found))
        raise IndexGapError(f"{root}: {pattern.split('_')[0]} indices are not contiguous from 0 "
                            f"(first missing {missing[0]})")
    return found


def write_sequence(root, frames=None, alphas=None, mask=None, meta: dict | None = None,
                   f32: bool = False) -> Path:
    """Write a sequence directory; pass only the parts you have."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    size = None
    for i, f in enumerate(frames or []):
        write_ppm(root / FRAME.format(i), f)
        size = np.shape(f)[-2:]
    for i, a in enumerate(alphas or []):
        write_pgm(root / ALPHA.format(i), a)
        if f32:
            write_f32(root / ALPHA_F32.format(i), a)
        size = np.shape(a)[-2:]
    if mask is not None:
        write_pgm(root / MASK, mask)
    info = {"size": list(map(int, size)) if size is not None else None, "fps": "synthetic"}
    info.update(meta or {})
    atomic_write(root / META, json.dumps(info, indent=1, sort_keys=True).encode())
    return root


def read_sequence(root, need_frames: bool = True, need_alphas: bool = False) -> Sequence:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {root}")
    meta = json.loads((root / META).read_text()) if (root / META).exists() else {}
    frame_idx = _indices(root, FRAME)
    alpha_idx = _indices(root, ALPHA)
    f32_idx = _indices(root, ALPHA_F32)
    if need_frames and not frame_idx:
        raise FormatError(f"{root}: no frames")
    if need_alphas and not (alpha_idx or f32_idx):
        raise FormatError(f"{root}: no alpha mattes")
    frames = [read_ppm(root / FRAME.format(i)) for i in frame_idx] or None
    if f32_idx:
        alphas = [read_f32(root / ALPHA_F32.format(i)) for i in f32_idx]
    else:
        alphas = [read_pgm(root / ALPHA.format(i)) for i in alpha_idx] or None
    mask = read_pgm(root / MASK) if (root / MASK).exists() else None
    shapes = {tuple(x.shape[-2:]) for x in (frames or []) + (alphas or [])}
    if mask is not None:
        shapes.add(tuple(mask.shape[-2:]))
    if len(shapes) > 1:
        raise DimensionMismatchError(f"{root}: inconsistent image sizes {sorted(shapes)}")
    if frames and alphas and len(frames) != len(alphas):
        raise DimensionMismatchError(f"{root}: {len(frames)} frames but {len(alphas)} alphas")
    return Sequence(frames, alphas, mask, meta)


def metrics_json(per_sequence: dict, aggregate, config: dict, build: str) -> bytes:
    """Serialise metric reports; a missing metric is written as null."""
    doc = {
        "aggregate": aggregate.to_dict(),
        "sequences": {k: v.to_dict() for k, v in per_sequence.items()},
        "config": config,
        "build": build,
    }
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False).encode()
