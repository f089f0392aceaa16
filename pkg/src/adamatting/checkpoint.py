"""Checkpoint files: a JSON manifest followed by one flat little-endian float32 blob.

Layout::

    b"ADAMCKPT"  | u64 little-endian manifest length | manifest (UTF-8 JSON) | blob

The manifest records the format version, the model config, and for every
tensor its name, shape and byte offset into the blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .io import atomic_write
from .model import MattingModel, ModelConfig

MAGIC = b"ADAMCKPT"
FORMAT_VERSION = 1


def encode_checkpoint(model: MattingModel, extra: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in model.state().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {"format_version": FORMAT_VERSION, "config": model.cfg.to_dict(),
                "tensors": entries, "blob_bytes": offset, "extra": extra or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(model: MattingModel, path, extra: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(model, extra))


def read_manifest(raw: bytes) -> tuple[dict, memoryview]:
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    start = len(MAGIC) + 8
    if len(raw) < start:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw[len(MAGIC):start])
    if len(raw) < start + n:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    blob = memoryview(raw)[start + n:]
    if len(blob) != manifest.get("blob_bytes"):
        raise CheckpointError(f"truncated blob: {len(blob)} of {manifest.get('blob_bytes')} bytes")
    return manifest, blob


def decode_state(manifest: dict, blob: memoryview) -> dict[str, np.ndarray]:
    state = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if e["offset"] + 4 * count > len(blob):
            raise CheckpointError(f"tensor {e['name']} runs past the end of the blob")
        state[e["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]) \
            .astype(np.float32).reshape(shape)
    return state


def load_into(model: MattingModel, path) -> dict:
    """Load weights into an existing model; returns the manifest."""
    manifest, blob = read_manifest(Path(path).read_bytes())
    try:
        model.load_state(decode_state(manifest, blob))
    except KeyError as exc:
        raise CheckpointError(exc.args[0]) from None
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return manifest


def load_checkpoint(path) -> tuple[MattingModel, dict]:
    """Rebuild the model from the config echoed in the manifest and load its weights."""
    manifest, _ = read_manifest(Path(path).read_bytes())
    model = MattingModel(ModelConfig.from_dict(manifest["config"]))
    load_into(model, path)
    return model, manifest
