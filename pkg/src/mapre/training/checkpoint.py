"""Binary checkpoint container.

Layout::

    b"MAPRE\\x01"                      magic + format version byte
    uint32 LE  n                      length of the metadata block
    n bytes    UTF-8 JSON metadata    {"format_version", "config", "step", "params": [...]}
    float64 LE arrays                 in manifest order
    uint32 LE  CRC-32                 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MAPRE"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    format_version: int = FORMAT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    manifest = []
    offset = 0
    for name, arr in ckpt.arrays.items():
        n = int(np.asarray(arr).size)
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        offset += n * 8
    meta = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "params": manifest,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC + bytes([FORMAT_VERSION]))
    body += struct.pack("<I", len(meta_bytes))
    body += meta_bytes
    for arr in ckpt.arrays.values():
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    head = len(MAGIC) + 1
    if len(blob) < head:
        raise CheckpointTruncatedError("file ends inside the magic header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    if blob[len(MAGIC)] != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {blob[len(MAGIC)]} != supported {FORMAT_VERSION}")
    if len(blob) < head + 4:
        raise CheckpointTruncatedError("file ends before the metadata length")
    (n,) = struct.unpack_from("<I", blob, head)
    start = head + 4
    if len(blob) < start + n + 4:
        raise CheckpointTruncatedError("file ends inside the metadata block")
    crc_ok = zlib.crc32(blob[:-4]) & 0xFFFFFFFF == struct.unpack("<I", blob[-4:])[0]
    try:
        meta = json.loads(blob[start:start + n].decode("utf-8"))
        manifest = meta["params"]
        total = sum(8 * int(np.prod(p["shape"], dtype=np.int64)) for p in manifest)
    except (ValueError, KeyError, TypeError) as e:
        if not crc_ok:
            raise CheckpointChecksumError("metadata corrupt (checksum mismatch)") from None
        raise CheckpointFormatError(f"bad metadata: {e}") from None
    expected = start + n + total + 4
    if len(blob) < expected:
        raise CheckpointTruncatedError(f"file has {len(blob)} bytes, manifest needs {expected}")
    if len(blob) > expected:
        raise CheckpointFormatError(f"{len(blob) - expected} trailing bytes after checkpoint")
    if not crc_ok:
        raise CheckpointChecksumError("CRC-32 mismatch")
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"metadata format_version {meta.get('format_version')} != {FORMAT_VERSION}")
    base = start + n
    arrays = {}
    for p in manifest:
        shape = tuple(p["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = base + int(p["offset"])
        arrays[p["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
    return Checkpoint(arrays, meta.get("config", {}), int(meta.get("step", 0)), FORMAT_VERSION)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_from_model(model, step: int = 0, config: dict | None = None, optimizer=None) -> Checkpoint:
    """Snapshot a :class:`~mapre.training.model.MapREModel` (and optionally AdamW state)."""
    arrays = dict(model.state_arrays())
    meta = {"model": model.meta(), "run": config or {}}
    if optimizer is not None:
        st = optimizer.state
        meta["optimizer"] = {"step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2,
                             "eps": st.eps, "weight_decay": st.weight_decay}
        for name in sorted(st.m):
            arrays[f"opt.m.{name}"] = st.m[name]
            arrays[f"opt.v.{name}"] = st.v[name]
    return Checkpoint(arrays, meta, step)


def model_from_checkpoint(ckpt: Checkpoint, vocab):
    from mapre.training.model import MapREModel

    return MapREModel.from_state(ckpt.config["model"], ckpt.arrays, vocab)
