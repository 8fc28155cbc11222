"""Binary checkpoint format.

Layout (little-endian)::

    b"DCNN" | u32 version | u32 meta_len | meta (UTF-8 JSON)
    record*  : u16 name_len | name | u8 dtype tag | u8 ndim | u32 dims[ndim] | raw data
    u32 CRC32 of everything before it

Record names are prefixed ``param/``, ``buffer/``, ``adam_m/``, ``adam_v/`` or
``center/``.  The whole file is parsed and verified before anything is handed
back, so a damaged file never leaves a model half-restored.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from dcnn.errors import CorruptCheckpointError, IncompatibleCheckpointError
from dcnn.layers import Module
from dcnn.training.losses import CenterLossState
from dcnn.training.optim import OptimizerState

MAGIC = b"DCNN"
FORMAT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<i8")}
TAG_OF = {np.dtype("<f4"): 1, np.dtype("<i8"): 2}


@dataclass
class Checkpoint:
    fingerprint: str
    epoch: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer: OptimizerState
    center: Optional[CenterLossState] = None
    rng_state: Optional[dict] = None
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = np.dtype("<i8") if np.issubdtype(arr.dtype, np.integer) else np.dtype("<f4")
    arr = np.ascontiguousarray(arr, dtype=dt)
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", TAG_OF[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(
    path,
    model: Module,
    fingerprint: str,
    epoch: int,
    optimizer: OptimizerState,
    center: Optional[CenterLossState] = None,
    rng_state: Optional[dict] = None,
    model_config: Optional[dict] = None,
    train_config: Optional[dict] = None,
) -> None:
    records = []
    for name, p in model.named_parameters():
        records.append(_encode_record("param/" + name, p.data))
    for name, b in model.named_buffers():
        records.append(_encode_record("buffer/" + name, b.data))
    for name in sorted(optimizer.m):
        records.append(_encode_record("adam_m/" + name, optimizer.m[name]))
        records.append(_encode_record("adam_v/" + name, optimizer.v[name]))
    if center is not None:
        records.append(_encode_record("center/centers", center.centers))
    meta: dict[str, Any] = {
        "fingerprint": fingerprint,
        "epoch": int(epoch),
        "optimizer_step": int(optimizer.step),
        "rng_state": rng_state,
        "model_config": model_config or {},
        "train_config": train_config or {},
        "records": len(records),
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta_raw)) + meta_raw + b"".join(records)
    blob = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    """Parse and verify ``path``; refuse it when the fingerprint differs from the expected one."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        if len(data) >= 4 and data[:4] != MAGIC:
            raise CorruptCheckpointError(f"{path}: bad magic {data[:4]!r}")
        raise CorruptCheckpointError(f"{path}: file too short ({len(data)} bytes)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body, path)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or damaged file)")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({exc})") from None
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise IncompatibleCheckpointError(
            f"{path}: config fingerprint {meta['fingerprint']} does not match expected {expected_fingerprint}"
        )
    arrays: dict[str, np.ndarray] = {}
    for _ in range(int(meta["records"])):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CorruptCheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = DTYPE_TAGS[tag]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        arrays[name] = arr.astype(np.float32 if tag == 1 else np.int64)
    if r.pos != len(body):
        raise CorruptCheckpointError(f"{path}: {len(body) - r.pos} trailing bytes")

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    opt = OptimizerState(int(meta["optimizer_step"]), group("adam_m/"), group("adam_v/"))
    center = CenterLossState(arrays["center/centers"]) if "center/centers" in arrays else None
    return Checkpoint(
        fingerprint=meta["fingerprint"],
        epoch=int(meta["epoch"]),
        params=group("param/"),
        buffers=group("buffer/"),
        optimizer=opt,
        center=center,
        rng_state=meta.get("rng_state"),
        model_config=meta.get("model_config", {}),
        train_config=meta.get("train_config", {}),
        version=version,
    )


def apply_checkpoint(ckpt: Checkpoint, model: Module) -> None:
    """Copy weights and buffers into ``model`` after checking every name and shape."""
    targets = {("param", n): t for n, t in model.named_parameters()}
    targets.update({("buffer", n): t for n, t in model.named_buffers()})
    sources = {("param", n): a for n, a in ckpt.params.items()}
    sources.update({("buffer", n): a for n, a in ckpt.buffers.items()})
    missing = sorted(f"{k}/{n}" for k, n in set(targets) - set(sources))
    extra = sorted(f"{k}/{n}" for k, n in set(sources) - set(targets))
    if missing or extra:
        raise IncompatibleCheckpointError(f"checkpoint/model mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
    for key, t in targets.items():
        if sources[key].shape != t.shape:
            raise IncompatibleCheckpointError(f"{key[0]}/{key[1]}: shape {sources[key].shape} != {t.shape}")
    for key, t in targets.items():
        t.data[...] = sources[key]
