"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes   b"BBFCKPT\\0"
    version   u32
    length    u64       byte length of the JSON manifest
    manifest  UTF-8 JSON (sorted keys)
    payload   raw little-endian tensor bytes, concatenated in manifest order

The manifest holds ``meta`` (config, stage, step, ...) and ``tensors``: a
list of ``{name, dtype, shape, offset, nbytes}`` with offsets into the
payload. Parameter tensors are named ``param/<name>``, optimizer state
``optim/<kind>/<name>``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Module

MAGIC = b"BBFCKPT\0"
VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the model."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    optim: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage(self) -> str | None:
        return self.meta.get("stage")

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _dtype_tag(a: np.ndarray) -> str:
    tag = a.dtype.newbyteorder("<").str
    if tag not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {a.dtype}")
    return tag


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    items = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    items += [(f"optim/{k}", v) for k, v in sorted(ckpt.optim.items())]
    for name, arr in items:
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(tag)).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": ckpt.meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(manifest)) + manifest + b"".join(chunks)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    version, length = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        manifest = json.loads(buf[20 : 20 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    payload = memoryview(buf)[20 + length :]
    params, optim = {}, {}
    for e in manifest["tensors"]:
        if e["dtype"] not in _DTYPES or e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"corrupt entry {e['name']}")
        arr = np.frombuffer(payload[e["offset"] : e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arr = arr.reshape(e["shape"]).copy()
        kind, name = e["name"].split("/", 1)
        (params if kind == "param" else optim)[name] = arr
    return Checkpoint(params, manifest["meta"], optim)


def save(path, ckpt: Checkpoint) -> str:
    """Write atomically; returns the sha256 of the file bytes."""
    data = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_of(module: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in module.named_parameters()}


@dataclass
class LoadReport:
    loaded: list[str]
    fresh: list[str]
    ignored: list[str]


def load_into(module: Module, params: dict[str, np.ndarray], fresh_ok: tuple[str, ...] = (), ignore_ok: tuple[str, ...] = ()) -> LoadReport:
    """Copy matching tensors into ``module``.

    Model names absent from ``params`` must start with one of ``fresh_ok``
    (they keep their random init); checkpoint names absent from the model
    must start with one of ``ignore_ok``. Shape mismatches are always errors.
    """
    own = dict(module.named_parameters())
    fresh = sorted(n for n in own if n not in params)
    ignored = sorted(n for n in params if n not in own)
    bad_fresh = [n for n in fresh if not n.startswith(fresh_ok)] if fresh_ok else fresh
    bad_extra = [n for n in ignored if not n.startswith(ignore_ok)] if ignore_ok else ignored
    if bad_fresh:
        raise CheckpointError(f"checkpoint lacks {len(bad_fresh)} parameters, e.g. {bad_fresh[:3]}")
    if bad_extra:
        raise CheckpointError(f"checkpoint has {len(bad_extra)} unknown parameters, e.g. {bad_extra[:3]}")
    loaded = []
    for name, p in own.items():
        if name not in params:
            continue
        src = params[name]
        if tuple(src.shape) != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {tuple(src.shape)} vs model {p.shape}")
        p.data = src.astype(p.dtype).copy()
        loaded.append(name)
    return LoadReport(sorted(loaded), fresh, ignored)
