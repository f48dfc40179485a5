"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"XPATHCK\\0"
    version    u32
    header_len u32, header: UTF-8 JSON {"spec": ..., "input_mean": ..., "input_std": ...}
    count      u32
    count x record:
        name_len u16, name (UTF-8)
        dtype    u8   (4 = float32, 8 = float64)
        ndim     u8, dims u32 * ndim
        payload  little-endian floats, row-major
    crc32      u32 over everything above

Loading parses and validates the whole file before building a model, so a
truncated or corrupted file never yields a partial model.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .models import ModelGraph, ModelSpec, build_from_spec

MAGIC = b"XPATHCK\0"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def save_checkpoint(graph: ModelGraph, path, extra: dict | None = None) -> None:
    header = {
        "spec": graph.spec.to_dict(),
        "input_mean": None if graph.input_mean is None else [float(v) for v in graph.input_mean],
        "input_std": None if graph.input_std is None else [float(v) for v in graph.input_std],
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<I", len(graph.params)))
    for name, t in graph.params.items():
        nb = name.encode("utf-8")
        code = t.dtype.itemsize
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, {name: array}) without building a model."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic or too short)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version = struct.unpack_from("<I", data, len(MAGIC))[0]
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        off = len(MAGIC) + 4
        (hlen,) = struct.unpack_from("<I", body, off)
        off += 4
        header = json.loads(body[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(body):
                raise CheckpointCorruptError(f"{path}: payload of {name} runs past end of file")
            arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
        if off != len(body):
            raise CheckpointCorruptError(f"{path}: {len(body) - off} trailing bytes")
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: malformed checkpoint ({exc})") from exc
    return header, arrays


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> ModelGraph:
    """Load a model. With ``expected_spec`` the parameters must fit that spec."""
    header, arrays = read_checkpoint(path)
    spec = ModelSpec.from_dict(header["spec"])
    target = expected_spec or spec
    graph = build_from_spec(target)
    for name, t in graph.params.items():
        if name not in arrays:
            raise CheckpointMismatchError(f"parameter {name} missing from checkpoint {path}")
        if arrays[name].shape != t.shape:
            raise CheckpointMismatchError(
                f"parameter {name}: checkpoint shape {arrays[name].shape} does not match model shape {t.shape}")
    for name in arrays:
        if name not in graph.params:
            raise CheckpointMismatchError(f"checkpoint parameter {name} has no counterpart in the model")
    for name, t in graph.params.items():
        t.data = arrays[name].astype(t.dtype, copy=False)
    if header.get("input_mean") is not None:
        graph.input_mean = np.asarray(header["input_mean"], dtype=np.float64)
        graph.input_std = np.asarray(header["input_std"], dtype=np.float64)
    return graph
