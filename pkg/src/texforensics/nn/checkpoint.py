"""Binary checkpoint container.

Layout (little-endian): magic ``TXCF``, format version u32, then one record
per tensor -- name length u32, UTF-8 name, rank u32, dims u64[rank], raw
float32 data -- and finally a CRC32 over everything before it.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpoint
from .model import ModelParams

MAGIC = b"TXCF"
VERSION = 1

_PARAM = "param/"
_STATE = "state/"
_ADAM_M = "adam.m/"
_ADAM_V = "adam.v/"
_ADAM_T = "adam.t"


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(params.tensors):
        parts.append(_record(_PARAM + name, params.tensors[name]))
    for name in sorted(params.state):
        parts.append(_record(_STATE + name, params.state[name]))
    for name in sorted(params.adam_m):
        parts.append(_record(_ADAM_M + name, params.adam_m[name]))
        parts.append(_record(_ADAM_V + name, params.adam_v[name]))
    # step count stored as two float32 halves so it stays exact past 2**24
    hi, lo = divmod(params.step, 1 << 16)
    parts.append(_record(_ADAM_T, np.array([hi, lo], dtype=np.float32)))
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def params_from_bytes(data: bytes) -> ModelParams:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptCheckpoint("not a TXCF checkpoint")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptCheckpoint("checkpoint CRC mismatch")
    (version,) = struct.unpack_from("<I", payload, 4)
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    params = ModelParams()
    pos = 8
    try:
        while pos < len(payload):
            (nlen,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", payload, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(payload):
                raise CorruptCheckpoint(f"truncated tensor {name}")
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
            if name.startswith(_PARAM):
                params.tensors[name[len(_PARAM):]] = arr
            elif name.startswith(_STATE):
                params.state[name[len(_STATE):]] = arr
            elif name.startswith(_ADAM_M):
                params.adam_m[name[len(_ADAM_M):]] = arr
            elif name.startswith(_ADAM_V):
                params.adam_v[name[len(_ADAM_V):]] = arr
            elif name == _ADAM_T:
                params.step = int(arr[0]) * (1 << 16) + int(arr[1])
            else:
                raise CorruptCheckpoint(f"unknown record {name!r}")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from exc
    return params


def save_checkpoint(path, params: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())


TENSOR_MAGIC = b"TXTD"


def tensor_dump_bytes(arr: np.ndarray) -> bytes:
    """Raw tensor dump: magic ``TXTD``, rank u32, dims u64[rank], float32 LE data."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def read_tensor_dump(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise CorruptCheckpoint("not a TXTD tensor dump")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}Q", data, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != offset + 4 * count:
        raise CorruptCheckpoint("tensor dump size does not match its header")
    return np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
