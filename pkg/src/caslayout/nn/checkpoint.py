"""Binary checkpoint format.

Layout: magic ``CLCK``, u32 version, then records until EOF.  Each record is
u32 name length, utf-8 name, u8 dtype tag, u32 rank, rank x u32 dims and the
little-endian payload.  JSON metadata travels as a uint8 record.
"""
from __future__ import annotations

import io
import json
import struct
from typing import Mapping

import numpy as np
import torch

MAGIC = b"CLCK"
VERSION = 1
META_KEY = "__meta__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, torch.Tensor], meta: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    items = list(tensors.items())
    if meta is not None:
        payload = json.dumps(meta, sort_keys=True).encode()
        items.append((META_KEY, torch.tensor(list(payload), dtype=torch.uint8)))
    for name, t in items:
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TAGS:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        tag = _TAGS[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", tag, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(_DTYPES[tag], copy=False).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, torch.Tensor], dict | None]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    tensors, meta = {}, None
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode()
            pos += n
            tag, rank = struct.unpack_from("<BI", data, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            dt = _DTYPES[tag]
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(dims).copy()
            pos += count * dt.itemsize
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode())
            else:
                tensors[name] = torch.from_numpy(arr)
    except (struct.error, KeyError, ValueError) as err:
        raise CheckpointError(f"truncated or corrupt checkpoint: {err}") from None
    return tensors, meta


def save(path, tensors, meta=None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
