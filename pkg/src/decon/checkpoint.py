"""Binary checkpoint container.

Layout: 8-byte magic ``DECON1\\0\\0``, little-endian u64 length followed by a
UTF-8 JSON metadata block, then named tensor records until EOF. Each record
is ``u32 name_len | name | u8 dtype code | u32 ndim | u64 dims... | raw LE data``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"DECON1\x00\x00"
VERSION = "DECON1"

_CODES = {torch.float32: (b"f", "<f4"), torch.float64: (b"d", "<f8"), torch.int64: (b"q", "<i8")}
_DECODE = {code: (dtype, np_dtype) for dtype, (code, np_dtype) in _CODES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointBundle:
    meta: dict[str, Any]
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)


def write_checkpoint(bundle: CheckpointBundle, path: str | Path) -> None:
    path = Path(path)
    meta = json.dumps(bundle.meta, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<Q", len(meta)), meta]
    for name, tensor in bundle.tensors.items():
        tensor = tensor.detach().cpu().contiguous()
        try:
            code, np_dtype = _CODES[tensor.dtype]
        except KeyError:
            raise CheckpointError(f"unsupported tensor dtype {tensor.dtype} for {name}") from None
        raw_name = name.encode()
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(code)
        chunks.append(struct.pack("<I", tensor.dim()))
        chunks.append(struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
        chunks.append(tensor.numpy().astype(np_dtype, copy=False).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(b"".join(chunks))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad version header (expected {VERSION})")
    try:
        (meta_len,) = struct.unpack_from("<Q", data, 8)
        meta = json.loads(data[16:16 + meta_len].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata block: {exc}") from exc
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {meta.get('version')!r} != {VERSION}")
    tensors = {}
    pos = 16 + meta_len
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode()
            pos += name_len
            code = data[pos:pos + 1]
            pos += 1
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            dtype, np_dtype = _DECODE[code]
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            nbytes = n * np.dtype(np_dtype).itemsize
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated record {name}")
            arr = np.frombuffer(data, dtype=np_dtype, count=n, offset=pos).reshape(shape)
            tensors[name] = torch.from_numpy(arr.copy()).to(dtype)
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt tensor records: {exc}") from exc
    return CheckpointBundle(meta, tensors)
