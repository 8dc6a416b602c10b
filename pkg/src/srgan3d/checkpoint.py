"""Binary archive of named arrays plus a JSON config echo.

Layout (all integers little-endian)::

    b"SRGC"  u32 version  u32 header_len  header (UTF-8 JSON)  payload

``header`` is ``{"config": {...}, "entries": [{"name", "shape"}, ...]}``.
The payload is every entry's values as little-endian float32, concatenated
in header order. Entry names and shapes mirror the network's state dict.
"""
from __future__ import annotations

import json
import os
import shutil
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"SRGC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_arrays(arrays, config=None) -> bytes:
    entries, chunks = [], []
    for name, a in arrays.items():
        a = np.asarray(a.detach().cpu().numpy() if hasattr(a, "detach") else a)
        entries.append({"name": name, "shape": list(a.shape)})
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    header = json.dumps({"config": config or {}, "entries": entries}, sort_keys=True).encode()
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header] + chunks)


def loads_arrays(raw: bytes):
    """Return ``(OrderedDict name -> float32 array, config)``."""
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen])
    off = 12 + hlen
    out = OrderedDict()
    for e in header["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if off + 4 * n > len(raw):
            raise CheckpointError(f"truncated payload at entry {e['name']}")
        out[e["name"]] = np.frombuffer(raw, "<f4", n, off).reshape(e["shape"]).astype(np.float32)
        off += 4 * n
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes")
    return out, header["config"]


def save_arrays(path, arrays, config=None) -> None:
    Path(path).write_bytes(dumps_arrays(arrays, config))


def load_arrays(path):
    return loads_arrays(Path(path).read_bytes())


def write_dir_atomic(final: Path, files: dict[str, bytes]) -> Path:
    """Write ``files`` into ``final`` via a temporary sibling and a rename."""
    final = Path(final)
    tmp = final.with_name(f".{final.name}.tmp{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        for name, data in files.items():
            (tmp / name).write_bytes(data)
        if final.exists():
            shutil.rmtree(final)
        os.rename(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final
