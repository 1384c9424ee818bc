"""Array container used for network checkpoints and replay-buffer dumps.

Layout::

    CBMCKPT <version>\\n
    <JSON manifest>\\n
    <raw little-endian float64 data, arrays concatenated in manifest order>

The manifest is ``{"meta": {...}, "arrays": [{"name": str, "shape": [int]}, ...]}``.
"""

from __future__ import annotations

import json
import os

import numpy as np

MAGIC = b"CBMCKPT"
VERSION = 1
_DTYPE = np.dtype("<f8")


def save_arrays(path: str | os.PathLike, arrays: dict, meta: dict | None = None) -> None:
    manifest = {
        "meta": meta or {},
        "arrays": [{"name": name, "shape": list(np.shape(a))} for name, a in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" " + str(VERSION).encode() + b"\n")
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())


def load_arrays(path: str | os.PathLike) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``; arrays keep their saved order."""
    with open(path, "rb") as fh:
        header = fh.readline().rstrip(b"\n")
        magic, _, version = header.partition(b" ")
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(version) != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {int(version)}")
        manifest = json.loads(fh.readline())
        payload = fh.read()
    arrays = {}
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _DTYPE.itemsize
        if offset + nbytes > len(payload):
            raise ValueError(f"{path}: truncated payload")
        arrays[entry["name"]] = np.frombuffer(
            payload, dtype=_DTYPE, count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes after payload")
    return arrays, manifest["meta"]


def mlp_arrays(prefix: str, mlp) -> dict:
    return {f"{prefix}/{name}": p for name, p in zip(mlp.param_names, mlp.params)}


def mlp_meta(mlp) -> dict:
    return {"sizes": mlp.sizes, "normalize": mlp.normalize, "tanh_output": mlp.tanh_output,
            "dtype": mlp.dtype.name}


def mlp_from_arrays(prefix: str, arrays: dict, meta: dict):
    from .nn import Mlp

    mlp = Mlp(meta["sizes"], None, meta["normalize"], meta["tanh_output"],
              meta.get("dtype", "float64"))
    for i in range(len(mlp.weights)):
        mlp.weights[i] = arrays[f"{prefix}/W{i}"].astype(mlp.dtype)
        mlp.biases[i] = arrays[f"{prefix}/b{i}"].astype(mlp.dtype)
    return mlp
