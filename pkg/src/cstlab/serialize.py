"""Tensor and checkpoint serialization.

Wire format for a single tensor: little-endian uint32 rank, uint32 shape
entries, then the flat float32 data.  A checkpoint is a plain-text
manifest (one ``name<TAB>shape<TAB>trainable`` line per parameter, a
``---`` separator) followed by the tensor records in manifest order.
Used for model checkpoints and golden files.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .engine import Parameter

MANIFEST_END = b"---\n"


def write_tensor(fh, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    shape = np.asarray(arr.shape, dtype="<u4")
    fh.write(np.asarray([arr.ndim], dtype="<u4").tobytes())
    fh.write(shape.tobytes())
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    rank = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
    shape = tuple(np.frombuffer(fh.read(4 * rank), dtype="<u4").tolist())
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").copy()
    return data.reshape(shape)


def dumps_tensor(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def loads_tensor(payload: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(payload))


def save_checkpoint(path, params: list[Parameter]) -> None:
    """Write parameters with a text manifest header."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in checkpoint")
    with open(path, "wb") as fh:
        for p in params:
            shape = ",".join(str(d) for d in p.data.shape)
            flag = "1" if p.trainable else "0"
            fh.write(f"{p.name}\t{shape}\t{flag}\n".encode())
        fh.write(MANIFEST_END)
        for p in params:
            write_tensor(fh, p.data)


def load_checkpoint(path) -> list[Parameter]:
    """Read a checkpoint back into Parameter objects."""
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(MANIFEST_END)
    entries = []
    for line in head.decode().splitlines():
        name, shape_s, flag = line.split("\t")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        entries.append((name, shape, flag == "1"))
    fh = io.BytesIO(body)
    params = []
    for name, shape, trainable in entries:
        arr = read_tensor(fh)
        if arr.shape != shape:
            raise ValueError(
                f"checkpoint corrupt: {name} manifest shape {shape} != "
                f"payload shape {arr.shape}")
        params.append(Parameter(name, arr, trainable))
    return params
