"""Checkpoint format: a text manifest plus one flat little-endian f32 blob.

Manifest lines are `name dtype dim0,dim1,...`; the blob concatenates tensors
in manifest order. Loaders validate the total byte length.
"""

from __future__ import annotations

import os

import numpy as np

from .tensor import Tensor

MANIFEST_SUFFIX = ".manifest"
BLOB_SUFFIX = ".bin"


def save_checkpoint(prefix: str, tensors: dict[str, Tensor | np.ndarray]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    lines = []
    blobs = []
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float32)
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "1"
        lines.append(f"{name} f32 {shape}")
        blobs.append(arr.astype("<f4").tobytes(order="C"))
    with open(prefix + MANIFEST_SUFFIX, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    with open(prefix + BLOB_SUFFIX, "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(prefix: str) -> dict[str, np.ndarray]:
    with open(prefix + MANIFEST_SUFFIX) as f:
        entries = []
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, dtype, shape_s = line.split()
            if dtype != "f32":
                raise ValueError(f"unsupported dtype {dtype!r} for {name}")
            shape = tuple(int(s) for s in shape_s.split(","))
            entries.append((name, shape))

    expected = sum(int(np.prod(shape)) * 4 for _, shape in entries)
    blob = open(prefix + BLOB_SUFFIX, "rb").read()
    if len(blob) != expected:
        raise ValueError(f"blob length {len(blob)} does not match manifest total {expected}")

    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in entries:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[name] = arr.astype(np.float32)
        offset += count * 4
    return out
