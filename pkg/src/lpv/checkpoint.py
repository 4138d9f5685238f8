"""Binary checkpoint format.

Layout (little-endian): magic ``LPV1``, u32 tensor count, then per tensor
u32 name length, UTF-8 name, u32 rank, u32 dims[rank], float32 data in
row-major order. Tensors are written in the model's registration order.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LPV1"


class CheckpointError(ValueError):
    pass


def encode_state(named):
    parts = [MAGIC, struct.pack("<I", len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_state(buf, source="<bytes>"):
    """Parse checkpoint bytes into an ordered list of (name, float32 array)."""
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        out.append((name, arr))
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(model, path):
    data = encode_state([(n, p.data) for n, p in model.named_parameters()])
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(model, path):
    """Load parameters into ``model`` in place and return it."""
    with open(path, "rb") as fh:
        buf = fh.read()
    state = decode_state(buf, path)
    params = dict(model.named_parameters())
    seen = set()
    for name, arr in state:
        p = params.get(name)
        if p is None:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if p.shape != arr.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {arr.shape}, model expects {p.shape}")
        seen.add(name)
    missing = [n for n in params if n not in seen]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:5]}")
    for name, arr in state:
        params[name].data = arr.astype(params[name].dtype)
    return model
