"""Binary checkpoint container (little-endian).

Layout: magic ``SYNCKPT1``, then two tensor groups (model, optimizer). Each
group is a u32 count followed by records of u32 name length, UTF-8 name,
u32 rank, u64 dims and f32 data.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SYNCKPT1"


def _write_group(f, tensors):
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_group(buf, off):
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off) if rank else ()
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    return out, off


def save_checkpoint(path, tensors, optimizer_state=None):
    with open(path, "wb") as f:
        f.write(MAGIC)
        _write_group(f, tensors)
        _write_group(f, optimizer_state or {})


def load_checkpoint(path):
    """Return (tensors, optimizer_state) as float32 arrays."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    try:
        tensors, off = _read_group(buf, 8)
        opt, off = _read_group(buf, off)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or malformed checkpoint") from exc
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return tensors, opt
