"""TGCK parameter checkpoints.

Layout (little-endian): magic ``TGCK``, u32 version, u32 parameter count,
then per parameter: u32 name length, UTF-8 name, u32 rank, u32 extents,
float64 values in row-major order.
"""

import struct

import numpy as np

MAGIC = b"TGCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, named_arrays):
    """Write a mapping of name -> array (or Tensor). Order is preserved."""
    items = list(named_arrays.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path, prefix=None):
    """Read a checkpoint into an ordered dict of float64 arrays.

    With ``prefix`` only names starting with it are returned.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("bad magic, not a TGCK checkpoint")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointFormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported TGCK version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = read("<I")
        if pos + nlen > len(buf):
            raise CheckpointFormatError("truncated checkpoint")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<I")
        shape = read(f"<{rank}I") if rank else ()
        n = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * n
        if pos + nbytes > len(buf):
            raise CheckpointFormatError("truncated checkpoint")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
        if prefix is None or name.startswith(prefix):
            out[name] = arr
    return out
