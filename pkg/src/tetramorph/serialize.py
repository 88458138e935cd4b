"""Binary parameter files.

Layout (little-endian throughout): magic ``MCM1``, then one record per
field until EOF. Record: u32 name length, UTF-8 name bytes, u8 dtype tag,
u8 ndim, u32 per dim, raw payload. Dtype tags: 0 = float32, 1 = float64,
2 = int64, 3 = uint8, 4 = uint64.

Field order is preserved on round trip, so writing the same dict twice
produces byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MCM1"

_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.uint64): 4,
}
_DTYPES = {v: k for k, v in _TAGS.items()}


class FormatError(ValueError):
    """Raised on malformed parameter files."""


def write_fields(path, fields):
    """Write an ordered ``{name: ndarray}`` mapping."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in fields.items():
            arr = np.asarray(arr)  # 0-dim stays 0-dim
            if arr.dtype not in _TAGS:
                raise FormatError(f"unsupported dtype {arr.dtype} for field {name!r}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C"))


def read_fields(path):
    """Read back ``{name: ndarray}`` in file order."""
    fields = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: bad magic, not a parameter file")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError(f"{path}: truncated record header")
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            if tag not in _DTYPES:
                raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            dt = _DTYPES[tag].newbyteorder("<")
            count = int(np.prod(dims)) if ndim else 1
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise FormatError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype=dt).reshape(dims)
            fields[name] = arr.astype(_DTYPES[tag]) if ndim else arr.astype(_DTYPES[tag]).reshape(())
    return fields
