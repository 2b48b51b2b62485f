"""Named-tensor binary container (.grft).

Layout (all little-endian):
    magic   4 bytes  "GRFT"
    version u32
    count   u32
    per tensor:
        name_len u16, name UTF-8
        dtype    u8   (0 = f32, 1 = f64, 2 = i64)
        rank     u8
        dims     rank x u64
        data     raw little-endian payload

Tensor order is preserved, so read -> write round-trips byte-identically.
"""

import struct
from collections import OrderedDict

import numpy as np

from .errors import ContainerFormatError

MAGIC = b"GRFT"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("i", 8): 2}


def _dtype_code(arr):
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_FOR_KIND:
        raise ContainerFormatError(
            f"unsupported dtype {arr.dtype}; use f32, f64 or i64"
        )
    return _CODE_FOR_KIND[key]


def write_container(path, tensors):
    """Write an ordered name->array mapping to a container file."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ContainerFormatError("duplicate tensor names")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(names)))
        for name in names:
            arr = np.asarray(tensors[name])
            if arr.ndim and not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            code = _dtype_code(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_container(path):
    """Read a container file into an OrderedDict of arrays."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ContainerFormatError(f"bad magic in {path}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    offset = 12
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", data, offset)
        offset += 2
        if code not in _DTYPE_CODES:
            raise ContainerFormatError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", data, offset) if rank else ()
        offset += 8 * rank
        dtype = _DTYPE_CODES[code]
        n_items = int(np.prod(dims)) if rank else 1
        n_bytes = n_items * dtype.itemsize
        if offset + n_bytes > len(data):
            raise ContainerFormatError(f"truncated payload for {name!r}")
        arr = np.frombuffer(data[offset : offset + n_bytes], dtype=dtype).reshape(dims)
        offset += n_bytes
        if name in tensors:
            raise ContainerFormatError(f"duplicate tensor name {name!r}")
        tensors[name] = arr.copy()
    if offset != len(data):
        raise ContainerFormatError("trailing bytes after last tensor")
    return tensors
