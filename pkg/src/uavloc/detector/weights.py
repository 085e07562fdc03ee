"""Binary weights container.

Layout, all little-endian::

    magic     4 bytes  b"UAVW"
    version   u32      1
    count     u32      number of tensors
    per tensor:
        name_len u16, name (utf-8)
        ndim     u8,  shape (u32 * ndim)
        data     float32 * prod(shape)
"""

import struct

import numpy as np

MAGIC = b"UAVW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def dump_weights(state):
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_weights(data):
    data = bytes(data)
    if data[:4] != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise WeightsFormatError(f"unsupported weights version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(data):
                raise WeightsFormatError(f"tensor {name!r} truncated")
            out[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise WeightsFormatError(f"corrupt weights file: {exc}") from None
    if off != len(data):
        raise WeightsFormatError("trailing bytes after last tensor")
    return out
