"""Binary checkpoint container for training state.

Layout, all little-endian:

    magic    4 bytes  b"TSA1"
    version  u32      (currently 1)
    config   u64 byte length + UTF-8 config echo text
    tensors  repeated records until 4 bytes before end of file:
                 u16 name byte length + name bytes
                 u8  dtype code (see DTYPE_CODES)
                 u32 rank
                 u64 dims[rank]
                 raw array data, C order
    crc32    u32 over every byte before it

The config echo is stored verbatim so a checkpoint is self-describing
without the run directory it came from.
"""

import os
import struct
import zlib

import numpy as np

MAGIC = b"TSA1"
VERSION = 1

# dtype code -> little-endian numpy dtype string
DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<u8", 3: "<i8"}
_CODE_OF = {np.dtype(v): k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _code_for(arr):
    try:
        return _CODE_OF[arr.dtype.newbyteorder("<")]
    except KeyError:
        raise CheckpointError(
            f"checkpoint: unsupported dtype {arr.dtype} (supported: "
            f"{sorted(str(np.dtype(v)) for v in DTYPE_CODES.values())})")


def save_checkpoint(path, config_text, tensors):
    """Write `tensors` (name -> ndarray) plus the config echo to `path`.

    The write is atomic: data goes to a sibling temp file which is
    renamed over the target, so an interrupted save never leaves a
    truncated checkpoint behind.
    """
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg_bytes = config_text.encode("utf-8")
    parts.append(struct.pack("<Q", len(cfg_bytes)))
    parts.append(cfg_bytes)
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = _code_for(arr)
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise CheckpointError(f"checkpoint: tensor name too long ({len(name_bytes)} bytes)")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(DTYPE_CODES[code], copy=False).tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint (reading {what} at offset {self.off})")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint; returns (config_text, dict of name -> ndarray)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < len(MAGIC) + 4 + 8 + 4:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(buf)} bytes)")
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    actual_crc = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"{path}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})")
    r = _Reader(buf[:-4], path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<Q", "config length")
    config_text = r.take(cfg_len, "config text").decode("utf-8")
    tensors = {}
    while r.off < len(r.buf):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        code, rank = r.unpack("<BI", "tensor header")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", "tensor dims")
        dt = np.dtype(DTYPE_CODES[code])
        count = 1
        for d in dims:
            count *= d
        raw = r.take(count * dt.itemsize, f"tensor {name!r} data")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    return config_text, tensors
