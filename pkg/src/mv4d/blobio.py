"""Binary container for named arrays, plus PPM image dumps.

Layout (all integers little-endian):

    magic   4 bytes  b"MV4D"
    version u32      1
    then, repeated until EOF:
        name_len u32
        name     UTF-8 bytes
        dtype    u8   (see _DTYPE_CODES)
        rank     u8
        extents  rank * u64
        data     raw C-order array bytes

Used both for generated clips and for training checkpoints.  Writing is
deterministic: same dict of arrays, same bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MV4D"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class BlobError(ValueError):
    pass


def write_blob(path, arrays):
    """Write an ordered mapping of name -> ndarray."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if not arr.flags.c_contiguous:  # ascontiguousarray would flatten 0-d
                arr = arr.copy(order="C")
            if arr.dtype not in _DTYPE_CODES:
                raise BlobError(f"unsupported dtype {arr.dtype} for entry {name!r}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_blob(path):
    """Read back a dict of name -> ndarray, in file order."""
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) < 8 or header[:4] != MAGIC:
            raise BlobError(f"{path}: not a blob file (bad magic)")
        (version,) = struct.unpack("<I", header[4:])
        if version != VERSION:
            raise BlobError(f"{path}: unsupported version {version}")
        out = {}
        while True:
            raw = f.read(4)
            if not raw:
                break
            if len(raw) < 4:
                raise BlobError(f"{path}: truncated entry header")
            (name_len,) = struct.unpack("<I", raw)
            name = f.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", f.read(2))
            if code not in _CODE_DTYPES:
                raise BlobError(f"{path}: unknown dtype code {code} for {name!r}")
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
            dtype = _CODE_DTYPES[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = f.read(n_bytes)
            if len(data) < n_bytes:
                raise BlobError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
        return out


def write_ppm(path, image):
    """Dump an (H, W, 3) image as binary PPM.  Floats are treated as [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {img.shape}")
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()
