"""Binary Netpbm (P5 greymap / P6 pixmap) reading and writing.

Images are float arrays in [0, 1] shaped (H, W) or (H, W, 3); on disk they
are 8-bit samples with maxval 255. Conversion rounds half to even.
"""

from pathlib import Path

import numpy as np

_WHITESPACE = b" \t\n\r\v\f"


def _header(data: bytes):
    """Parse magic, width, height, maxval; return them and the raster offset."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos] in _WHITESPACE:
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated Netpbm header")
        fields.append(data[start:pos])
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ValueError("missing whitespace after maxval")
    magic = fields[0].decode("ascii", "replace")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError(f"bad Netpbm header fields {fields[1:]}") from None
    return magic, width, height, maxval, pos + 1


def decode(data: bytes) -> np.ndarray:
    """Raw uint8 samples: (H, W) for P5, (H, W, 3) for P6."""
    magic, width, height, maxval, off = _header(data)
    if magic not in ("P5", "P6"):
        raise ValueError(f"unsupported Netpbm type {magic!r}; only P5 and P6")
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise ValueError(f"unsupported geometry/maxval {width}x{height}/{maxval}")
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    raster = data[off:off + need]
    if len(raster) != need:
        raise ValueError(f"raster holds {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, np.uint8).reshape((height, width, channels) if channels == 3 else (height, width))
    if arr.max(initial=0) > maxval:
        raise ValueError("sample exceeds maxval")
    if maxval != 255:
        arr = np.rint(arr.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return arr.copy()


def encode(samples: np.ndarray) -> bytes:
    arr = np.asarray(samples)
    if arr.dtype != np.uint8:
        raise TypeError("encode expects uint8 samples; use to_uint8 first")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def to_uint8(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == bool:
        return arr.astype(np.uint8) * 255
    return np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)


def to_float(samples) -> np.ndarray:
    return np.asarray(samples, np.float64) / 255.0


def read_image(path) -> np.ndarray:
    return to_float(decode(Path(path).read_bytes()))


def write_image(path, img) -> None:
    Path(path).write_bytes(encode(to_uint8(img)))


def read_mask(path) -> np.ndarray:
    """Load a P5 mask; any non-zero sample is foreground."""
    arr = decode(Path(path).read_bytes())
    if arr.ndim != 2:
        raise ValueError(f"{path}: masks must be P5 greymaps")
    return arr > 0


def write_mask(path, mask) -> None:
    Path(path).write_bytes(encode(np.asarray(mask, bool).astype(np.uint8) * 255))
