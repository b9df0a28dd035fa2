"""Binary PGM (P5) and PPM (P6) reading and writing, 8 bits per sample."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    """Malformed or unsupported PGM/PPM content."""


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != magic:
        raise NetpbmError(f"{path}: expected {magic.decode()} file, found {fields[0]!r}")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise NetpbmError(f"{path}: non-numeric header field") from None
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 is supported, found {maxval}")
    n = w * h * channels
    if len(raw) - pos < n:
        raise NetpbmError(f"{path}: raster has {len(raw) - pos} bytes, expected {n}")
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def write_pgm_mask(path, mask: np.ndarray) -> None:
    """Binary mask to PGM: 0 stays 0, anything nonzero becomes 255."""
    _write(path, b"P5", np.where(np.asarray(mask) != 0, 255, 0))


def read_pgm_mask(path) -> np.ndarray:
    return (_read(path, b"P5", 1) != 0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an HxWx3 array, got {image.shape}")
    _write(path, b"P6", image)


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)
