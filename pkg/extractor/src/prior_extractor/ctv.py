"""Reader for the CTV raster container.

Layout: magic "CTV1", u32 LE height, u32 LE width, then H*W float32 LE pixel
values in Hounsfield Units, row-major.  This module implements the format
contract directly; the extractor does not depend on the denoiser package.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CTV_MAGIC = b"CTV1"
_MAX_EXTENT = 1 << 20
_MAX_PIXELS = 1 << 26


class CtvFormatError(ValueError):
    pass


def read_ctv(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise CtvFormatError(f"{path}: truncated header")
    if raw[:4] != CTV_MAGIC:
        raise CtvFormatError(f"{path}: bad magic {raw[:4]!r}")
    h, w = struct.unpack("<II", raw[4:12])
    if not (0 < h <= _MAX_EXTENT and 0 < w <= _MAX_EXTENT) or h * w > _MAX_PIXELS:
        raise CtvFormatError(f"{path}: dimension overflow ({h}x{w})")
    expected = 12 + 4 * h * w
    if len(raw) != expected:
        raise CtvFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w).astype(np.float64)
