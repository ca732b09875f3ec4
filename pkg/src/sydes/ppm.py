"""Minimal binary PPM (P6) reader/writer.

Pixels are exchanged as float arrays in [0, 1] of shape [H, W, 3]; files use
8-bit channels (maxval 255).  This is the only image codec in the package.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields: list[bytes] = []
    pos = 0
    # Header: magic, width, height, maxval; '#' comments run to end of line.
    while len(fields) < 4:
        if pos >= len(raw):
            raise DataError(f"{path}: truncated PPM header")
        c = raw[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            pos = raw.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace():
                end += 1
            fields.append(raw[pos:end])
            pos = end
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    width, height, maxval = (int(v) for v in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    n = width * height * 3
    body = raw[pos:pos + n]
    if len(body) != n:
        raise DataError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return img.astype(np.float64) / 255.0


def write_ppm(path: str, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"write_ppm expects [H, W, 3], got {image.shape}")
    h, w = image.shape[:2]
    bytes_ = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(bytes_.tobytes())
