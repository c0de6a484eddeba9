"""8-bit RGB image I/O (PNG via Pillow, PPM P6 fallback) and the
pixel <-> [-1, 1] normalization used throughout the codec."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def normalize(pixels: np.ndarray) -> np.ndarray:
    """uint8 (H,W,3) -> float (3,H,W) in [-1, 1] via v/127.5 - 1."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected (H,W,3) RGB pixels, got shape {arr.shape}")
    return (arr.astype(np.float64) / 127.5 - 1.0).transpose(2, 0, 1)


def denormalize(img: np.ndarray) -> np.ndarray:
    """float (3,H,W) -> uint8 (H,W,3), clamped, rounding halves away from
    zero."""
    v = (np.asarray(img, dtype=np.float64).transpose(1, 2, 0) + 1.0) * 127.5
    v = np.clip(v, 0.0, 255.0)
    return np.copysign(np.floor(np.abs(v) + 0.5), v).astype(np.uint8)


def read_image(path: str) -> np.ndarray:
    """Load an RGB image as float (3,H,W) in [-1, 1]."""
    if str(path).lower().endswith((".ppm", ".pnm")):
        return normalize(_read_ppm(path))
    from PIL import Image

    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return normalize(np.asarray(rgb))
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_image(path: str, img: np.ndarray) -> None:
    pixels = denormalize(img)
    if str(path).lower().endswith((".ppm", ".pnm")):
        _write_ppm(path, pixels)
        return
    from PIL import Image

    Image.fromarray(pixels, mode="RGB").save(path)


def _read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment to end of line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise DataError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)


def _write_ppm(path: str, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
