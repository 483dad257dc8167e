"""16-bit grayscale image files: PNG (dataset interchange) and binary PGM.

Pixels in [0, 1] are quantized to uint16 as round(p * 65535). Loading maps
back through float32 so every loaded pixel value sits exactly on the float32
lattice -- the latent codec's exact-inversion guarantee relies on that.
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage

from xraynvs.drr import Image

MAXVAL = 65535


def _quantize(pixels: np.ndarray) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    return np.round(np.clip(p, 0.0, 1.0) * MAXVAL).astype(np.uint16)


def _dequantize(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float64) / MAXVAL).astype(np.float32).astype(np.float64)


def save_png16(path: str, img) -> None:
    """Write a [0,1] image (Image or array) as 16-bit grayscale PNG."""
    pixels = img.pixels if isinstance(img, Image) else img
    PILImage.fromarray(_quantize(pixels)).save(path, format="PNG")


def load_png16(path: str) -> np.ndarray:
    """Read a 16-bit grayscale PNG as float64 pixels in [0, 1]."""
    arr = np.array(PILImage.open(path))
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected single-channel image, got shape {arr.shape}")
    return _dequantize(arr.astype(np.uint16))


def save_pgm16(path: str, img) -> None:
    """Write a [0,1] image as binary PGM (P5, maxval 65535, big-endian)."""
    pixels = img.pixels if isinstance(img, Image) else img
    q = _quantize(pixels)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        f.write(q.astype(">u2").tobytes())


def load_pgm16(path: str) -> np.ndarray:
    """Read a P5 PGM (maxval 65535) as float64 pixels in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    # header: magic, width, height, maxval, one whitespace, then raster
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":  # comment line
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        fields.append(blob[i:j])
        i = j
    i += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != MAXVAL:
        raise ValueError(f"{path}: expected maxval {MAXVAL}, got {maxval}")
    raster = np.frombuffer(blob, dtype=">u2", count=w * h, offset=i)
    return _dequantize(raster.reshape(h, w).astype(np.uint16))
