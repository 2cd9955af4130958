"""
Raster I/O
PNG frames and masks through Pillow, PFM depth maps through numpy.
"""
import re
from pathlib import Path

import numpy as np
from PIL import Image


class RasterFormatError(ValueError):
    """A raster file is malformed or has an unsupported layout."""


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit with round-half-up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image: np.ndarray):
    """Write an H×W×3 or H×W image with values in [0, 1]."""
    data = to_uint8(image)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim not in (2, 3):
        raise RasterFormatError(f"Cannot write image of shape {data.shape} as PNG")
    Image.fromarray(data).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read a PNG as H×W×3 float32 in [0, 1] (grayscale is expanded to three channels)."""
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.float32)
    except OSError as e:
        raise RasterFormatError(f"{path}: {e}") from e
    return data / 255.0


def write_mask_png(path, mask: np.ndarray):
    """0/1 mask to a black/white grayscale PNG."""
    write_png(path, (np.asarray(mask) > 0).astype(np.float32))


def write_pfm(path, array: np.ndarray):
    """Little-endian PFM, rows stored bottom-up."""
    data = np.asarray(array, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise RasterFormatError(f"PFM holds H×W or H×W×3 data, got {data.shape}")
    height, width = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    payload = Path(path).read_bytes()
    match = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", payload)
    if not match:
        raise RasterFormatError(f"{path}: not a PFM file")
    channels = 3 if match.group(1) == b"PF" else 1
    width, height = int(match.group(2)), int(match.group(3))
    scale = float(match.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    body = payload[match.end():]
    if len(body) < count * 4:
        raise RasterFormatError(f"{path}: truncated PFM ({len(body)} bytes for {width}x{height}x{channels})")
    data = np.frombuffer(body[:count * 4], dtype=dtype).astype(np.float32)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.ascontiguousarray(np.flipud(data.reshape(shape)))
