"""
Float image interchange (FIMG) and 8-bit PNG import/export.

FIMG layout: magic b"FIMG", little-endian u32 width, height, channels, then
width*height*channels little-endian f32 values, row-major, channel-interleaved.

PNG conversion is value/255 on import and round(clip(v, 0, 1) * 255) on
export. No gamma transform is applied in either direction.
"""
import io
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .errors import ImageFormatError

logger = logging.getLogger(__name__)

FIMG_MAGIC = b"FIMG"
_HEADER = struct.Struct("<4sIII")

PathLike = Union[str, Path]


def write_fimg(path: PathLike, data: np.ndarray) -> Path:
    """Write an (H, W) or (H, W, C) array as FIMG."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ImageFormatError(f"FIMG needs a 2D or 3D array, got shape {arr.shape}")
    height, width, channels = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FIMG_MAGIC, width, height, channels))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_fimg(path: PathLike) -> np.ndarray:
    """Read an FIMG file as a float64 (H, W, C) array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ImageFormatError(f"Cannot read {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise ImageFormatError(f"{path}: truncated FIMG header")
    magic, width, height, channels = _HEADER.unpack_from(raw)
    if magic != FIMG_MAGIC:
        raise ImageFormatError(f"{path}: bad magic {magic!r}")
    expected = width * height * channels * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise ImageFormatError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return arr.reshape(height, width, channels)


def read_png(path: PathLike) -> np.ndarray:
    """Read an 8-bit PNG as float64 (H, W, 3) or (H, W, 1) in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode in ("L", "I", "I;16"):
                arr = np.asarray(img.convert("L"), dtype=np.float64)[:, :, None]
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as e:
        raise ImageFormatError(f"Cannot read PNG {path}: {e}") from e
    return arr / 255.0


def _to_pil(data: np.ndarray) -> Image.Image:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return Image.fromarray(np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8))


def write_png(path: PathLike, data: np.ndarray) -> Path:
    """Write an (H, W), (H, W, 1) or (H, W, 3) array in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _to_pil(data).save(path)
    return path


def encode_png(data: np.ndarray) -> bytes:
    """PNG bytes of an array, same conversion as write_png."""
    buf = io.BytesIO()
    _to_pil(data).save(buf, format="PNG")
    return buf.getvalue()


def read_image(path: PathLike) -> np.ndarray:
    """Dispatch on extension: .fimg or .png."""
    suffix = Path(path).suffix.lower()
    if suffix == ".fimg":
        return read_fimg(path)
    if suffix == ".png":
        return read_png(path)
    raise ImageFormatError(f"Unsupported image extension '{suffix}' for {path}")


def depth_visual(depth: np.ndarray, coverage: np.ndarray, min_coverage: float = 0.05) -> np.ndarray:
    """Depth as gray levels: near = white, far = dark, uncovered = black."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = (np.asarray(coverage) >= min_coverage) & np.isfinite(depth)
    vis = np.zeros_like(depth)
    if np.any(valid):
        lo, hi = depth[valid].min(), depth[valid].max()
        span = hi - lo if hi > lo else 1.0
        vis[valid] = 1.0 - 0.85 * (depth[valid] - lo) / span
    return vis


def depth_to_png(path: PathLike, depth: np.ndarray, coverage: np.ndarray, min_coverage: float = 0.05) -> Path:
    return write_png(path, depth_visual(depth, coverage, min_coverage))


def mask_to_png(path: PathLike, mask: np.ndarray) -> Path:
    """Binary mask: 0 -> black, 1 -> white."""
    return write_png(path, np.asarray(mask, dtype=np.float64))


def grid_to_png(path: PathLike, panels, pad: int = 2) -> Path:
    """Side-by-side panels of equal height (gray panels are broadcast to RGB)."""
    rows = []
    height = max(p.shape[0] for p in panels)
    for p in panels:
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.shape[2] == 1:
            p = np.repeat(p, 3, axis=2)
        if p.shape[0] != height:
            raise ImageFormatError(f"Grid panels must share height; got {p.shape[0]} and {height}")
        rows.append(p)
        rows.append(np.ones((height, pad, 3)))
    return write_png(path, np.concatenate(rows[:-1], axis=1))
