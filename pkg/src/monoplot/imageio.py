"""8-bit image loading and saving (PNG/PGM via Pillow).

RGB photos are reduced to luma with round(0.299 R + 0.587 G + 0.114 B)
so the conversion is reproducible bit-for-bit.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, rounded half-up to uint8."""
    rgb = np.asarray(rgb, dtype=np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.floor(luma + 0.5).astype(np.uint8)


def load_gray(path: str | Path) -> np.ndarray:
    """Load a PNG or PGM photo as a 2-D uint8 array (RGB reduced to luma)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"photo file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I"):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
            elif im.mode in ("RGB", "RGBA", "P"):
                arr = rgb_to_gray(np.asarray(im.convert("RGB")))
            else:
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: not a readable PNG/PGM image ({exc})") from exc
    return arr


def encode_png(img: np.ndarray) -> bytes:
    """Encode a gray (H, W) or RGB (H, W, 3) uint8 array as PNG bytes."""
    arr = np.ascontiguousarray(img)
    mode = "L" if arr.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def save_png(img: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(img))
