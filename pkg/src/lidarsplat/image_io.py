"""PNG (8-bit, via Pillow) and PFM (float32) image files."""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage

from .scene import Image


def save_png(img, path):
    """Write a float [0,1] image (H,W), (H,W,1) or (H,W,3) as 8-bit PNG."""
    data = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    arr = np.clip(np.round(data * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def load_png(path) -> Image:
    arr = np.asarray(PILImage.open(path), dtype=np.float64) / 255.0
    return Image(data=arr)


def save_pfm(data: np.ndarray, path):
    """Write float32 PFM ('Pf' gray or 'PF' 3-channel), little-endian,
    bottom-to-top row order per the format convention."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header, payload = b"Pf", data[:, :, None]
    elif data.ndim == 3 and data.shape[2] == 3:
        header, payload = b"PF", data
    else:
        raise ValueError(f"PFM supports (H,W) or (H,W,3), got {data.shape}")
    h, w = payload.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(payload[::-1].astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        channels = 3 if header == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    data = data.reshape(h, w, channels)[::-1].astype(np.float64)
    return data[:, :, 0] if channels == 1 else data
