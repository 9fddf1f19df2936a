"""PFM (float, bit exact) and PNG (8-bit sRGB preview) image files."""
from __future__ import annotations

import os
import tempfile

import numpy as np
from PIL import Image


def _atomic_bytes(data: bytes, path) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pfm(path, image) -> None:
    """Little-endian colour PFM; rows are stored bottom-up as the format requires."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
    _atomic_bytes(header + np.ascontiguousarray(img[::-1]).tobytes(), path)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind != b"PF":
            raise ValueError(f"{path}: only colour PFM ('PF') is supported")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated PFM payload")
    return data.reshape(h, w, 3)[::-1].astype(np.float32)


def linear_to_srgb(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def write_png(path, image) -> None:
    img = np.asarray(image, dtype=float)
    rgb = np.round(linear_to_srgb(img) * 255.0).astype(np.uint8)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-",
                               suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(rgb, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def heatmap(values, vmax: float | None = None) -> np.ndarray:
    """Map a 2-D magnitude field to a black-red-yellow-white linear RGB image."""
    v = np.asarray(values, dtype=float)
    top = float(v.max()) if vmax is None else vmax
    t = np.zeros_like(v) if top <= 0 else np.clip(v / top, 0.0, 1.0)
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)
