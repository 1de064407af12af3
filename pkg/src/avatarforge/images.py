"""Image file output: 8-bit PNG for color, PFM (portable float map) for
float-valued masks and normal maps. Normal maps are encoded as (n + 1) / 2."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """img is (H, W, 3) or (H, W) in [0, 1]."""
    arr = to_uint8(img)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    return arr.astype(np.float64) / 255.0


def encode_normal_map(normals: np.ndarray) -> np.ndarray:
    return (np.clip(normals, -1.0, 1.0) + 1.0) / 2.0


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; 'PF' for 3-channel, 'Pf' for scalar images."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM needs (H, W) or (H, W, 3) data")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).copy()
