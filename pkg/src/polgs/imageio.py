"""File formats: 32-bit float EXR, 8-bit PNG, binary little-endian PLY.

PNG previews use a fixed curve: non-negative radiance goes through
x / (1 + x); signed data is mapped linearly from [-m, m] to [0, 1] with m its
maximum magnitude. Neither curve applies a gamma.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import OpenEXR
from PIL import Image
from plyfile import PlyData, PlyElement


def write_exr(path, image) -> None:
    image = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
    if image.ndim == 2:
        channels = {"Y": image}
    elif image.ndim == 3 and image.shape[2] == 3:
        channels = {"RGB": image}
    else:
        raise ValueError(f"EXR images must be (H, W) or (H, W, 3), got {image.shape}")
    header = {"compression": OpenEXR.ZIP_COMPRESSION, "type": OpenEXR.scanlineimage}
    with OpenEXR.File(header, channels) as f:
        f.write(str(path))


def read_exr(path) -> np.ndarray:
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    with OpenEXR.File(str(path)) as f:
        ch = f.channels()
        key = "RGB" if "RGB" in ch else "Y" if "Y" in ch else next(iter(ch))
        return np.array(ch[key].pixels, dtype=np.float32)


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    a = np.asarray(Image.open(path))
    if a.ndim == 3:
        a = a[..., 0]
    return (a >= 128).astype(np.float64)


def tonemap(x) -> np.ndarray:
    x = np.maximum(np.asarray(x, dtype=np.float64), 0)
    return x / (1 + x)


def signed_to_unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.abs(x).max()
    return 0.5 + 0.5 * x / m if m > 0 else np.full_like(x, 0.5)


def write_preview_png(path, unit_image) -> None:
    """Write an image already mapped to [0, 1]."""
    a = np.clip(np.asarray(unit_image, dtype=np.float64), 0, 1)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


PLY_FIELDS = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "opacity")


def write_ply(path, points, normals, colors, opacity) -> None:
    """Binary little-endian PLY with float32 position/normal/color/opacity per vertex.

    Colors are linear floats (not 8-bit).
    """
    n = len(points)
    v = np.empty(n, dtype=[(k, "<f4") for k in PLY_FIELDS])
    for k, col in zip(("x", "y", "z"), np.asarray(points).T):
        v[k] = col
    for k, col in zip(("nx", "ny", "nz"), np.asarray(normals).T):
        v[k] = col
    for k, col in zip(("red", "green", "blue"), np.asarray(colors).T):
        v[k] = col
    v["opacity"] = np.asarray(opacity).reshape(n)
    PlyData([PlyElement.describe(v, "vertex")], byte_order="<").write(str(path))


def read_ply(path) -> dict[str, np.ndarray]:
    v = PlyData.read(str(path))["vertex"].data
    out = {"points": np.stack([v["x"], v["y"], v["z"]], -1).astype(np.float64)}
    names = v.dtype.names
    if "nx" in names:
        out["normals"] = np.stack([v["nx"], v["ny"], v["nz"]], -1).astype(np.float64)
    if "red" in names:
        out["colors"] = np.stack([v["red"], v["green"], v["blue"]], -1).astype(np.float64)
    if "opacity" in names:
        out["opacity"] = np.asarray(v["opacity"], dtype=np.float64)
    return out
