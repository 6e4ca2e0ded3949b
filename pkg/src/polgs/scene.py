"""Scene representation: flattened Gaussian surfels, pinhole cameras and the
learnable environment cubemap.

All learnable quantities are stored unconstrained (log-scale, opacity logit,
raw cubemap texels passed through softplus) so plain gradient steps keep the
physical invariants.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

log = logging.getLogger(__name__)

DTYPE = torch.float64


def quaternion_to_matrix(q: Tensor) -> Tensor:
    """Rotation matrices from (w, x, y, z) quaternions, shape (..., 4) -> (..., 3, 3).

    The quaternion is normalized first, so any non-zero input is accepted.
    """
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """(..., 3, 3) rotation matrices to (w, x, y, z) quaternions with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    for k, r in enumerate(m):
        tr = np.trace(r)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[k] = q if q[0] >= 0 else -q
    return out.reshape(R.shape[:-2] + (4,))


def covariance_3d(rotation: Tensor, scale: Tensor) -> Tensor:
    """R diag(sx^2, sy^2, 0) R^T for quaternions (..., 4) and scales (..., 2)."""
    R = quaternion_to_matrix(rotation)
    M = R[..., :2] * scale[..., None, :]
    return M @ M.transpose(-1, -2)


def surfel_normal(rotation: Tensor, to_camera: Tensor) -> Tensor:
    """Third rotation column, flipped so that it faces ``to_camera``.

    ``to_camera`` points from the surfel toward the camera; only its direction
    matters.
    """
    n = quaternion_to_matrix(rotation)[..., :, 2]
    sign = torch.where((n * to_camera).sum(-1, keepdim=True) < 0, -1.0, 1.0).to(n.dtype)
    return n * sign


@dataclass
class GaussianSurfel:
    """A single flattened Gaussian, physical (constrained) parameters."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(2)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if not np.linalg.norm(q) > 1e-12:
            raise ValueError("surfel rotation quaternion must be non-zero")
        self.rotation = q / np.linalg.norm(q)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("surfel scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("surfel opacity must lie in (0, 1)")

    def covariance(self) -> np.ndarray:
        return covariance_3d(torch.from_numpy(self.rotation), torch.from_numpy(self.scale)).numpy()

    def normal(self, to_camera) -> np.ndarray:
        v = torch.as_tensor(np.asarray(to_camera, dtype=np.float64))
        return surfel_normal(torch.from_numpy(self.rotation), v).numpy()


class SurfelCloud:
    """Dense arrays of surfel parameters in unconstrained form.

    Attributes are float64 tensors: ``position`` (N, 3), ``log_scale`` (N, 2),
    ``rotation`` (N, 4), ``opacity_logit`` (N,), ``color`` (N, 3). ``grad_accum``
    and ``grad_count`` hold the screen-space gradient statistics used for
    densification.
    """

    param_names = ("position", "log_scale", "rotation", "opacity_logit", "color")

    def __init__(self, position, log_scale, rotation, opacity_logit, color):
        self.position = torch.as_tensor(position, dtype=DTYPE).reshape(-1, 3).clone()
        n = self.position.shape[0]
        if n == 0:
            raise ValueError("a surfel cloud needs at least one surfel")
        self.log_scale = torch.as_tensor(log_scale, dtype=DTYPE).reshape(n, 2).clone()
        self.rotation = torch.as_tensor(rotation, dtype=DTYPE).reshape(n, 4).clone()
        self.opacity_logit = torch.as_tensor(opacity_logit, dtype=DTYPE).reshape(n).clone()
        self.color = torch.as_tensor(color, dtype=DTYPE).reshape(n, 3).clone()
        self.reset_stats()

    @classmethod
    def from_surfels(cls, surfels: list[GaussianSurfel]) -> SurfelCloud:
        op = np.array([s.opacity for s in surfels])
        return cls(
            position=np.stack([s.position for s in surfels]),
            log_scale=np.log(np.stack([s.scale for s in surfels])),
            rotation=np.stack([s.rotation for s in surfels]),
            opacity_logit=np.log(op / (1 - op)),
            color=np.stack([s.color for s in surfels]),
        )

    def __len__(self) -> int:
        return self.position.shape[0]

    @property
    def scale(self) -> Tensor:
        return self.log_scale.exp()

    @property
    def opacity(self) -> Tensor:
        return torch.sigmoid(self.opacity_logit)

    def params(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.param_names}

    def set_params(self, params: dict[str, Tensor]) -> None:
        for k in self.param_names:
            setattr(self, k, params[k])

    def reset_stats(self) -> None:
        self.grad_accum = torch.zeros(len(self), dtype=DTYPE)
        self.grad_count = torch.zeros(len(self), dtype=DTYPE)

    def select(self, keep: Tensor) -> SurfelCloud:
        out = SurfelCloud(*(getattr(self, k)[keep] for k in self.param_names))
        out.grad_accum = self.grad_accum[keep].clone()
        out.grad_count = self.grad_count[keep].clone()
        return out

    def normalize_rotations(self) -> None:
        with torch.no_grad():
            self.rotation /= self.rotation.norm(dim=-1, keepdim=True)

    def surfel(self, i: int) -> GaussianSurfel:
        return GaussianSurfel(
            self.position[i].numpy(), self.scale[i].numpy(), self.rotation[i].numpy(),
            float(self.opacity[i]), self.color[i].numpy(),
        )

    def check_finite(self) -> None:
        for k in self.param_names:
            if not torch.isfinite(getattr(self, k)).all():
                raise FloatingPointError(f"non-finite values in surfel parameter '{k}'")


@dataclass
class Camera:
    """Pinhole camera with an OpenCV-style world-to-camera pose.

    Camera space has x right, y down, z forward. Pixel (row i, col j) has its
    center at image coordinates (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    name: str = "view"

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be orthonormal with determinant +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, name="view") -> Camera:
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0] if abs(z[0]) < 0.9 else [0.0, 1.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ eye
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   width, height, T, name)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Image coordinates (u, v) of every pixel center, each (H, W)."""
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return j + 0.5, i + 0.5

    def camera_rays(self) -> np.ndarray:
        """Camera-space ray directions with unit z component, (H, W, 3)."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)

    def world_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Ray origin (3,) and unit world-space directions (H, W, 3)."""
        d = self.camera_rays() @ self.rotation
        return self.center, d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "width": int(self.width), "height": int(self.height),
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "world_to_camera": [float(a) for a in self.world_to_camera.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4), d.get("name", "view"))


# Major-axis face table, OpenGL cubemap convention: (axis, sign, sc, tc).
_FACES = (
    (0, +1.0, (2, -1.0), (1, -1.0)),
    (0, -1.0, (2, +1.0), (1, -1.0)),
    (1, +1.0, (0, +1.0), (2, +1.0)),
    (1, -1.0, (0, +1.0), (2, -1.0)),
    (2, +1.0, (0, +1.0), (1, -1.0)),
    (2, -1.0, (0, -1.0), (1, -1.0)),
)


def cubemap_coords(dirs: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Face index and (s, t) in [0, 1] for directions (..., 3)."""
    a = dirs.abs()
    axis = a.argmax(-1)
    comp = torch.gather(dirs, -1, axis[..., None])[..., 0]
    face = 2 * axis + (comp < 0).long()
    ma = comp.abs()
    s = torch.empty_like(ma)
    t = torch.empty_like(ma)
    for f, (_, _, (si, ss), (ti, ts)) in enumerate(_FACES):
        m = face == f
        if m.any():
            s[m] = ss * dirs[..., si][m]
            t[m] = ts * dirs[..., ti][m]
    return face, 0.5 * (s / ma + 1), 0.5 * (t / ma + 1)


def face_direction(face: int, s, t) -> np.ndarray:
    """Inverse of :func:`cubemap_coords` for one face, unit direction."""
    axis, sign, (si, ss), (ti, ts) = _FACES[face]
    d = np.zeros(np.broadcast(s, t).shape + (3,))
    d[..., axis] = sign
    d[..., si] = ss * (2 * np.asarray(s) - 1)
    d[..., ti] = ts * (2 * np.asarray(t) - 1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def cubemap_taps(dirs: Tensor, res: int) -> tuple[Tensor, Tensor]:
    """Flat texel indices (..., 4) and bilinear weights (..., 4) for ``dirs``.

    Rows index t, columns index s; texel centers sit at (k + 0.5) / res and
    out-of-face taps are clamped to the edge texel.
    """
    if dirs.shape[-1] != 3:
        raise ValueError("directions must have a trailing dimension of 3")
    if (dirs.norm(dim=-1) < 1e-12).any():
        raise ValueError("degenerate direction")
    face, s, t = cubemap_coords(dirs)
    x = s * res - 0.5
    y = t * res - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    xs = (x0.clamp(0, res - 1), (x0 + 1).clamp(0, res - 1))
    ys = (y0.clamp(0, res - 1), (y0 + 1).clamp(0, res - 1))
    base = face * res * res
    idx = torch.stack([base + ys[0] * res + xs[0], base + ys[0] * res + xs[1],
                       base + ys[1] * res + xs[0], base + ys[1] * res + xs[1]], -1)
    w = torch.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], -1)
    return idx, w


class Cubemap:
    """Six F x F RGB faces; radiance = softplus(raw texels)."""

    def __init__(self, raw: Tensor):
        raw = torch.as_tensor(raw, dtype=DTYPE)
        if raw.ndim != 4 or raw.shape[0] != 6 or raw.shape[1] != raw.shape[2] or raw.shape[3] != 3:
            raise ValueError("cubemap texels must have shape (6, F, F, 3)")
        self.raw = raw

    @classmethod
    def constant(cls, value: float, res: int = 64) -> Cubemap:
        if value <= 0:
            return cls(torch.full((6, res, res, 3), -30.0, dtype=DTYPE))
        raw = float(np.log(np.expm1(value)))
        return cls(torch.full((6, res, res, 3), raw, dtype=DTYPE))

    @property
    def res(self) -> int:
        return self.raw.shape[1]

    def texels(self, raw: Tensor | None = None) -> Tensor:
        return F.softplus(self.raw if raw is None else raw)

    def sample(self, dirs: Tensor, raw: Tensor | None = None) -> Tensor:
        return sample_cubemap(self.texels(raw), dirs)


def sample_cubemap(texels: Tensor, dirs: Tensor) -> Tensor:
    """Bilinear lookup of (6, F, F, 3) radiance texels at directions (..., 3)."""
    idx, w = cubemap_taps(dirs, texels.shape[1])
    flat = texels.reshape(-1, 3)
    vals = flat[idx.reshape(-1)].reshape(idx.shape + (3,))
    return (vals * w[..., None].to(vals.dtype)).sum(-2)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"POLGSCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, cloud: SurfelCloud, cubemap: Cubemap, iteration: int, meta: dict | None = None) -> None:
    """Write surfels + cubemap + iteration counter.

    Layout: 8-byte magic ``POLGSCKP``, uint32 version, uint32 header length,
    UTF-8 JSON header (sorted keys) listing each array's name, dtype, shape and
    byte offset, then the raw little-endian array payload.
    """
    arrays = {k: v.detach().cpu().numpy() for k, v in cloud.params().items()}
    arrays["cubemap"] = cubemap.raw.detach().cpu().numpy()
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        b = np.ascontiguousarray(a, dtype="<f8").tobytes()
        entries.append({"name": name, "dtype": "<f8", "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({"iteration": int(iteration), "arrays": entries, "meta": meta or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[SurfelCloud, Cubemap, int, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a surfel checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        a = np.frombuffer(data, dtype=e["dtype"], count=e["nbytes"] // 8, offset=base + e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    color = arrays["color"]
    if color.ndim == 3:
        # (N, K, 3) spherical-harmonic stacks: keep the DC band only
        if color.shape[1] > 1:
            log.warning("checkpoint carries %d SH coefficients per surfel; truncating to order 0", color.shape[1])
        color = color[:, 0]
    cloud = SurfelCloud(arrays["position"], arrays["log_scale"], arrays["rotation"],
                        arrays["opacity_logit"], color)
    return cloud, Cubemap(torch.from_numpy(arrays["cubemap"])), int(header["iteration"]), header.get("meta", {})
