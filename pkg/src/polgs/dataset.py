"""Multi-view polarized datasets on disk and synthetic dataset generation.

Layout::

    root/views.json              [{name, width, height, fx, fy, cx, cy,
                                   world_to_camera: 16 row-major floats}, ...]
    root/<name>/I000.exr ... I135.exr   linear RGB radiance behind each polarizer
    root/<name>/mask.png         8-bit, 255 = foreground
    root/<name>/gt_normal.exr    optional, world-space unit normals
    root/<name>/gt_depth.exr     optional, camera-space z depth
    root/scene.json              optional description of a synthetic scene
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_exr, read_mask_png, write_exr, write_mask_png
from .oracle import ConstantEnvironment, ProceduralEnvironment, SyntheticScene, render_oracle
from .scene import Camera
from .stokes import POLARIZER_ANGLES, quad_from_stokes, stokes_from_quad

log = logging.getLogger(__name__)

POSE_TOLERANCE = 1e-4  # larger residuals are rejected, smaller ones projected back onto SO(3)


class DatasetError(Exception):
    """Malformed or missing dataset content."""


@dataclass
class PolarizedView:
    quad: tuple                  # four (H, W, 3) images at 0/45/90/135 degrees
    mask: np.ndarray             # (H, W) in {0, 1}
    camera: Camera
    gt_normal: np.ndarray | None = None
    gt_depth: np.ndarray | None = None
    stokes: np.ndarray = field(init=False)

    def __post_init__(self):
        shapes = {np.shape(q) for q in self.quad}
        if len(shapes) != 1:
            raise DatasetError(f"view {self.camera.name}: polarizer images are not co-registered")
        (shape,) = shapes
        if shape[:2] != np.shape(self.mask) or shape[:2] != (self.camera.height, self.camera.width):
            raise DatasetError(f"view {self.camera.name}: image size does not match mask/camera")
        self.quad = tuple(np.asarray(q, dtype=np.float64) for q in self.quad)
        self.stokes = stokes_from_quad(*self.quad)

    @classmethod
    def from_stokes(cls, stokes, mask, camera, gt_normal=None, gt_depth=None) -> PolarizedView:
        """View whose target Stokes image is exactly ``stokes`` (no polarizer round trip)."""
        S = np.asarray(stokes, dtype=np.float64)
        v = cls(tuple(quad_from_stokes(S)), mask, camera, gt_normal, gt_depth)
        v.stokes = S.copy()
        return v

    @property
    def name(self) -> str:
        return self.camera.name


def orthonormalize_pose(T: np.ndarray, name: str) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64).reshape(4, 4)
    R = T[:3, :3]
    resid = np.abs(R @ R.T - np.eye(3)).max()
    if resid > POSE_TOLERANCE or np.linalg.det(R) <= 0:
        raise DatasetError(f"view {name}: world_to_camera rotation is not orthonormal (residual {resid:.2e})")
    if resid <= 1e-12:
        return T  # already orthonormal to rounding; keep the file's bits
    U, _, Vt = np.linalg.svd(R)
    out = T.copy()
    out[:3, :3] = U @ Vt
    return out


def angle_file(deg: int) -> str:
    return f"I{deg:03d}.exr"


def save_dataset(views: list[PolarizedView], root, scene_info: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = []
    for v in views:
        d = root / v.name
        d.mkdir(exist_ok=True)
        for deg, img in zip(POLARIZER_ANGLES, v.quad):
            write_exr(d / angle_file(deg), img)
        write_mask_png(d / "mask.png", v.mask)
        if v.gt_normal is not None:
            write_exr(d / "gt_normal.exr", v.gt_normal)
        if v.gt_depth is not None:
            write_exr(d / "gt_depth.exr", v.gt_depth)
        meta.append(v.camera.to_dict())
    (root / "views.json").write_text(json.dumps(meta, indent=1))
    if scene_info is not None:
        (root / "scene.json").write_text(json.dumps(scene_info, indent=1, sort_keys=True))


def load_dataset(path) -> list[PolarizedView]:
    root = Path(path)
    if not (root / "views.json").is_file():
        raise DatasetError(f"dataset not found: {root} (no views.json)")
    try:
        entries = json.loads((root / "views.json").read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{root / 'views.json'}: {e}") from None
    views = []
    for k, e in enumerate(entries):
        name = e.get("name", f"view{k:03d}")
        try:
            pose = orthonormalize_pose(e["world_to_camera"], name)
            cam = Camera(float(e["fx"]), float(e["fy"]), float(e["cx"]), float(e["cy"]),
                         int(e["width"]), int(e["height"]), pose, name)
        except KeyError as missing:
            raise DatasetError(f"view {name}: views.json entry lacks {missing}") from None
        d = root / name
        quad = []
        for deg in POLARIZER_ANGLES:
            f = d / angle_file(deg)
            if not f.is_file():
                raise DatasetError(f"missing polarization angle {deg} for view {name}")
            quad.append(read_exr(f))
        if not (d / "mask.png").is_file():
            raise DatasetError(f"missing mask for view {name}")
        mask = read_mask_png(d / "mask.png")
        gt_n = read_exr(d / "gt_normal.exr").astype(np.float64) if (d / "gt_normal.exr").is_file() else None
        gt_d = read_exr(d / "gt_depth.exr").astype(np.float64) if (d / "gt_depth.exr").is_file() else None
        views.append(PolarizedView(tuple(quad), mask, cam, gt_n, gt_d))
    if not views:
        raise DatasetError(f"dataset {root} has no views")
    return views


def load_scene_info(path) -> dict | None:
    f = Path(path) / "scene.json"
    return json.loads(f.read_text()) if f.is_file() else None


# ---------------------------------------------------------------------------
# synthetic data


def camera_ring(n_views: int, resolution: int, distance: float = 4.0, focal_factor: float = 1.4,
                target=(0.0, 0.0, 0.0), elevations=(25.0, -20.0)) -> list[Camera]:
    """Cameras around ``target`` alternating between two elevation rings (world +z up)."""
    cams = []
    target = np.asarray(target, dtype=np.float64)
    f = focal_factor * resolution
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        el = np.radians(elevations[k % len(elevations)])
        eye = target + distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, target, [0, 0, 1], f, f, resolution, resolution, name=f"view{k:03d}"))
    return cams


def make_scene(shape: str = "sphere", environment: str = "procedural", **kw) -> SyntheticScene:
    env = ProceduralEnvironment() if environment == "procedural" else ConstantEnvironment(float(environment))
    return SyntheticScene(shape=shape, environment=env, **kw)


def scene_description(scene: SyntheticScene) -> dict:
    def plain(v):
        return [float(x) for x in v] if isinstance(v, (tuple, list, np.ndarray)) else v
    return {
        "shape": scene.shape, "params": {k: plain(v) for k, v in scene.params.items()},
        "eta": scene.eta, "roughness": scene.roughness, "units": scene.units,
        "albedo": plain(scene.albedo) if not callable(scene.albedo) else "procedural",
    }


def render_view(scene: SyntheticScene, camera: Camera, samples: int = 1024, seed: int = 0) -> PolarizedView:
    r = render_oracle(scene, camera, samples=samples, seed=seed)
    quad = quad_from_stokes(r.stokes)
    return PolarizedView(quad, r.mask, camera, r.normal, r.depth)


def make_synthetic_dataset(scene: SyntheticScene, n_views: int, resolution: int, seed: int, root=None,
                           samples: int = 1024, distance: float = 4.0, focal_factor: float = 1.4) -> list[PolarizedView]:
    """Render ``n_views`` oracle views and optionally write them under ``root``."""
    if n_views < 2:
        raise ValueError("a synthetic dataset needs at least 2 views")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    views = []
    for k, cam in enumerate(camera_ring(n_views, resolution, distance, focal_factor)):
        log.info("rendering %s", cam.name)
        views.append(render_view(scene, cam, samples, seed * 1000 + k))
    if root is not None:
        save_dataset(views, root, scene_description(scene))
    return views
