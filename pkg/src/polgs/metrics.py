"""Evaluation metrics and file exports of a trained scene."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .dataset import PolarizedView
from .imageio import signed_to_unit, tonemap, write_exr, write_mask_png, write_ply, write_preview_png
from .rasterizer import composite_backward, rasterize
from .render import render_stokes
from .scene import DTYPE, Camera, Cubemap, SurfelCloud, quaternion_to_matrix
from .stokes import ETA, aop, compose_stokes_parts, dop

log = logging.getLogger(__name__)


def mae_normals(pred, gt, mask) -> float:
    """Mean angular error in degrees between two normal maps over ``mask``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    m = np.asarray(mask) > 0.5
    if pred.shape != gt.shape:
        raise ValueError(f"normal maps differ in shape: {pred.shape} vs {gt.shape}")
    if not m.any():
        raise ValueError("MAE needs a non-empty mask")
    d = np.clip((pred[m] * gt[m]).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(d)).mean())


def _check_points(P, name):
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError(f"chamfer distance: point set {name} is empty")
    return P


def chamfer_distance(P, Q, workers: int = 1) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    P, Q = _check_points(P, "P"), _check_points(Q, "Q")
    dpq, _ = cKDTree(Q).query(P, workers=workers)
    dqp, _ = cKDTree(P).query(Q, workers=workers)
    return float(0.5 * (dpq.mean() + dqp.mean()))


def chamfer_brute(P, Q) -> float:
    P, Q = _check_points(P, "P"), _check_points(Q, "Q")
    d = np.sqrt(((P[:, None] - Q[None]) ** 2).sum(-1))
    return float(0.5 * (d.min(1).mean() + d.min(0).mean()))


@dataclass
class EvalReport:
    mae: float
    cd: float | None
    units: str = "scene"
    per_view: list[dict] = field(default_factory=list)
    n_surfels: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> EvalReport:
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# point clouds


def visibility_weights(cloud: SurfelCloud, camera: Camera) -> np.ndarray:
    """Total blending weight of each surfel over the image of ``camera``."""
    with torch.no_grad():
        buf = rasterize(cloud, camera)
    # with unit upstream gradient on the red sum, d/d(red feature of i) = sum_pixels w_i
    g = np.zeros((camera.height, camera.width, 8))
    g[..., 0] = 1.0
    return composite_backward(buf.state, g)[:, 6]


def oriented_normals(cloud: SurfelCloud, cameras: list[Camera]) -> np.ndarray:
    """Surfel axes R_i[:, 2] flipped by a visibility-weighted vote of the cameras."""
    with torch.no_grad():
        n = quaternion_to_matrix(cloud.rotation)[:, :, 2].numpy()
    x = cloud.position.detach().numpy()
    vote = np.zeros(len(cloud))
    for cam in cameras:
        w = visibility_weights(cloud, cam)
        vote += w * np.sign(((cam.center - x) * n).sum(-1))
    # surfels no camera sees: point away from the cloud centroid
    unseen = vote == 0
    vote[unseen] = ((x[unseen] - x.mean(0)) * n[unseen]).sum(-1)
    return np.where(vote[:, None] < 0, -n, n)


def export_pointcloud(cloud: SurfelCloud, path, cameras: list[Camera]) -> np.ndarray:
    normals = oriented_normals(cloud, cameras)
    with torch.no_grad():
        write_ply(path, cloud.position.numpy(), normals, cloud.color.numpy(), cloud.opacity.numpy())
    return normals


def surface_samples(views: list[PolarizedView]) -> np.ndarray:
    """World-space points unprojected from the ground-truth depth maps."""
    pts = []
    for v in views:
        if v.gt_depth is None:
            continue
        cam = v.camera
        m = v.mask > 0.5
        pc = cam.camera_rays()[m] * v.gt_depth[m][:, None]
        pts.append((pc - cam.translation) @ cam.rotation)
    return np.concatenate(pts) if pts else np.empty((0, 3))


def surfel_points(cloud: SurfelCloud, min_opacity: float = 0.5) -> np.ndarray:
    with torch.no_grad():
        keep = (cloud.opacity >= min_opacity).numpy()
        return cloud.position.numpy()[keep]


# ---------------------------------------------------------------------------
# images


def render_normals_world(cloud, cubemap, camera, eta=ETA):
    with torch.no_grad():
        r = render_stokes(cloud, cubemap, camera, deferred=False, eta=eta)
    return r.normal_world.numpy(), r.buffers


def evaluate(cloud: SurfelCloud, cubemap: Cubemap, views: list[PolarizedView], eta: float = ETA,
             units: str = "scene", min_opacity: float = 0.5) -> EvalReport:
    """Normal MAE on ground-truth foreground per view and Chamfer distance to the GT surface samples."""
    per_view, errs = [], []
    for v in views:
        if v.gt_normal is None:
            continue
        n, _ = render_normals_world(cloud, cubemap, v.camera, eta)
        e = mae_normals(n, v.gt_normal, v.mask)
        per_view.append({"name": v.name, "mae": e})
        errs.append(e)
    if not errs:
        raise ValueError("no view carries ground-truth normals")
    gt = surface_samples(views)
    pts = surfel_points(cloud, min_opacity)
    cd = chamfer_distance(pts, gt) if len(gt) and len(pts) else None
    return EvalReport(float(np.mean(errs)), cd, units, per_view, len(cloud))


def export_decomposition(cloud: SurfelCloud, cubemap: Cubemap, camera: Camera, out_dir, eta: float = ETA,
                         previews: bool = True) -> dict[str, np.ndarray]:
    """Write diffuse/specular/combined Stokes, AoP, DoP, normal and depth images of one view."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        r = render_stokes(cloud, cubemap, camera, deferred=True, eta=eta)
        diff, spec = compose_stokes_parts(r.diffuse, r.specular, r.buffers.normal, r.view, eta)
    S = r.stokes.numpy()
    images = {
        "diffuse_s0": diff[..., 0].numpy(), "specular_s0": spec[..., 0].numpy(),
        "s0": S[..., 0], "s1": S[..., 1], "s2": S[..., 2],
        "aop": aop(S), "dop": np.where(S[..., 0] > 1e-12, dop(S), 0.0),
        "normal": r.normal_world.numpy(), "depth": r.buffers.depth.numpy(),
    }
    for name, img in images.items():
        write_exr(out / f"{name}.exr", img)
    if previews:
        for name in ("diffuse_s0", "specular_s0", "s0"):
            write_preview_png(out / f"{name}.png", tonemap(images[name]))
        for name in ("s1", "s2"):
            write_preview_png(out / f"{name}.png", signed_to_unit(images[name]))
        write_preview_png(out / "aop.png", (images["aop"] + np.pi / 2) / np.pi)
        write_preview_png(out / "dop.png", images["dop"])
        write_preview_png(out / "normal.png", 0.5 + 0.5 * images["normal"])
        d = images["depth"]
        fg = r.buffers.foreground.numpy()
        lo, hi = (d[fg].min(), d[fg].max()) if fg.any() else (0.0, 1.0)
        write_preview_png(out / "depth.png", np.where(fg, (d - lo) / max(hi - lo, 1e-12), 0.0))
        write_mask_png(out / "mask.png", fg)
    return images
