"""Full view rendering: splatted diffuse color plus deferred cubemap specular,
combined into Stokes images."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .rasterizer import RenderBuffers, rasterize
from .scene import DTYPE, Camera, Cubemap, SurfelCloud, sample_cubemap
from .stokes import ETA, compose_stokes, reflect


@dataclass
class StokesRender:
    buffers: RenderBuffers
    stokes: Tensor          # (H, W, 3 rgb, 3) s0 s1 s2
    diffuse: Tensor         # (H, W, 3) splatted color C
    specular: Tensor        # (H, W, 3) cubemap radiance L_r (alpha-weighted)
    view: Tensor            # (H, W, 3) camera-space unit direction toward the camera
    normal_world: Tensor    # (H, W, 3)
    deferred: bool

    @property
    def s0(self) -> Tensor:
        return self.stokes[..., 0]


def view_directions(camera: Camera) -> Tensor:
    rays = torch.as_tensor(camera.camera_rays(), dtype=DTYPE)
    return -rays / rays.norm(dim=-1, keepdim=True)


def render_stokes(cloud: SurfelCloud, cubemap: Cubemap | None, camera: Camera, *, deferred: bool = True,
                  eta: float = ETA, params: dict[str, Tensor] | None = None,
                  cube_raw: Tensor | None = None) -> StokesRender:
    """Render Stokes images for ``camera``.

    With ``deferred=False`` (warm-up) s0 is the splatted color and s1 = s2 = 0.
    Otherwise the splatted color is the diffuse term and the cubemap, looked up
    at the mirror direction of the composited normal, feeds the specular term;
    the specular radiance is weighted by accumulated alpha so background
    pixels stay empty.
    """
    buf = rasterize(cloud, camera, params)
    v = view_directions(camera)
    R = torch.as_tensor(camera.rotation, dtype=DTYPE)
    n_world = buf.normal @ R
    C = buf.color
    if not deferred or cubemap is None:
        zero = torch.zeros_like(C)
        stokes = torch.stack([C, zero, zero], -1)
        return StokesRender(buf, stokes, C, zero, v, n_world, False)
    r_cam = reflect(v, buf.normal)
    fg = buf.normal.norm(dim=-1) > 0.5
    r_cam = torch.where(fg[..., None], r_cam, -v)
    r_world = r_cam @ R
    texels = F.softplus(cubemap.raw if cube_raw is None else cube_raw)
    L_r = sample_cubemap(texels, r_world) * buf.alpha[..., None]
    stokes = compose_stokes(C, L_r, buf.normal, v, eta)
    return StokesRender(buf, stokes, C, L_r, v, n_world, True)
