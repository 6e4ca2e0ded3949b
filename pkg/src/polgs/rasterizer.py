"""Tile-based surfel splatting with analytic gradients.

Surfels are projected with the EWA affine approximation, depth-sorted once per
view by their center depth and alpha-blended front to back per 16x16 tile.
The compositing kernels run in numba; the projection runs in torch so its
gradients come from autograd, and the two are joined by a custom
``torch.autograd.Function`` whose backward is the hand-derived reverse sweep.

Per-surfel blended channels are fixed: color (3), affine depth, camera-space
normal (3) and unit weight (accumulated alpha).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

# the bundled TBB is too old on some systems; the portable layer is enough here
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "workqueue"
import torch
from torch import Tensor

from .scene import DTYPE, Camera, SurfelCloud, quaternion_to_matrix

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
LOW_PASS = 0.3
TILE = 16
NEAR = 0.2
# grazing surfels: |d depth / d pixel| <= MAX_SLOPE * depth / focal
MAX_SLOPE = 10.0
FOREGROUND = 0.5

N_CH = 8  # r g b | depth | nx ny nz | alpha
N_GRAD = 15  # ux uy | A B C | opacity | 6 features | z gx gy


@dataclass
class ProjectedSurfel:
    """Screen-space quantities for every surfel of a view (culled ones flagged)."""

    means2d: Tensor      # (N, 2) pixel coordinates of centers
    cov2d: Tensor        # (N, 2, 2) with the low-pass floor applied
    conic: Tensor        # (N, 3) A, B, C of the inverse covariance
    depth: Tensor        # (N,) camera-space center depth d_i(u_i)
    depth_grad: Tensor   # (N, 2) d depth / d pixel from the tangent plane
    rotation_cam: Tensor # (N, 3, 3) camera-space surfel frame W_k R_i
    normal: Tensor       # (N, 3) camera-space normal facing the camera
    opacity: Tensor      # (N,)
    color: Tensor        # (N, 3)
    valid: np.ndarray    # (N,) bool, False for culled surfels


def project(cloud: SurfelCloud, camera: Camera, params: dict[str, Tensor] | None = None,
            near: float = NEAR, low_pass: float = LOW_PASS) -> ProjectedSurfel:
    """Project surfels into the image of ``camera``.

    ``params`` optionally overrides the cloud's tensors (used by the trainer to
    inject leaf tensors that require grad).
    """
    p = cloud.params() if params is None else params
    Rwc = torch.as_tensor(camera.rotation, dtype=DTYPE)
    twc = torch.as_tensor(camera.translation, dtype=DTYPE)
    x = p["position"]
    pc = x @ Rwc.T + twc
    z = pc[:, 2]
    valid = (z > near).detach().numpy()
    zs = torch.where(torch.as_tensor(valid), z, torch.ones_like(z))
    fx, fy = camera.fx, camera.fy
    u = fx * pc[:, 0] / zs + camera.cx
    v = fy * pc[:, 1] / zs + camera.cy

    # affine projection Jacobian; lateral offsets clamped like common splatting
    lim_x = 1.3 * 0.5 * camera.width / fx
    lim_y = 1.3 * 0.5 * camera.height / fy
    tx = (pc[:, 0] / zs).clamp(-lim_x, lim_x)
    ty = (pc[:, 1] / zs).clamp(-lim_y, lim_y)
    zero = torch.zeros_like(zs)
    J = torch.stack([
        torch.stack([fx / zs, zero, -fx * tx / zs], -1),
        torch.stack([zero, fy / zs, -fy * ty / zs], -1),
    ], -2)

    R = quaternion_to_matrix(p["rotation"])
    Rc = Rwc @ R
    scale = p["log_scale"].exp()
    A = J @ (Rc[:, :, :2] * scale[:, None, :])
    eye = torch.eye(2, dtype=DTYPE)
    cov2d = A @ A.transpose(1, 2) + low_pass * eye
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)

    # tangent-plane depth: pixel offsets -> tangent coordinates -> depth change
    Jex = torch.stack([
        torch.stack([fx / zs, zero, -fx * pc[:, 0] / zs ** 2], -1),
        torch.stack([zero, fy / zs, -fy * pc[:, 1] / zs ** 2], -1),
    ], -2)
    Jpr = Jex @ Rc[:, :, :2]
    jdet = Jpr[:, 0, 0] * Jpr[:, 1, 1] - Jpr[:, 0, 1] * Jpr[:, 1, 0]
    floor = 1e-12 * (fx * fy) / zs.detach() ** 2
    jdet = torch.where(jdet.abs() < floor, torch.where(jdet < 0, -floor, floor), jdet)
    Jinv = torch.stack([
        torch.stack([Jpr[:, 1, 1], -Jpr[:, 0, 1]], -1),
        torch.stack([-Jpr[:, 1, 0], Jpr[:, 0, 0]], -1),
    ], -2) / jdet[:, None, None]
    g = (Rc[:, 2, :2, None] * Jinv).sum(1)
    gmax = MAX_SLOPE * zs / (0.5 * (fx + fy))
    gnorm = g.norm(dim=-1)
    shrink = torch.where(gnorm > gmax, gmax / gnorm.clamp(min=1e-300), torch.ones_like(gnorm))
    g = g * shrink[:, None]

    n = Rc[:, :, 2]
    flip = ((n * pc).sum(-1) > 0).detach()
    n = torch.where(flip[:, None], -n, n)
    return ProjectedSurfel(
        means2d=torch.stack([u, v], -1), cov2d=cov2d, conic=conic, depth=z, depth_grad=g,
        rotation_cam=Rc, normal=n, opacity=torch.sigmoid(p["opacity_logit"]), color=p["color"],
        valid=valid,
    )


def per_pixel_depth(proj: ProjectedSurfel, i: int, u) -> Tensor:
    """First-order depth of surfel ``i`` along the ray through pixel position ``u``."""
    du = torch.as_tensor(np.asarray(u, dtype=np.float64)) - proj.means2d[i]
    return proj.depth[i] + (proj.depth_grad[i] * du).sum(-1)


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _touches(mx, my, A, B, C, cut, x0, x1, y0, y1):
    """Whether the footprint quadratic drops below ``cut`` on some pixel center of a tile.

    The quadratic is convex, so outside the rectangle its minimum lies on an edge.
    """
    if x0 <= mx <= x1 and y0 <= my <= y1:
        return True
    best = 1e300
    for k in range(2):
        dx = (x0 if k == 0 else x1) - mx
        dy = min(max(-B * dx / C, y0 - my), y1 - my)
        best = min(best, 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy)
        dy = (y0 if k == 0 else y1) - my
        dx = min(max(-B * dy / A, x0 - mx), x1 - mx)
        best = min(best, 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy)
    return best <= cut


@numba.njit(cache=True)
def _tile_hit(means2d, conic, cut, i, tx, ty, tile, width, height):
    return _touches(means2d[i, 0], means2d[i, 1], conic[i, 0], conic[i, 1], conic[i, 2], cut[i],
                    tx * tile + 0.5, min((tx + 1) * tile, width) - 0.5,
                    ty * tile + 0.5, min((ty + 1) * tile, height) - 0.5)


@numba.njit(cache=True)
def _bin_tiles(means2d, conic, opacity, valid, order, width, height, tile):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n = means2d.shape[0]
    rect = np.full((n, 4), -1, dtype=np.int64)
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    cut = np.zeros(n)
    for i in range(n):
        if not valid[i]:
            continue
        c = math.log(255.0 * opacity[i])
        if c <= 0.0:
            continue
        cut[i] = c + 1e-9
        A = conic[i, 0]
        B = conic[i, 1]
        C = conic[i, 2]
        det = A * C - B * B
        if det <= 0.0:
            continue
        ex = math.sqrt(2.0 * c * C / det) + 1e-6
        ey = math.sqrt(2.0 * c * A / det) + 1e-6
        j0 = max(int(math.ceil(means2d[i, 0] - ex - 0.5)), 0)
        j1 = min(int(math.floor(means2d[i, 0] + ex - 0.5)), width - 1)
        i0 = max(int(math.ceil(means2d[i, 1] - ey - 0.5)), 0)
        i1 = min(int(math.floor(means2d[i, 1] + ey - 0.5)), height - 1)
        if j0 > j1 or i0 > i1:
            continue
        rect[i, 0] = j0 // tile
        rect[i, 1] = j1 // tile
        rect[i, 2] = i0 // tile
        rect[i, 3] = i1 // tile
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                if _tile_hit(means2d, conic, cut, i, tx, ty, tile, width, height):
                    counts[ty * tiles_x + tx + 1] += 1
    starts = np.cumsum(counts)
    fill = starts[:-1].copy()
    ids = np.empty(starts[-1], dtype=np.int64)
    for k in range(n):
        i = order[k]
        if rect[i, 0] < 0:
            continue
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                if _tile_hit(means2d, conic, cut, i, tx, ty, tile, width, height):
                    t = ty * tiles_x + tx
                    ids[fill[t]] = i
                    fill[t] += 1
    return starts, ids, cut


@numba.njit(cache=True, parallel=True)
def _forward(means2d, conic, opacity, feats, dplane, starts, ids, cut, width, height, tile):
    tiles_x = (width + tile - 1) // tile
    n_tiles = starts.shape[0] - 1
    out = np.zeros((height, width, 8))
    t_final = np.ones((height, width))
    n_last = np.zeros((height, width), dtype=np.int64)
    for t in numba.prange(n_tiles):
        s = starts[t]
        e = starts[t + 1]
        ty = t // tiles_x
        tx = t % tiles_x
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                fxp = px + 0.5
                fyp = py + 0.5
                T = 1.0
                last = 0
                for k in range(s, e):
                    i = ids[k]
                    dx = fxp - means2d[i, 0]
                    dy = fyp - means2d[i, 1]
                    pw = 0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) + conic[i, 1] * dx * dy
                    if pw > cut[i]:
                        continue
                    a = opacity[i] * math.exp(-pw)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    w = a * T
                    out[py, px, 0] += w * feats[i, 0]
                    out[py, px, 1] += w * feats[i, 1]
                    out[py, px, 2] += w * feats[i, 2]
                    out[py, px, 3] += w * (dplane[i, 0] + dplane[i, 1] * dx + dplane[i, 2] * dy)
                    out[py, px, 4] += w * feats[i, 3]
                    out[py, px, 5] += w * feats[i, 4]
                    out[py, px, 6] += w * feats[i, 5]
                    out[py, px, 7] += w
                    T *= 1.0 - a
                    last = k - s + 1
                    if T < T_MIN:
                        break
                t_final[py, px] = T
                n_last[py, px] = last
    return out, t_final, n_last


@numba.njit(cache=True, parallel=True)
def _backward(grad_out, means2d, conic, opacity, feats, dplane, starts, ids, cut, t_final, n_last,
              width, height, tile):
    tiles_x = (width + tile - 1) // tile
    n_tiles = starts.shape[0] - 1
    partial = np.zeros((ids.shape[0], 15))
    for t in numba.prange(n_tiles):
        s = starts[t]
        ty = t // tiles_x
        tx = t % tiles_x
        f = np.empty(8)
        S = np.empty(8)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                last = n_last[py, px]
                if last == 0:
                    continue
                G = grad_out[py, px]
                fxp = px + 0.5
                fyp = py + 0.5
                T = t_final[py, px]
                for c in range(8):
                    S[c] = 0.0
                for k in range(s + last - 1, s - 1, -1):
                    i = ids[k]
                    dx = fxp - means2d[i, 0]
                    dy = fyp - means2d[i, 1]
                    A = conic[i, 0]
                    B = conic[i, 1]
                    C = conic[i, 2]
                    pw = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
                    if pw > cut[i]:
                        continue
                    g = math.exp(-pw)
                    a_raw = opacity[i] * g
                    a = a_raw if a_raw < ALPHA_MAX else ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    T = T / (1.0 - a)
                    w = a * T
                    f[0] = feats[i, 0]
                    f[1] = feats[i, 1]
                    f[2] = feats[i, 2]
                    f[3] = dplane[i, 0] + dplane[i, 1] * dx + dplane[i, 2] * dy
                    f[4] = feats[i, 3]
                    f[5] = feats[i, 4]
                    f[6] = feats[i, 5]
                    f[7] = 1.0
                    dL_da = 0.0
                    inv = 1.0 / (1.0 - a)
                    for c in range(8):
                        dL_da += G[c] * (T * f[c] - S[c] * inv)
                        S[c] += w * f[c]
                    row = partial[k]
                    row[6] += G[0] * w
                    row[7] += G[1] * w
                    row[8] += G[2] * w
                    row[9] += G[4] * w
                    row[10] += G[5] * w
                    row[11] += G[6] * w
                    dd = G[3] * w
                    row[12] += dd
                    row[13] += dd * dx
                    row[14] += dd * dy
                    row[0] -= dd * dplane[i, 1]
                    row[1] -= dd * dplane[i, 2]
                    if a_raw < ALPHA_MAX:
                        row[5] += dL_da * g
                        dpw = -a * dL_da
                        row[2] += dpw * 0.5 * dx * dx
                        row[3] += dpw * dx * dy
                        row[4] += dpw * 0.5 * dy * dy
                        row[0] -= dpw * (A * dx + B * dy)
                        row[1] -= dpw * (B * dx + C * dy)
    return partial


@numba.njit(cache=True)
def _reduce(partial, ids, n):
    out = np.zeros((n, 15))
    for k in range(ids.shape[0]):
        out[ids[k]] += partial[k]
    return out


@dataclass
class RasterState:
    """Contributor bookkeeping cached by the forward pass for the backward pass."""

    width: int
    height: int
    tile: int
    starts: np.ndarray = field(default=None)
    ids: np.ndarray = field(default=None)
    cut: np.ndarray = field(default=None)
    t_final: np.ndarray = field(default=None)
    n_last: np.ndarray = field(default=None)
    saved: tuple = field(default=())


def _np(t: Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)


def composite_forward(means2d, conic, opacity, feats, dplane, valid, depth, state: RasterState) -> np.ndarray:
    """Bin, sort and blend; fills ``state`` and returns the (H, W, 8) raw sums."""
    order = np.argsort(np.asarray(depth), kind="stable")
    args = tuple(np.ascontiguousarray(a, dtype=np.float64) for a in (means2d, conic, opacity, feats, dplane))
    starts, ids, cut = _bin_tiles(args[0], args[1], args[2], np.asarray(valid, dtype=np.bool_), order,
                             state.width, state.height, state.tile)
    out, t_final, n_last = _forward(*args, starts, ids, cut, state.width, state.height, state.tile)
    state.starts, state.ids, state.cut = starts, ids, cut
    state.t_final, state.n_last, state.saved = t_final, n_last, args
    return out


def composite_backward(state: RasterState, grad_out: np.ndarray) -> np.ndarray:
    """Per-surfel gradients (N, 15) for upstream gradients of the raw sums."""
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if grad_out.shape != (state.height, state.width, N_CH):
        raise ValueError(f"upstream gradient has shape {grad_out.shape}, "
                         f"expected {(state.height, state.width, N_CH)}")
    if state.ids is None:
        raise RuntimeError("backward called before forward")
    partial = _backward(grad_out, *state.saved, state.starts, state.ids, state.cut, state.t_final, state.n_last,
                        state.width, state.height, state.tile)
    return _reduce(partial, state.ids, state.saved[0].shape[0])


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conic, opacity, feats, dplane, valid, depth, state):
        out = composite_forward(_np(means2d), _np(conic), _np(opacity), _np(feats), _np(dplane),
                                valid, _np(depth), state)
        ctx.state = state
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        g = torch.from_numpy(composite_backward(ctx.state, grad_out.numpy()))
        return g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:12], g[:, 12:15], None, None, None


@dataclass
class RenderBuffers:
    """Per-pixel composited buffers of one view (camera-space normal and depth)."""

    color: Tensor    # (H, W, 3)
    depth: Tensor    # (H, W), alpha-normalized
    normal: Tensor   # (H, W, 3), unit on foreground
    alpha: Tensor    # (H, W) accumulated alpha 1 - T_{n+1}
    raw: Tensor      # (H, W, 8) unnormalized sums
    proj: ProjectedSurfel
    state: RasterState

    @property
    def foreground(self) -> Tensor:
        return self.alpha.detach() >= FOREGROUND

    @property
    def n_contrib(self) -> np.ndarray:
        return self.state.n_last


def composite_projected(proj: ProjectedSurfel, width: int, height: int, tile: int = TILE) -> RenderBuffers:
    state = RasterState(width, height, tile)
    feats = torch.cat([proj.color, proj.normal], -1)
    dplane = torch.cat([proj.depth[:, None], proj.depth_grad], -1)
    raw = _Composite.apply(proj.means2d, proj.conic, proj.opacity, feats, dplane, proj.valid,
                           proj.depth, state)
    acc = raw[..., 7]
    safe = torch.where(acc > 1e-10, acc, torch.ones_like(acc))
    depth = torch.where(acc > 1e-10, raw[..., 3] / safe, torch.zeros_like(acc))
    nsum = raw[..., 4:7]
    nlen = nsum.norm(dim=-1, keepdim=True)
    normal = torch.where(nlen > 1e-12, nsum / nlen.clamp(min=1e-12), torch.zeros_like(nsum))
    return RenderBuffers(raw[..., :3], depth, normal, acc, raw, proj, state)


def rasterize(cloud: SurfelCloud, camera: Camera, params: dict[str, Tensor] | None = None,
              tile: int = TILE) -> RenderBuffers:
    """Project and composite ``cloud`` for ``camera``."""
    proj = project(cloud, camera, params)
    return composite_projected(proj, camera.width, camera.height, tile)


def blend_pixel(alphas, colors, depths=None, normals=None):
    """Serial front-to-back blend of one pixel's sorted contributors.

    Returns (color, depth, normal, accumulated alpha) with depth and normal
    normalized by the accumulated alpha (normal also to unit length).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    colors = colors.reshape(len(alphas), colors.shape[-1] if colors.ndim > 1 else -1)
    depths = np.zeros(len(alphas)) if depths is None else np.asarray(depths, dtype=np.float64)
    normals = np.zeros((len(alphas), 3)) if normals is None else np.asarray(normals, dtype=np.float64)
    T = 1.0
    C = np.zeros(colors.shape[1])
    D = 0.0
    N = np.zeros(3)
    for a, c, d, n in zip(alphas, colors, depths, normals):
        if a < ALPHA_MIN:
            continue
        w = a * T
        C += w * c
        D += w * d
        N += w * n
        T *= 1.0 - a
        if T < T_MIN:
            break
    acc = 1.0 - T
    if acc <= 0:
        return C, 0.0, N, 0.0
    nl = np.linalg.norm(N)
    return C, D / acc, (N / nl if nl > 0 else N), acc
