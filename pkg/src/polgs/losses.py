"""Training objective: Stokes photometric terms, mask BCE, opacity
binarization and depth-normal consistency, plus their weighting schedule.

Every reduction is a mean, so the weights do not depend on image size or
surfel count.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

log = logging.getLogger(__name__)

BCE_EPS = 1e-6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def lambda4_default(iteration: int) -> float:
    return 0.01 + 0.1 * (iteration / 15000)


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    lambda4: Callable[[int], float] = field(default=lambda4_default)


@dataclass
class LossReport:
    iteration: int
    total: float
    rgb: float
    pol: float
    mask: float
    opacity: float
    dn: float
    lambda4: float

    columns = ("iter", "total", "rgb", "pol", "mask", "opacity", "dn", "lambda4")

    def row(self) -> list:
        return [self.iteration, repr(self.total), repr(self.rgb), repr(self.pol), repr(self.mask),
                repr(self.opacity), repr(self.dn), repr(self.lambda4)]


def _same_shape(*arrays: Tensor) -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def l1(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def ssim_map(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """Per-pixel SSIM of (H, W, C) images with a separable Gaussian window.

    Borders use zero padding; the map has the input's spatial size.
    """
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    x = a.permute(2, 0, 1)[:, None]
    y = b.permute(2, 0, 1)[:, None]
    g = gaussian_window(dtype=a.dtype)
    pad = SSIM_WINDOW // 2

    def blur(t):
        t = F.conv2d(t, g.view(1, 1, 1, -1), padding=(0, pad))
        return F.conv2d(t, g.view(1, 1, -1, 1), padding=(pad, 0))

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    # written through d = x - y: 2 mx my = mx^2 + my^2 - md^2 and 2 sxy = sxx + syy - sdd,
    # so identical images give an exactly zero gradient instead of roundoff
    d = x - y
    md = blur(d)
    sdd = blur(d * d) - md * md
    lum = mx * mx + my * my + c1
    con = sxx + syy + c2
    s = (1 - md * md / lum) * (1 - sdd / con)
    return s[:, 0].permute(1, 2, 0)


def dssim(a: Tensor, b: Tensor) -> Tensor:
    return (1 - ssim_map(a, b).mean()) / 2


def loss_rgb(s0: Tensor, s0_hat: Tensor) -> Tensor:
    return 0.8 * l1(s0, s0_hat) + 0.2 * dssim(s0, s0_hat)


def loss_pol(s1: Tensor, s1_hat: Tensor, s2: Tensor, s2_hat: Tensor) -> Tensor:
    return l1(s1, s1_hat) + l1(s2, s2_hat)


def loss_mask(mask: Tensor, mask_hat: Tensor) -> Tensor:
    _same_shape(mask, mask_hat)
    for name, m in (("mask", mask), ("predicted mask", mask_hat)):
        if m.min() < 0 or m.max() > 1:
            raise ValueError(f"{name} values must lie in [0, 1]")
    p = mask_hat.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(mask * torch.log(p) + (1 - mask) * torch.log(1 - p)).mean()


def loss_opacity(opacity: Tensor) -> Tensor:
    return torch.exp(-(20 * (opacity - 0.5)) ** 2).mean()


def unproject_depth(depth: Tensor, camera) -> Tensor:
    """Camera-space points (H, W, 3) of a z-depth map."""
    rays = torch.as_tensor(camera.camera_rays(), dtype=depth.dtype)
    return rays * depth[..., None]


class _UnitNormalize(torch.autograd.Function):
    """c / |c| whose backward projects out the radial part explicitly.

    Same Jacobian as autograd's, but an upstream gradient parallel to the
    result maps to exactly zero rather than to cancellation roundoff.
    """

    @staticmethod
    def forward(ctx, c):
        ln = c.norm(dim=-1, keepdim=True)
        u = c / ln
        ctx.save_for_backward(u, ln)
        return u

    @staticmethod
    def backward(ctx, g):
        u, ln = ctx.saved_tensors
        return (g - (g * u).sum(-1, keepdim=True) * u) / ln


def depth_normals(depth: Tensor, camera) -> tuple[Tensor, Tensor]:
    """Central-difference normals of the unprojected depth and their validity mask.

    Normals face the camera (negative z for a frontoparallel plane). Border
    pixels are invalid.
    """
    P = unproject_depth(depth, camera)
    n = torch.zeros_like(P)
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    c = torch.cross(dy, dx, dim=-1)
    ln = c.norm(dim=-1, keepdim=True)
    ok = ln[..., 0] > 1e-20
    safe = torch.where(ok[..., None], c, torch.ones_like(c))
    n[1:-1, 1:-1] = torch.where(ok[..., None], _UnitNormalize.apply(safe), torch.zeros_like(c))
    valid = torch.zeros(depth.shape, dtype=torch.bool)
    valid[1:-1, 1:-1] = ok
    return n, valid


def loss_depth_normal(depth: Tensor, normal: Tensor, camera, foreground: Tensor) -> Tensor:
    """Mean of 1 - N_rendered . N(depth) over pixels whose 3x3 neighbourhood is foreground."""
    fg = foreground.to(torch.float64)[None, None]
    full = F.max_pool2d(1 - fg, 3, stride=1, padding=1)[0, 0] == 0
    full[0, :] = False
    full[-1, :] = False
    full[:, 0] = False
    full[:, -1] = False
    dn, valid = depth_normals(depth, camera)
    m = full & valid
    if not bool(m.any()):
        log.warning("depth-normal loss: no pixel has a full 3x3 foreground neighbourhood, returning 0")
        return depth.sum() * 0
    return (1 - (normal[m] * dn[m]).sum(-1)).mean()


def total_loss(terms: dict[str, Tensor], iteration: int, weights: LossWeights = LossWeights(),
               use_pol: bool = True) -> tuple[Tensor, LossReport]:
    """Weighted sum of the component losses; a disabled or missing ``pol`` contributes 0."""
    lam4 = weights.lambda4(iteration)
    zero = terms["rgb"] * 0
    pol = terms.get("pol", zero) if use_pol else zero
    total = (terms["rgb"] + weights.lambda1 * pol + weights.lambda2 * terms["mask"]
             + weights.lambda3 * terms["opacity"] + lam4 * terms["dn"])
    f = lambda t: float(t.detach()) if isinstance(t, Tensor) else float(t)
    report = LossReport(iteration, f(total), f(terms["rgb"]), f(pol), f(terms["mask"]),
                        f(terms["opacity"]), f(terms["dn"]), float(lam4))
    return total, report


class TrainingLog:
    """CSV writer with one row per iteration."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(LossReport.columns)

    def write(self, report: LossReport) -> None:
        self._w.writerow(report.row())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
