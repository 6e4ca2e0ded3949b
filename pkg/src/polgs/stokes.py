"""Linear-polarization algebra: Stokes vectors from polarizer quads, Fresnel
terms and the diffuse + specular Stokes composition used for shading.

Conventions: the camera x axis is the 0 degree polarizer axis; azimuths are
``atan2(n_y, n_x)`` in camera coordinates; the +/- Fresnel terms are half-sum
and half-difference of the s and p intensity coefficients; transmission is
energy transmission ``1 - R``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

ETA = 1.5
POLARIZER_ANGLES = (0, 45, 90, 135)
GRAZING = math.pi / 2 - 1e-6


def _lib(x):
    return torch if isinstance(x, Tensor) else np


def stokes_from_quad(i0, i45, i90, i135):
    """Stokes (..., 3) as [s0, s1, s2] from four polarizer images; s3 is always 0."""
    xp = _lib(i0)
    if xp is np:
        i0, i45, i90, i135 = (np.asarray(a, dtype=np.float64) for a in (i0, i45, i90, i135))
    shapes = {tuple(a.shape) for a in (i0, i45, i90, i135)}
    if len(shapes) != 1:
        raise ValueError(f"polarizer images differ in shape: {sorted(shapes)}")
    return xp.stack([0.5 * (i0 + i45 + i90 + i135), i0 - i90, i45 - i135], -1)


def quad_from_stokes(S, angles=POLARIZER_ANGLES):
    """Malus relation I_phi = (s0 + s1 cos 2phi + s2 sin 2phi) / 2 for each angle."""
    out = []
    for deg in angles:
        c = math.cos(math.radians(2 * deg))
        s = math.sin(math.radians(2 * deg))
        # exact zeros at the four canonical angles keep the round trip exact
        c = round(c) if abs(c - round(c)) < 1e-12 else c
        s = round(s) if abs(s - round(s)) < 1e-12 else s
        out.append(0.5 * (S[..., 0] + c * S[..., 1] + s * S[..., 2]))
    return tuple(out)


def dop(S, eps: float = 1e-12):
    """Degree of linear polarization sqrt(s1^2 + s2^2) / s0."""
    xp = _lib(S)
    lin = xp.sqrt(S[..., 1] ** 2 + S[..., 2] ** 2)
    s0 = np.maximum(S[..., 0], eps) if xp is np else S[..., 0].clamp(min=eps)
    return lin / s0


def aop(S):
    """Angle of linear polarization, 0.5 * atan2(-s2, s1), radians."""
    xp = _lib(S)
    return 0.5 * xp.arctan2(-S[..., 2], S[..., 1]) if xp is np else 0.5 * torch.atan2(-S[..., 2], S[..., 1])


@dataclass
class FresnelTerms:
    """Half-sum (plus) and half-difference (minus) intensity coefficients."""

    r_plus: object
    r_minus: object
    t_plus: object
    t_minus: object
    r_s: object
    r_p: object


def fresnel_cos(cos_i, eta: float = ETA) -> FresnelTerms:
    """Fresnel terms from the cosine of the incidence angle (air -> dielectric).

    Works on floats, numpy arrays and tensors; smooth at normal incidence.
    """
    xp = _lib(cos_i)
    sin2_t = (1 - cos_i * cos_i) / (eta * eta)
    cos_t = xp.sqrt(1 - sin2_t)
    rs = (cos_i - eta * cos_t) / (cos_i + eta * cos_t)
    rp = (eta * cos_i - cos_t) / (eta * cos_i + cos_t)
    Rs = rs * rs
    Rp = rp * rp
    return FresnelTerms(
        r_plus=0.5 * (Rs + Rp), r_minus=0.5 * (Rs - Rp),
        t_plus=0.5 * ((1 - Rs) + (1 - Rp)), t_minus=0.5 * ((1 - Rs) - (1 - Rp)),
        r_s=Rs, r_p=Rp,
    )


def fresnel(theta, eta: float = ETA) -> FresnelTerms:
    """Fresnel terms at incidence angle ``theta`` (radians); grazing angles clamp."""
    if eta <= 1:
        raise ValueError("refractive index must exceed 1")
    xp = _lib(theta)
    theta = xp.minimum(theta, GRAZING) if xp is np else theta.clamp(max=GRAZING)
    if xp is np:
        theta = np.maximum(theta, 0.0)
    return fresnel_cos(xp.cos(theta), eta)


def azimuth_of_normal(n, eps: float = 1e-8):
    """Azimuth atan2(n_y, n_x) of camera-space normals and a degenerate flag.

    Returns (phi, degenerate); degenerate pixels (normal along the optical
    axis) get phi = 0.
    """
    xp = _lib(n)
    degenerate = (xp.abs(n[..., 0]) < eps) & (xp.abs(n[..., 1]) < eps)
    phi = xp.arctan2(n[..., 1], n[..., 0]) if xp is np else torch.atan2(n[..., 1], n[..., 0])
    zero = xp.zeros_like(phi)
    return xp.where(degenerate, zero, phi), degenerate


def double_azimuth(n, eps: float = 1e-8):
    """(cos 2phi, sin 2phi) of the normal azimuth without evaluating atan2.

    Smooth everywhere except the optical axis, where (1, 0) is returned.
    """
    xp = _lib(n)
    nx, ny = n[..., 0], n[..., 1]
    r2 = nx * nx + ny * ny
    degenerate = r2 < eps * eps
    safe = xp.where(degenerate, xp.ones_like(r2), r2)
    c = xp.where(degenerate, xp.ones_like(r2), (nx * nx - ny * ny) / safe)
    s = xp.where(degenerate, xp.zeros_like(r2), 2 * nx * ny / safe)
    return c, s


def reflect(v, n):
    """Mirror direction 2 (v.n) n - v."""
    return 2 * (v * n).sum(-1, keepdims=True) * n - v if _lib(v) is np else \
        2 * (v * n).sum(-1, keepdim=True) * n - v


def compose_stokes(diffuse, specular, normal, view, eta: float = ETA):
    """Diffuse + specular Stokes [s0, s1, s2] per color channel.

    ``diffuse`` (C) and ``specular`` (L_r) are (..., 3) RGB; ``normal`` and
    ``view`` are (..., 3) unit camera-space vectors, ``view`` pointing toward
    the camera. Returns (..., 3 channels, 3 Stokes) and uses the normal azimuth
    for both lobes.
    """
    xp = _lib(normal)
    cos_i = (normal * view).sum(-1)
    cos_i = xp.clip(cos_i, 0.0, 1.0) if xp is np else cos_i.clamp(0.0, 1.0)
    fr = fresnel_cos(cos_i, eta)
    c2, s2 = double_azimuth(normal)
    d = [fr.t_plus, fr.t_minus * c2, -fr.t_minus * s2]
    s = [fr.r_plus, fr.r_minus * c2, -fr.r_minus * s2]
    return xp.stack([diffuse * d[k][..., None] + specular * s[k][..., None] for k in range(3)], -1)


def compose_stokes_parts(diffuse, specular, normal, view, eta: float = ETA):
    """Like :func:`compose_stokes` but returns the diffuse and specular Stokes separately."""
    zero = diffuse * 0
    return compose_stokes(diffuse, zero, normal, view, eta), compose_stokes(zero, specular, normal, view, eta)
