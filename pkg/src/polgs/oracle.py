"""Reference polarized renderer for analytic scenes.

Radiance is integrated by Monte Carlo over the hemisphere with a GGX normal
distribution and Smith shadowing, the environment is unpolarized, and the
outgoing Stokes vector is assembled from explicit 4x4 Mueller matrices:
transmission or reflection in the plane of incidence followed by a rotation
into the camera frame. Fresnel coefficients come from Snell's law, so this
module shares no shading code with the engine.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scene import Camera


# ---------------------------------------------------------------------------
# environments


class ConstantEnvironment:
    def __init__(self, value=1.0):
        self.value = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)).copy()

    def __call__(self, dirs: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.value, dirs.shape[:-1] + (3,)).copy()


class ProceduralEnvironment:
    """Sky gradient (world +z up) plus a few colored exponential lobes."""

    def __init__(self, base=(0.15, 0.15, 0.18), sky=(0.35, 0.4, 0.5), lobes=None):
        self.base = np.asarray(base, dtype=np.float64)
        self.sky = np.asarray(sky, dtype=np.float64)
        if lobes is None:
            lobes = [
                ((0.5, -0.6, 0.62), 25.0, (2.5, 2.1, 1.6)),
                ((-0.7, 0.3, 0.2), 12.0, (0.6, 0.9, 1.4)),
                ((0.1, 0.8, -0.4), 8.0, (0.8, 0.5, 0.3)),
            ]
        self.lobes = [(np.asarray(d, dtype=np.float64) / np.linalg.norm(d), k, np.asarray(c, dtype=np.float64))
                      for d, k, c in lobes]

    def __call__(self, dirs: np.ndarray) -> np.ndarray:
        up = np.clip(dirs[..., 2:3], 0, 1)
        out = self.base + self.sky * up
        for d, k, c in self.lobes:
            out = out + c * np.exp(k * ((dirs @ d)[..., None] - 1))
        return out


# ---------------------------------------------------------------------------
# geometry


@dataclass
class SyntheticScene:
    """An analytic object under an unpolarized environment.

    ``shape`` is ``sphere`` (center, radius), ``plane`` (center, normal,
    half_size: a bounded square patch) or ``superellipsoid`` (center, radii,
    exponent). ``albedo`` is an RGB triple or a callable of world points.
    """

    shape: str = "sphere"
    params: dict = field(default_factory=dict)
    albedo: object = (0.5, 0.5, 0.5)
    eta: float = 1.5
    roughness: float = 0.15
    environment: Callable = field(default_factory=ProceduralEnvironment)
    units: str = "unit"

    def __post_init__(self):
        if self.shape not in ("sphere", "plane", "superellipsoid"):
            raise ValueError(f"unknown shape {self.shape!r}")
        defaults = {
            "sphere": {"center": (0.0, 0.0, 0.0), "radius": 1.0},
            "plane": {"center": (0.0, 0.0, 0.0), "normal": (0.0, 0.0, 1.0), "half_size": 1.0},
            "superellipsoid": {"center": (0.0, 0.0, 0.0), "radii": (1.0, 0.8, 0.7), "exponent": 0.6},
        }[self.shape]
        self.params = {**defaults, **self.params}

    def albedo_at(self, points: np.ndarray) -> np.ndarray:
        if callable(self.albedo):
            return np.asarray(self.albedo(points), dtype=np.float64)
        return np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), points.shape[:-1] + (3,))

    def bounding_radius(self) -> float:
        p = self.params
        if self.shape == "sphere":
            return float(p["radius"])
        if self.shape == "plane":
            return float(p["half_size"]) * np.sqrt(2)
        return float(np.linalg.norm(p["radii"]))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray):
        """First hits of rays ``origin + t dirs``; returns (hit, t, points, normals)."""
        return getattr(self, f"_intersect_{self.shape}")(np.asarray(origin, dtype=np.float64), dirs)

    def _intersect_sphere(self, o, d):
        c = np.asarray(self.params["center"], dtype=np.float64)
        r = float(self.params["radius"])
        oc = o - c
        b = d @ oc
        cc = oc @ oc - r * r
        disc = b * b - cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0))
        t = -b - sq
        t = np.where(t > 1e-9, t, -b + sq)
        hit &= t > 1e-9
        p = o + t[..., None] * d
        n = (p - c) / r
        return hit, t, p, n

    def _intersect_plane(self, o, d):
        c = np.asarray(self.params["center"], dtype=np.float64)
        nrm = np.asarray(self.params["normal"], dtype=np.float64)
        nrm = nrm / np.linalg.norm(nrm)
        h = float(self.params["half_size"])
        denom = d @ nrm
        safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
        t = ((c - o) @ nrm) / safe
        p = o + t[..., None] * d
        a = np.cross(nrm, [1.0, 0.0, 0.0] if abs(nrm[0]) < 0.9 else [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(nrm, a)
        rel = p - c
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(rel @ a) <= h) & (np.abs(rel @ b) <= h)
        n = np.broadcast_to(nrm, p.shape).copy()
        n[(d @ nrm) > 0] *= -1
        return hit, t, p, n

    def _superellipsoid_f(self, p):
        c = np.asarray(self.params["center"], dtype=np.float64)
        r = np.asarray(self.params["radii"], dtype=np.float64)
        e = float(self.params["exponent"])
        q = np.abs((p - c) / r)
        return (q ** (2 / e)).sum(-1) - 1

    def superellipsoid_normal(self, p):
        c = np.asarray(self.params["center"], dtype=np.float64)
        r = np.asarray(self.params["radii"], dtype=np.float64)
        e = float(self.params["exponent"])
        x = (p - c) / r
        g = (2 / e) * np.sign(x) * np.abs(x) ** (2 / e - 1) / r
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def _intersect_superellipsoid(self, o, d, steps=256, bisect=60):
        c = np.asarray(self.params["center"], dtype=np.float64)
        R = self.bounding_radius()
        oc = o - c
        b = d @ oc
        disc = b * b - (oc @ oc - R * R)
        inside = disc > 0
        sq = np.sqrt(np.where(inside, disc, 0))
        t0 = np.maximum(-b - sq, 0)
        t1 = -b + sq
        ts = t0[..., None] + (t1 - t0)[..., None] * np.linspace(0, 1, steps + 1)
        f = self._superellipsoid_f(o + ts[..., None] * d[..., None, :])
        neg = f <= 0
        first = np.argmax(neg, axis=-1)
        hit = inside & neg.any(-1) & (first > 0)
        k = np.maximum(first, 1)
        lo = np.take_along_axis(ts, (k - 1)[..., None], -1)[..., 0]
        hi = np.take_along_axis(ts, k[..., None], -1)[..., 0]
        for _ in range(bisect):
            mid = 0.5 * (lo + hi)
            fm = self._superellipsoid_f(o + mid[..., None] * d)
            lo = np.where(fm > 0, mid, lo)
            hi = np.where(fm > 0, hi, mid)
        t = 0.5 * (lo + hi)
        p = o + t[..., None] * d
        n = self.superellipsoid_normal(p)
        return hit, t, p, n


# ---------------------------------------------------------------------------
# polarimetric reflectance (Mueller form)


def snell_fresnel(theta_i, eta):
    """(R_s, R_p) from Snell's law in sine/tangent form; normal-incidence limit handled."""
    theta_i = np.asarray(theta_i, dtype=np.float64)
    theta_t = np.arcsin(np.sin(theta_i) / eta)
    small = theta_i < 1e-7
    ti = np.where(small, 1.0, theta_i)
    tt = np.where(small, 1.0, theta_t)
    rs = (np.sin(ti - tt) / np.sin(ti + tt)) ** 2
    rp = (np.tan(ti - tt) / np.tan(ti + tt)) ** 2
    r0 = ((eta - 1) / (eta + 1)) ** 2
    return np.where(small, r0, rs), np.where(small, r0, rp)


def mueller_rotation(angle):
    """Stokes frame rotation by ``angle`` (radians), (..., 4, 4)."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(2 * angle), np.sin(2 * angle)
    M = np.zeros(angle.shape + (4, 4))
    M[..., 0, 0] = 1
    M[..., 1, 1] = c
    M[..., 1, 2] = -s
    M[..., 2, 1] = s
    M[..., 2, 2] = c
    M[..., 3, 3] = 1
    return M


def mueller_fresnel(a_s, a_p):
    """Mueller matrix of an interface with s/p intensity coefficients ``a_s``, ``a_p``."""
    a_s = np.asarray(a_s, dtype=np.float64)
    a_p = np.asarray(a_p, dtype=np.float64)
    M = np.zeros(a_s.shape + (4, 4))
    plus, minus, cross = 0.5 * (a_s + a_p), 0.5 * (a_s - a_p), np.sqrt(a_s * a_p)
    M[..., 0, 0] = plus
    M[..., 0, 1] = minus
    M[..., 1, 0] = minus
    M[..., 1, 1] = plus
    M[..., 2, 2] = cross
    M[..., 3, 3] = cross
    return M


def point_stokes(L_d, L_s, normal, view, eta):
    """Outgoing Stokes (..., 3 rgb, 3) of one surface point from the integrated radiances.

    ``L_d`` is the diffuse radiance leaving the subsurface, ``L_s`` the
    Fresnel-free specular radiance; both unpolarized before the interface.
    """
    normal = np.asarray(normal, dtype=np.float64)
    view = np.asarray(view, dtype=np.float64)
    cos_v = np.sum(normal * view, -1)
    sin_v = np.linalg.norm(np.cross(normal, view), axis=-1)
    theta = np.arctan2(sin_v, cos_v)
    Rs, Rp = snell_fresnel(theta, eta)
    phi = np.arctan2(normal[..., 1], normal[..., 0])
    rot = mueller_rotation(-phi)
    M_d = rot @ mueller_fresnel(1 - Rs, 1 - Rp)
    M_s = rot @ mueller_fresnel(Rs, Rp)
    unpol = np.zeros(np.shape(L_d) + (4,))
    out = []
    for M, L in ((M_d, L_d), (M_s, L_s)):
        s_in = unpol.copy()
        s_in[..., 0] = L
        out.append(np.einsum("...ij,...cj->...ci", M, s_in))
    S = out[0] + out[1]
    return S[..., :3]


# ---------------------------------------------------------------------------
# Monte Carlo radiance


def _frame(n):
    a = np.where(np.abs(n[..., :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t = np.cross(n, a)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return t, b


def ggx_d(cos_h, alpha):
    a2 = alpha * alpha
    d = cos_h * cos_h * (a2 - 1) + 1
    return a2 / (np.pi * d * d)


def smith_g1(cos_x, alpha):
    cos_x = np.clip(cos_x, 1e-12, 1)
    tan2 = (1 - cos_x * cos_x) / (cos_x * cos_x)
    return 2 / (1 + np.sqrt(1 + alpha * alpha * tan2))


def integrate_radiance(scene: SyntheticScene, points, normals, view, samples: int, rng):
    """Monte Carlo (L_d, L_s) per point, each (P, 3).

    Diffuse: cosine-weighted hemisphere, integrand rho/pi L(w) (w.n) T+_i(w).
    Specular: GGX half-vector sampling, integrand L(w) D G / (4 n.v).
    """
    P = len(points)
    t, b = _frame(normals)
    cos_v = np.clip(np.sum(normals * view, -1), 1e-6, 1)
    alpha = scene.roughness
    env = scene.environment

    u1, u2 = rng.random((P, samples)), rng.random((P, samples))
    r = np.sqrt(u1)
    ph = 2 * np.pi * u2
    cz = np.sqrt(1 - u1)
    w = (r * np.cos(ph))[..., None] * t[:, None] + (r * np.sin(ph))[..., None] * b[:, None] + cz[..., None] * normals[:, None]
    Rs, Rp = snell_fresnel(np.arccos(np.clip(cz, -1, 1)), scene.eta)
    T_in = 1 - 0.5 * (Rs + Rp)
    L_d = scene.albedo_at(points) * (env(w) * T_in[..., None]).mean(1)

    u1, u2 = rng.random((P, samples)), rng.random((P, samples))
    tan2 = alpha * alpha * u1 / (1 - u1)
    ch = 1 / np.sqrt(1 + tan2)
    sh = np.sqrt(1 - ch * ch)
    ph = 2 * np.pi * u2
    h = (sh * np.cos(ph))[..., None] * t[:, None] + (sh * np.sin(ph))[..., None] * b[:, None] + ch[..., None] * normals[:, None]
    vh = np.sum(h * view[:, None], -1)
    wi = 2 * vh[..., None] * h - view[:, None]
    cos_i = np.sum(wi * normals[:, None], -1)
    ok = (cos_i > 0) & (vh > 0)
    G = smith_g1(cos_i, alpha) * smith_g1(cos_v, alpha)[:, None]
    weight = np.where(ok, G * vh / (cos_v[:, None] * ch), 0.0)
    L_s = (env(wi) * weight[..., None]).mean(1)
    return L_d, L_s


@dataclass
class OracleRender:
    stokes: np.ndarray       # (H, W, 3 rgb, 3) s0 s1 s2
    mask: np.ndarray         # (H, W) in {0, 1}
    normal: np.ndarray       # (H, W, 3) world-space, zero off-mask
    depth: np.ndarray        # (H, W) camera z, zero off-mask
    diffuse: np.ndarray      # (H, W, 3) integrated L_d
    specular: np.ndarray     # (H, W, 3) integrated L_s


def render_oracle(scene: SyntheticScene, camera: Camera, samples: int = 1024, seed: int = 0,
                  chunk: int = 256) -> OracleRender:
    H, W = camera.height, camera.width
    origin, dirs = camera.world_rays()
    hit, t, p, n = scene.intersect(origin, dirs)
    S = np.zeros((H, W, 3, 3))
    L_d = np.zeros((H, W, 3))
    L_s = np.zeros((H, W, 3))
    idx = np.flatnonzero(hit)
    rng = np.random.default_rng(seed)
    pf, nf = p.reshape(-1, 3)[idx], n.reshape(-1, 3)[idx]
    vf = -dirs.reshape(-1, 3)[idx]
    for k in range(0, len(idx), chunk):
        sl = slice(k, k + chunk)
        ld, ls = integrate_radiance(scene, pf[sl], nf[sl], vf[sl], samples, rng)
        L_d.reshape(-1, 3)[idx[sl]] = ld
        L_s.reshape(-1, 3)[idx[sl]] = ls
    R = camera.rotation
    n_cam = n.reshape(-1, 3)[idx] @ R.T
    v_cam = vf @ R.T
    S.reshape(-1, 3, 3)[idx] = point_stokes(L_d.reshape(-1, 3)[idx], L_s.reshape(-1, 3)[idx], n_cam, v_cam, scene.eta)
    mask = hit.astype(np.float64)
    pc = p @ R.T + camera.translation
    depth = np.where(hit, pc[..., 2], 0.0)
    normal = np.where(hit[..., None], n, 0.0)
    return OracleRender(S, mask, normal, depth, L_d, L_s)
