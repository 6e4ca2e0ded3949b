"""Optimization loop: Adam over surfel and cubemap parameters, warm-up gating
of the polarimetric and deferred-specular terms, densification and pruning."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import Tensor

from .dataset import PolarizedView
from .imageio import read_ply
from .losses import (LossReport, LossWeights, TrainingLog, loss_depth_normal, loss_mask, loss_opacity,
                     loss_pol, loss_rgb, total_loss)
from .render import StokesRender, render_stokes
from .scene import DTYPE, Camera, Cubemap, SurfelCloud, save_checkpoint
from .stokes import ETA

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.polgs"
LOG_NAME = "log.csv"
CONFIG_NAME = "config.json"


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    iterations: int = 15000
    warmup: int = 1000
    lr_position: float = 1.6e-4           # multiplied by the scene extent
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_cubemap: float = 1e-2
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 10000
    densify_grad_threshold: float = 2e-4  # mean screen gradient, NDC units
    prune_opacity: float = 5e-3
    percent_dense: float = 0.01           # clone/split scale bound, fraction of extent
    max_surfels: int = 200000
    init_surfels: int = 5000
    init_opacity: float = 0.1
    cubemap_init: float = 0.3
    seed: int = 0
    eta: float = ETA
    cubemap_res: int = 64
    use_pol: bool = True
    use_specular: bool = True
    threads: int = 1
    checkpoint_every: int = 0             # 0: only at the end

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError(f"warm-up ({self.warmup}) must be below the iteration count ({self.iterations})")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ValueError(f"learning rate {f.name} must be positive")
        if self.eta <= 1:
            raise ValueError("refractive index eta must exceed 1")
        if self.cubemap_res < 1 or self.threads < 1 or self.init_surfels < 1:
            raise ValueError("cubemap_res, threads and init_surfels must be at least 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict, base: TrainConfig | None = None) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**(base or cls()).to_dict(), **d}
        return cls(**merged)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, base: TrainConfig | None = None) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()), base)


# ---------------------------------------------------------------------------
# optimizer

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15


@dataclass
class OptimizerState:
    """Adam moments per parameter group; rows follow surfel order."""

    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> OptimizerState:
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})

    def select(self, keep: Tensor) -> None:
        for k in self.m:
            if k != "cubemap":
                self.m[k] = self.m[k][keep]
                self.v[k] = self.v[k][keep]

    def append_zeros(self, n: int) -> None:
        for k in self.m:
            if k != "cubemap":
                pad = torch.zeros((n,) + self.m[k].shape[1:], dtype=self.m[k].dtype)
                self.m[k] = torch.cat([self.m[k], pad])
                self.v[k] = torch.cat([self.v[k], pad])


def adam_update(params: dict[str, Tensor], grads: dict[str, Tensor], state: OptimizerState,
                lrs: dict[str, float]) -> None:
    b1, b2 = ADAM_BETAS
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            m = state.m[k].mul_(b1).add_(g, alpha=1 - b1)
            v = state.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
            p -= lrs[k] * (m / c1) / ((v / c2).sqrt() + ADAM_EPS)


def position_lr(config: TrainConfig, iteration: int, extent: float) -> float:
    t = min(max(iteration / config.iterations, 0.0), 1.0)
    lr = math.exp((1 - t) * math.log(config.lr_position) + t * math.log(config.lr_position_final))
    return lr * extent


def learning_rates(config: TrainConfig, iteration: int, extent: float) -> dict[str, float]:
    return {
        "position": position_lr(config, iteration, extent), "log_scale": config.lr_scale,
        "rotation": config.lr_rotation, "opacity_logit": config.lr_opacity,
        "color": config.lr_color, "cubemap": config.lr_cubemap,
    }


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    cloud: SurfelCloud
    cubemap: Cubemap
    optimizer: OptimizerState
    extent: float
    iteration: int = 0

    def params(self) -> dict[str, Tensor]:
        p = self.cloud.params()
        p["cubemap"] = self.cubemap.raw
        return p

    @classmethod
    def create(cls, cloud: SurfelCloud, cubemap: Cubemap, extent: float) -> TrainState:
        st = cls(cloud, cubemap, OptimizerState(), extent)
        st.optimizer = OptimizerState.for_params(st.params())
        return st


def scene_extent(cameras: list[Camera]) -> float:
    """Radius of the camera rig around its centroid (x 1.1)."""
    c = np.stack([cam.center for cam in cameras])
    return float(1.1 * np.linalg.norm(c - c.mean(0), axis=1).max())


def enforce_zero_order_sh(cloud: SurfelCloud) -> SurfelCloud:
    """Reduce per-surfel color to a single view-independent RGB triple."""
    c = cloud.color
    if c.ndim == 3:
        if c.shape[1] > 1:
            log.warning("dropping %d higher-order color coefficients per surfel", c.shape[1] - 1)
        c = c[:, 0]
    cloud.color = c.reshape(len(cloud), 3).clone()
    return cloud


# ---------------------------------------------------------------------------
# initialization


def _in_masks(points: np.ndarray, views: list[PolarizedView]) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    for v in views:
        cam = v.camera
        pc = points @ cam.rotation.T + cam.translation
        z = pc[:, 2]
        ok = z > 1e-6
        zs = np.where(ok, z, 1.0)
        u = cam.fx * pc[:, 0] / zs + cam.cx
        w = cam.fy * pc[:, 1] / zs + cam.cy
        j, i = np.floor(u).astype(np.int64), np.floor(w).astype(np.int64)
        ok &= (j >= 0) & (j < cam.width) & (i >= 0) & (i < cam.height)
        hit = np.zeros(len(points), dtype=bool)
        hit[ok] = v.mask[i[ok], j[ok]] > 0.5
        keep &= hit
    return keep


def carve_points(views: list[PolarizedView], n: int, rng: np.random.Generator, max_rounds: int = 200) -> np.ndarray:
    """Uniform samples inside the visual hull of the masks."""
    cams = [v.camera for v in views]
    centers = np.stack([c.center for c in cams])
    # least-squares point closest to all optical axes
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for c in cams:
        d = c.rotation[2]
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ c.center
    target = np.linalg.lstsq(A, b, rcond=None)[0]
    dist = np.linalg.norm(centers - target, axis=1).min()
    half = dist * max(0.5 * c.width / c.fx for c in cams)
    out, rounds = [], 0
    got = 0
    while got < n and rounds < max_rounds:
        cand = target + rng.uniform(-half, half, size=(max(4 * n, 1024), 3))
        keep = cand[_in_masks(cand, views)]
        out.append(keep)
        got += len(keep)
        rounds += 1
    pts = np.concatenate(out)[:n] if out else np.empty((0, 3))
    if len(pts) == 0:
        raise ValueError("mask-carved volume is empty; check masks and poses")
    return pts


def random_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def init_cloud(views: list[PolarizedView], config: TrainConfig, rng: np.random.Generator,
               points: np.ndarray | None = None, colors: np.ndarray | None = None) -> SurfelCloud:
    """Seed surfels from ``points`` if given, else uniformly inside the mask-carved volume."""
    if points is None:
        points = carve_points(views, config.init_surfels, rng)
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n >= 2:
        k = min(4, n)
        d, _ = cKDTree(points).query(points, k=k)
        spacing = np.sqrt((d[:, 1:] ** 2).mean(1)).clip(1e-7)
    else:
        spacing = np.full(n, 0.01)
    logit = math.log(config.init_opacity / (1 - config.init_opacity))
    if colors is None:
        colors = rng.uniform(0.2, 0.8, size=(n, 3))
    return SurfelCloud(points, np.log(np.repeat(spacing[:, None], 2, 1)), random_quaternions(n, rng),
                       np.full(n, logit), colors)


# ---------------------------------------------------------------------------
# one step


def warmup_active(config: TrainConfig, iteration: int) -> bool:
    return iteration < config.warmup


def compute_losses(render: StokesRender, view: PolarizedView, opacity: Tensor, iteration: int,
                   config: TrainConfig, weights: LossWeights = LossWeights()) -> tuple[Tensor, LossReport]:
    gt = torch.as_tensor(view.stokes, dtype=DTYPE)
    S = render.stokes
    buf = render.buffers
    pol_on = config.use_pol and not warmup_active(config, iteration)
    terms = {
        "rgb": loss_rgb(gt[..., 0], S[..., 0]),
        "mask": loss_mask(torch.as_tensor(view.mask, dtype=DTYPE), buf.alpha.clamp(0, 1)),
        "opacity": loss_opacity(opacity),
        "dn": loss_depth_normal(buf.depth, buf.normal, view.camera, buf.foreground),
    }
    if pol_on:
        terms["pol"] = loss_pol(gt[..., 1], S[..., 1], gt[..., 2], S[..., 2])
    return total_loss(terms, iteration, weights, use_pol=pol_on)


def render_view(state: TrainState, camera: Camera, config: TrainConfig, iteration: int,
                params: dict[str, Tensor] | None = None) -> StokesRender:
    deferred = config.use_specular and not warmup_active(config, iteration)
    cube = None if params is None else params["cubemap"]
    return render_stokes(state.cloud, state.cubemap, camera, deferred=deferred, eta=config.eta,
                         params=params, cube_raw=cube)


def train_step(state: TrainState, view: PolarizedView, config: TrainConfig, iteration: int,
               weights: LossWeights = LossWeights()) -> LossReport:
    """One forward/backward/Adam update on ``view``; mutates ``state``."""
    if iteration >= config.iterations:
        raise ValueError(f"iteration {iteration} is past the configured total {config.iterations}")
    params = {k: p.detach().requires_grad_(True) for k, p in state.params().items()}
    render = render_view(state, view.camera, config, iteration, params)
    means2d = render.buffers.proj.means2d
    means2d.retain_grad()
    total, report = compute_losses(render, view, torch.sigmoid(params["opacity_logit"]), iteration,
                                   config, weights)
    if not math.isfinite(report.total):
        bad = [k for k, p in params.items() if not torch.isfinite(p).all()]
        where = f" (non-finite parameter group {', '.join(repr(k) for k in bad)})" if bad else ""
        raise NumericalError(f"iteration {iteration}: non-finite loss on view {view.name}{where}")
    total.backward()
    grads = {}
    for k, p in params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NumericalError(f"iteration {iteration}: non-finite gradient in parameter group '{k}'")
        grads[k] = g

    # screen-space gradient statistics for densification (NDC units)
    if means2d.grad is not None:
        cam = view.camera
        g2 = means2d.grad * torch.tensor([0.5 * cam.width, 0.5 * cam.height], dtype=DTYPE)
        seen = torch.as_tensor(render.buffers.proj.valid) & (g2.abs().sum(-1) > 0)
        state.cloud.grad_accum += torch.where(seen, g2.norm(dim=-1), torch.zeros(()))
        state.cloud.grad_count += seen.to(DTYPE)

    adam_update(state.params(), grads, state.optimizer, learning_rates(config, iteration, state.extent))
    with torch.no_grad():
        state.cloud.normalize_rotations()
        state.cloud.color.clamp_(min=0)
    state.iteration = iteration + 1
    return report


# ---------------------------------------------------------------------------
# densification


def densify_and_prune(state: TrainState, config: TrainConfig, rng: np.random.Generator) -> dict[str, int]:
    """Clone small / split large high-gradient surfels, then prune transparent ones."""
    cloud = state.cloud
    n0 = len(cloud)
    mean_grad = cloud.grad_accum / cloud.grad_count.clamp(min=1)
    hot = (mean_grad >= config.densify_grad_threshold).numpy()
    big = (cloud.scale.max(-1).values > config.percent_dense * state.extent).numpy()
    room = max(config.max_surfels - n0, 0)
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)
    if len(clone_idx) + len(split_idx) > room:
        # keep the strongest candidates under the cap (stable order on ties)
        cand = np.concatenate([clone_idx, split_idx])
        order = np.argsort(-mean_grad.numpy()[cand], kind="stable")[:room]
        chosen = np.zeros(n0, dtype=bool)
        chosen[cand[order]] = True
        clone_idx = clone_idx[chosen[clone_idx]]
        split_idx = split_idx[chosen[split_idx]]

    p = {k: v.detach() for k, v in cloud.params().items()}
    new = {k: [] for k in p}
    for k in p:
        new[k].append(p[k][torch.as_tensor(clone_idx, dtype=torch.long)])
    if len(split_idx):
        si = torch.as_tensor(split_idx, dtype=torch.long)
        from .scene import quaternion_to_matrix
        R = quaternion_to_matrix(p["rotation"][si])
        s = p["log_scale"][si].exp()
        for _ in range(2):
            z = torch.as_tensor(rng.normal(size=(len(si), 2)), dtype=DTYPE) * s
            offs = (R[:, :, :2] @ z[..., None])[..., 0]
            new["position"].append(p["position"][si] + offs)
            new["log_scale"].append(p["log_scale"][si] - math.log(1.6))
            for k in ("rotation", "opacity_logit", "color"):
                new[k].append(p[k][si])
    added = {k: torch.cat(v) for k, v in new.items()}
    n_new = added["position"].shape[0]

    keep_old = np.ones(n0, dtype=bool)
    keep_old[split_idx] = False
    merged = {k: torch.cat([p[k][torch.as_tensor(keep_old)], added[k]]) for k in p}
    state.optimizer.select(torch.as_tensor(keep_old))
    state.optimizer.append_zeros(n_new)

    opacity = torch.sigmoid(merged["opacity_logit"])
    keep = (opacity >= config.prune_opacity).numpy()
    pruned = int((~keep).sum())
    if not keep.any():
        log.warning("pruning would remove every surfel; skipping pruning")
        keep[:] = True
        pruned = 0
    cloud.set_params({k: v[torch.as_tensor(keep)].clone() for k, v in merged.items()})
    state.optimizer.select(torch.as_tensor(keep))
    cloud.reset_stats()
    return {"cloned": len(clone_idx), "split": len(split_idx), "pruned": pruned, "total": len(cloud)}


def should_densify(config: TrainConfig, iteration: int) -> bool:
    it = iteration + 1
    return config.densify_from <= it <= config.densify_until and it % config.densify_interval == 0


# ---------------------------------------------------------------------------
# full run


@dataclass
class TrainResult:
    state: TrainState
    reports: list[LossReport]
    seconds: float

    @property
    def cloud(self) -> SurfelCloud:
        return self.state.cloud

    @property
    def cubemap(self) -> Cubemap:
        return self.state.cubemap


def set_threads(n: int) -> None:
    torch.set_num_threads(n)
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def view_schedule(n_views: int, iterations: int, rng: np.random.Generator) -> list[int]:
    order = []
    while len(order) < iterations:
        order.extend(rng.permutation(n_views).tolist())
    return order[:iterations]


def load_init_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    ply = read_ply(path)
    return ply["points"], ply.get("colors")


def train(views: list[PolarizedView], config: TrainConfig, out_dir=None, init_points=None,
          progress: Callable[[LossReport], None] | None = None, weights: LossWeights = LossWeights()) -> TrainResult:
    """Optimize a surfel cloud and cubemap for ``views``.

    With ``out_dir`` the config, a CSV loss log and the final checkpoint are written there.
    """
    config.validate()
    set_threads(config.threads)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    pts = cols = None
    if init_points is not None:
        pts, cols = init_points if isinstance(init_points, tuple) else load_init_points(init_points)
    cloud = enforce_zero_order_sh(init_cloud(views, config, rng, pts, cols))
    state = TrainState.create(cloud, Cubemap.constant(config.cubemap_init, config.cubemap_res),
                              scene_extent([v.camera for v in views]))
    schedule = view_schedule(len(views), config.iterations, rng)

    out = Path(out_dir) if out_dir is not None else None
    tlog = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / CONFIG_NAME)
        tlog = TrainingLog(out / LOG_NAME)
    reports = []
    t0 = time.perf_counter()
    try:
        for it in range(config.iterations):
            rep = train_step(state, views[schedule[it]], config, it, weights)
            reports.append(rep)
            if tlog is not None:
                tlog.write(rep)
            if progress is not None:
                progress(rep)
            if should_densify(config, it):
                info = densify_and_prune(state, config, rng)
                log.info("iteration %d: densify %s", it + 1, info)
            if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                save_checkpoint(out / CHECKPOINT_NAME, state.cloud, state.cubemap, it + 1, _meta(config))
    finally:
        if tlog is not None:
            tlog.close()
    if out is not None:
        save_checkpoint(out / CHECKPOINT_NAME, state.cloud, state.cubemap, state.iteration, _meta(config))
    return TrainResult(state, reports, time.perf_counter() - t0)


def _meta(config: TrainConfig) -> dict:
    return {"eta": config.eta, "use_pol": config.use_pol, "use_specular": config.use_specular}
