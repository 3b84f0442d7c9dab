"""Single-subject reconstruction: geometric cloud initialisation from four
equidistant views, then Adam refinement of every splat parameter against
the multi-view reference images."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import objective as obj
from .errors import ContractViolation, OptimizationAborted
from .geometry import CameraPose, pixel_rays
from .objective import LossWeights
from .rasterizer import render, render_backward
from .splats import COLOR, OPACITY, POSITION, ROTATION, SCALE, GaussianCloud, logit

log = logging.getLogger(__name__)

DEFAULT_GRID = (128, 128)
MATTE_THRESHOLD = 0.05
FOREGROUND_OPACITY = 0.8
BACKGROUND_OPACITY = 1e-3
COLOR_CLIP = 0.01

# per-parameter-group multipliers on the base learning rate
DEFAULT_LR_SCALES = {"color": 1.0, "scale": 0.5, "position": 0.1, "rotation": 1.0, "opacity": 2.0}
_GROUPS = {"color": COLOR, "scale": SCALE, "position": POSITION, "rotation": ROTATION,
           "opacity": slice(OPACITY, OPACITY + 1)}


@dataclass
class MultiViewSet:
    images: np.ndarray
    poses: list
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or len(self.images) != len(self.poses):
            raise ContractViolation(
                f"{len(self.poses)} poses for image stack of shape {self.images.shape}")
        if not np.all(np.isfinite(self.images)):
            raise ContractViolation("reference images contain non-finite values")
        for im, p in zip(self.images, self.poses):
            if im.shape[:2] != (p.height, p.width):
                raise ContractViolation(
                    f"image {im.shape[:2]} does not match camera {p.height}x{p.width}")

    def __len__(self):
        return len(self.poses)

    def subset(self, idx) -> "MultiViewSet":
        idx = list(idx)
        return MultiViewSet(self.images[idx], [self.poses[i] for i in idx], self.background)


@dataclass
class OptimConfig:
    iterations: int = 2000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lr_schedule: str = "cosine"
    lr_final_fraction: float = 0.05
    lr_scales: dict = field(default_factory=lambda: dict(DEFAULT_LR_SCALES))
    eval_every: int = 100
    held_out_views: tuple = ()
    views_per_iteration: Optional[int] = None
    seed: int = 42

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractViolation(f"iterations must be >= 1, got {self.iterations}")
        if not self.learning_rate > 0:
            raise ContractViolation(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ContractViolation(f"unknown lr schedule {self.lr_schedule!r}")
        self.held_out_views = tuple(sorted(int(i) for i in self.held_out_views))
        unknown = set(self.lr_scales) - set(_GROUPS)
        if unknown:
            raise ContractViolation(f"unknown lr_scales groups {sorted(unknown)}")
        # partial overrides keep the defaults for the other groups
        self.lr_scales = {**DEFAULT_LR_SCALES, **self.lr_scales}

    def lr_at(self, it: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        lo = self.lr_final_fraction
        return self.learning_rate * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * it / self.iterations)))


@dataclass
class OptimReport:
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = False) -> dict:
        d = {"config": self.config, "notes": self.notes, "history": self.history,
             "checkpoints": self.checkpoints}
        if timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d


# ------------------------------------------------------------------- init

def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel aligned bilinear resize of an (H, W, C) image."""
    H, W = image.shape[:2]
    if (H, W) == (height, width):
        return image.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(H, height)
    x0, x1, fx = axis(W, width)
    rows = image[y0] * (1 - fy)[:, None, None] + image[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def check_equidistant(poses: Sequence[CameraPose]) -> None:
    if len(poses) != 4:
        raise ContractViolation(f"need exactly 4 input views, got {len(poses)}")
    e0 = poses[0].elevation
    if any(abs(p.elevation - e0) > 1e-6 for p in poses):
        raise ContractViolation("input views must share one elevation")
    rel = sorted(round((p.azimuth - poses[0].azimuth) % 360.0, 6) % 360.0 for p in poses)
    if rel != [0.0, 90.0, 180.0, 270.0]:
        raise ContractViolation(f"input azimuths are not equidistant: {[p.azimuth for p in poses]}")


def init_cloud(images, poses: Sequence[CameraPose], grid=DEFAULT_GRID,
               background=(1.0, 1.0, 1.0), notes: Optional[list] = None) -> GaussianCloud:
    """One Gaussian per grid pixel of each of the 4 input views.

    Each splat sits where its pixel ray first meets the origin-centred unit
    sphere (or at the camera radius along the ray when it misses), takes the
    pixel colour, an isotropic scale of half the local ray spacing, identity
    rotation, and an opacity from a foreground matte against `background`.
    """
    check_equidistant(poses)
    images = np.asarray(images, dtype=np.float64)
    gh, gw = int(grid[0]), int(grid[1])
    bg = np.asarray(background, dtype=np.float64)
    blocks = []
    for image, pose in zip(images, poses):
        if image.shape[:2] != (gh, gw):
            if notes is not None:
                notes.append(f"resampled {image.shape[1]}x{image.shape[0]} input to {gw}x{gh}")
            image = resize_bilinear(image, gh, gw)
        gpose = pose.resized(gw, gh)
        o, d = pixel_rays(gpose)
        od = np.sum(o * d, axis=-1)
        disc = od ** 2 - (np.sum(o * o, axis=-1) - 1.0)
        hit = disc >= 0
        t = np.where(hit, -od - np.sqrt(np.where(hit, disc, 0.0)), gpose.radius)
        pos = o + t[..., None] * d
        pixel_angle = 2.0 * math.tan(math.radians(gpose.fov_y) / 2.0) / gh
        sigma = 0.5 * t * pixel_angle
        fg = np.max(np.abs(image - bg), axis=-1) > MATTE_THRESHOLD
        p = np.empty((gh, gw, 14))
        p[..., COLOR] = logit(np.clip(image, COLOR_CLIP, 1 - COLOR_CLIP))
        p[..., SCALE] = np.log(sigma)[..., None]
        p[..., POSITION] = pos
        p[..., ROTATION] = (1.0, 0.0, 0.0, 0.0)
        p[..., OPACITY] = np.where(fg, logit(FOREGROUND_OPACITY), logit(BACKGROUND_OPACITY))
        blocks.append(p.reshape(-1, 14))
    return GaussianCloud(np.concatenate(blocks), layout_hint=(4, gh, gw))


# --------------------------------------------------------------- optimise

def _evaluate(cloud, refs: MultiViewSet, idx, weights, embedder, id_ref):
    if not idx:
        return {}
    pred = np.stack([render(cloud, refs.poses[i], refs.background).color for i in idx])
    ref = refs.images[idx]
    total, terms = obj.total_loss(pred, ref, embedder, weights, id_ref=id_ref)
    e = embedder or obj.default_embedder()
    return {
        "psnr": float(np.mean([obj.psnr(p, r) for p, r in zip(pred, ref)])),
        "mse": terms["mse"],
        "perceptual_proxy": terms["perceptual_proxy"],
        "id_loss": terms["id_loss"],
        "csim": float(np.mean([obj.csim(p, r, e) for p, r in zip(pred, ref)])),
        "total": total,
    }


def _descent_step(cloud, refs, train_idx, weights):
    """Loss mse + lambda_p * perceptual over the views and its parameter gradient."""
    grad = np.zeros_like(cloud.params)
    m_sum = p_sum = 0.0
    n = len(train_idx)
    for i in train_idx:
        view = render(cloud, refs.poses[i], refs.background)
        ref = refs.images[i]
        m_sum += obj.mse(view.color, ref)
        g_img = obj.mse_grad(view.color, ref)
        if weights.lambda_p > 0:
            p_sum += obj.perceptual_proxy(view.color, ref)
            g_img = g_img + weights.lambda_p * obj.perceptual_proxy_grad(view.color, ref)
        grad += render_backward(view, g_img / n)
    m, p = m_sum / n, p_sum / n
    return m + weights.lambda_p * p, m, p, grad


def optimize_subject(cloud: GaussianCloud, refs: MultiViewSet, cfg: OptimConfig = OptimConfig(),
                     weights: LossWeights = LossWeights(), embedder=None,
                     id_ref_index: int = 0,
                     on_gradient: Optional[Callable] = None) -> tuple[GaussianCloud, OptimReport]:
    """Adam on all pre-activation channels; held-out views never enter the loss.

    The descent direction uses mse + lambda_p * perceptual; the full combined
    loss including the identity term (against reference view `id_ref_index`)
    is reported at every checkpoint.  `on_gradient(iteration, view_indices,
    grad)` is called after each gradient evaluation.
    """
    if len(refs) == 0:
        raise ContractViolation("optimisation needs at least one reference view")
    held = set(cfg.held_out_views)
    if any(i < 0 or i >= len(refs) for i in held):
        raise ContractViolation(f"held-out indices {sorted(held)} outside [0, {len(refs)})")
    train = [i for i in range(len(refs)) if i not in held]
    if not train:
        raise ContractViolation("every view is held out")
    held_idx = sorted(held)
    id_ref = refs.images[id_ref_index]

    t0 = time.perf_counter()
    cloud = cloud.copy()
    report = OptimReport(config=asdict(cfg))
    rng = np.random.default_rng(cfg.seed)
    m = np.zeros_like(cloud.params)
    v = np.zeros_like(cloud.params)
    lr_mult = np.ones(14)
    for name, sl in _GROUPS.items():
        lr_mult[sl] = cfg.lr_scales.get(name, 1.0)

    def checkpoint(it):
        report.checkpoints.append({
            "iteration": it,
            "train": _evaluate(cloud, refs, train, weights, embedder, id_ref),
            "held_out": _evaluate(cloud, refs, held_idx, weights, embedder, id_ref),
        })

    checkpoint(0)
    for it in range(cfg.iterations):
        if cfg.views_per_iteration and cfg.views_per_iteration < len(train):
            batch = sorted(rng.choice(train, cfg.views_per_iteration, replace=False).tolist())
        else:
            batch = train
        loss, l_mse, l_perc, grad = _descent_step(cloud, refs, batch, weights)
        if on_gradient is not None:
            on_gradient(it, batch, grad)
        if not np.all(np.isfinite(grad)):
            report.wall_clock_s = time.perf_counter() - t0
            raise OptimizationAborted(f"non-finite gradient at iteration {it}", it)
        lr = cfg.lr_at(it)
        report.history.append({"iteration": it, "loss": loss, "mse": l_mse,
                               "perceptual_proxy": l_perc, "lr": lr})
        m = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
        mhat = m / (1 - cfg.beta1 ** (it + 1))
        vhat = v / (1 - cfg.beta2 ** (it + 1))
        cloud.params -= lr * lr_mult * mhat / (np.sqrt(vhat) + cfg.eps)
        cloud.renormalize()
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations:
            checkpoint(it + 1)
            log.info("iter %d loss %.6g held-out psnr %s", it + 1, loss,
                     report.checkpoints[-1]["held_out"].get("psnr"))
    report.wall_clock_s = time.perf_counter() - t0
    return cloud, report


def input_view_indices(n_views: int) -> list[int]:
    if n_views < 8 or n_views % 4:
        raise ContractViolation(f"need N_s >= 8 and divisible by 4, got {n_views}")
    q = n_views // 4
    return [0, q, 2 * q, 3 * q]


def reconstruct(refs: MultiViewSet, cfg: OptimConfig = OptimConfig(),
                weights: LossWeights = LossWeights(), grid=DEFAULT_GRID, embedder=None,
                ply_path=None) -> tuple[GaussianCloud, OptimReport]:
    """init_cloud on the frontal/right/posterior/left views, then optimize_subject."""
    idx = input_view_indices(len(refs))
    leaked = sorted(set(idx) & set(cfg.held_out_views))
    if leaked:
        raise ContractViolation(f"input views {leaked} cannot also be held out")
    notes: list = []
    cloud = init_cloud(refs.images[idx], [refs.poses[i] for i in idx], grid, refs.background,
                       notes)
    cloud, report = optimize_subject(cloud, refs, cfg, weights, embedder)
    report.notes = [f"input views {idx}"] + notes + report.notes
    if ply_path is not None:
        from .splats import export_ply
        export_ply(cloud, ply_path)
    return cloud, report
