"""Differentiable tile-based Gaussian splat renderer.

Forward: EWA projection of every Gaussian, one global stable depth sort
(ties broken by Gaussian index), 16x16 tile binning by the 3-sigma screen
footprint, then per-pixel front-to-back compositing

    C = sum_i c_i a_i T_i + T_final * background,   T_i = prod_{j<i} (1 - a_j)

with a_i = opacity_i * exp(-0.5 d^T cov2d^-1 d) clamped to 0.999 and early
termination once transmittance drops below 1e-4.

Backward: exact gradient of <grad_color, C> with respect to the 14
pre-activation channels of every Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import ContractViolation
from .geometry import CameraPose, view_matrix
from .splats import Gaussian, GaussianCloud, N_CHANNELS

NEAR = 0.05
BLUR = 0.3
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class Projection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass
class RenderState:
    params: np.ndarray
    pose: CameraPose
    background: np.ndarray
    Rwc: np.ndarray
    tcw: np.ndarray
    intr: tuple
    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    status: np.ndarray
    ranges: np.ndarray
    point_list: np.ndarray
    final_T: np.ndarray
    n_contrib: np.ndarray


@dataclass
class RenderedView:
    color: np.ndarray
    alpha: np.ndarray
    stats: dict
    state: RenderState = field(repr=False)


def _camera(pose: CameraPose):
    W, intr = view_matrix(pose)
    return (np.ascontiguousarray(W[:3, :3]), np.ascontiguousarray(W[:3, 3]),
            (intr.fx, intr.fy, intr.cx, intr.cy))


def _preprocess(params, pose):
    Rwc, tcw, (fx, fy, cx, cy) = _camera(pose)
    out = K.preprocess(params, Rwc, tcw, fx, fy, cx, cy, pose.width, pose.height, NEAR, BLUR)
    return (Rwc, tcw, (fx, fy, cx, cy)) + tuple(out)


def project_gaussian(g: Gaussian, pose: CameraPose) -> Optional[Projection]:
    """Screen-space mean, 2x2 covariance and depth, or None when culled."""
    cloud = GaussianCloud.from_activated(g.position, g.scale, g.rotation,
                                         np.clip(g.opacity, 1e-6, 1 - 1e-6),
                                         np.clip(g.color, 1e-6, 1 - 1e-6))
    _, _, _, mean2d, cov2d, _, depth, _, _, _, status = _preprocess(cloud.params, pose)
    if status[0] != K.VISIBLE:
        return None
    A, B, C = cov2d[0]
    return Projection(mean2d[0].copy(), np.array([[A, B], [B, C]]), float(depth[0]))


def render(cloud: GaussianCloud, pose: CameraPose, background=DEFAULT_BACKGROUND) -> RenderedView:
    params = np.ascontiguousarray(cloud.params, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    (Rwc, tcw, intr, mean2d, cov2d, conic, depth, opac, color,
     rect, status) = _preprocess(params, pose)
    # stable sort keeps equal depths in Gaussian-index order
    order = np.argsort(depth, kind="stable")
    tiles_x = (pose.width + K.TILE - 1) // K.TILE
    tiles_y = (pose.height + K.TILE - 1) // K.TILE
    ranges, point_list = K.bin_tiles(order, rect, status, tiles_x, tiles_y)
    image, final_T, n_contrib = K.rasterize(ranges, point_list, mean2d, conic, opac, color,
                                            bg, pose.width, pose.height)
    stats = {
        "splats": int(len(params)),
        "drawn": int(np.count_nonzero(status == K.VISIBLE)),
        "culled": int(np.count_nonzero((status == K.CULLED_NEAR) | (status == K.CULLED_OFFSCREEN))),
        "skipped": int(np.count_nonzero(status == K.SKIPPED_SINGULAR)),
        "tile_pairs": int(len(point_list)),
    }
    state = RenderState(params.copy(), pose, bg, Rwc, tcw, intr, mean2d, conic, opac, color,
                        status, ranges, point_list, final_T, n_contrib)
    return RenderedView(image, 1.0 - final_T, stats, state)


def render_backward(view: RenderedView, grad_color: np.ndarray,
                    cloud: Optional[GaussianCloud] = None,
                    pose: Optional[CameraPose] = None) -> np.ndarray:
    """(N, 14) gradient of <grad_color, view.color> w.r.t. pre-activation parameters.

    `cloud` and `pose`, when given, must be the ones the view was rendered from.
    """
    st = view.state
    if cloud is not None and not (cloud.params.shape == st.params.shape
                                  and np.array_equal(cloud.params, st.params)):
        raise ContractViolation("render_backward: cloud differs from the rendered one")
    if pose is not None and pose != st.pose:
        raise ContractViolation("render_backward: pose differs from the rendered one")
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    if grad_color.shape != view.color.shape:
        raise ContractViolation(
            f"grad_color shape {grad_color.shape} != image shape {view.color.shape}")
    fx, fy, _, _ = st.intr
    pair_grad = K.rasterize_backward(st.ranges, st.point_list, st.mean2d, st.conic, st.opacity,
                                     st.color, st.background, st.final_T, st.n_contrib,
                                     grad_color, st.pose.width, st.pose.height)
    grad2d = K.reduce_pairs(st.point_list, pair_grad, len(st.params))
    return K.preprocess_backward(st.params, st.Rwc, st.tcw, fx, fy, st.status, st.conic,
                                 st.opacity, st.color, grad2d)


def render_images(cloud: GaussianCloud, poses, background=DEFAULT_BACKGROUND) -> np.ndarray:
    """Colour images for several cameras, stacked to (V, H, W, 3)."""
    return np.stack([render(cloud, p, background).color for p in poses])


__all__ = ["Projection", "RenderedView", "render", "render_backward", "project_gaussian",
           "render_images", "N_CHANNELS"]
