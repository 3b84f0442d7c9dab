"""Central finite-difference check of the renderer's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraPose
from .rasterizer import render, render_backward
from .splats import GaussianCloud, N_CHANNELS


@dataclass
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    mask: np.ndarray        # coordinates with |analytic| above the floor
    rel_error: np.ndarray

    def pass_fraction(self, tol=1e-3) -> float:
        if not self.mask.any():
            return 1.0
        return float(np.mean(self.rel_error[self.mask] < tol))

    def per_channel(self, tol=1e-3) -> list:
        out = []
        for k in range(N_CHANNELS):
            m = self.mask[:, k]
            out.append(float(np.mean(self.rel_error[m, k] < tol)) if m.any() else None)
        return out


def random_scene(seed: int, n: int = 40, size: int = 32):
    """Seeded cloud of `n` well-conditioned splats near the origin plus a camera."""
    rng = np.random.default_rng(seed)
    cloud = GaussianCloud.from_activated(
        rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(0.05, 0.2, (n, 3)),
        rng.normal(size=(n, 4)), rng.uniform(0.2, 0.9, n), rng.uniform(0.1, 0.9, (n, 3)))
    pose = CameraPose(rng.uniform(-30, 40), rng.uniform(0, 360), 2.5, 40.0, size, size)
    return cloud, pose


def check_gradients(cloud: GaussianCloud, pose: CameraPose, background=(0.2, 0.3, 0.4),
                    h: float = 1e-4, floor: float = 1e-6, seed: int = 0) -> GradCheck:
    """Compare render_backward against central differences of <G, render>.

    G is a fixed random cotangent image so that every pixel contributes.
    """
    rng = np.random.default_rng(seed)
    view = render(cloud, pose, background)
    G = rng.normal(size=view.color.shape)
    analytic = render_backward(view, G)
    numeric = np.zeros_like(analytic)
    for i in range(len(cloud)):
        for k in range(N_CHANNELS):
            p = cloud.params.copy()
            p[i, k] += h
            up = np.sum(G * render(GaussianCloud(p), pose, background).color)
            p[i, k] -= 2 * h
            down = np.sum(G * render(GaussianCloud(p), pose, background).color)
            numeric[i, k] = (up - down) / (2 * h)
    mask = np.abs(analytic) > floor
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(denom > 0, np.abs(analytic - numeric) / np.where(denom > 0, denom, 1.0), 0.0)
    return GradCheck(analytic, numeric, mask, rel)
