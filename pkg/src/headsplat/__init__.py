"""Differentiable Gaussian splat rendering, multi-view head reconstruction
and two-stage residual diffusion scheduling, at desk scale."""

__version__ = "0.1.0"
