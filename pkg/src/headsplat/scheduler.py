"""Two-stage residual diffusion scheduling.

Tensors are plain float arrays.  Sequences are conventionally shaped
(N_s, C, h, w) but every function here is shape-agnostic except the
resamplers, which act on the last two axes.  At desk scale the "latent"
space is pixel space, so channel count is whatever the caller supplies.

Mixed forward step (noise and an upsampled low-resolution result j share
the injected perturbation, weighted by xi1 and xi2):

    z_t = sqrt(a_t) z_{t-1} + sqrt(1 - a_t) (xi1 eps + xi2 j)

Unrolling it with the same eps and j at every step gives

    z_t = sqrt(abar_t) z_0 + c_t (xi1 eps + xi2 j),
    c_t = sum_{s=1..t} sqrt(abar_t / abar_s) sqrt(1 - a_s),

because each injected term is scaled by sqrt(a_{s+1} ... a_t) =
sqrt(abar_t / abar_s) on its way to step t.  Equivalently c_t obeys
c_t = sqrt(a_t) c_{t-1} + sqrt(1 - a_t) with c_0 = 0.

Reverse step with predicted perturbation p:

    z_{t-1} = (z_t - (1 - a_t) / sqrt(1 - abar_t) p) / sqrt(a_t) + sigma_t z
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from .errors import ContractViolation

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """DDPM tables indexed by step t = 0..T (index 0 holds the t=0 identity row)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def deterministic(self) -> "NoiseSchedule":
        """Same schedule with sigma_t = 0 for every t."""
        return replace(self, sigma=np.zeros_like(self.sigma))


@dataclass(frozen=True)
class MixWeights:
    xi1: float = 0.4
    xi2: float = 0.6

    def __post_init__(self):
        if self.xi1 < 0 or self.xi2 < 0:
            raise ValueError(f"mix weights must be >= 0, got {self}")


class Denoiser(Protocol):
    def predict(self, z_t: np.ndarray, t: int, e: float, x) -> np.ndarray:
        ...


def make_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN,
                  beta_max: float = DEFAULT_BETA_MAX, spacing: str = "linear",
                  sigma: str = "posterior") -> NoiseSchedule:
    """Build the tables.

    spacing="cosine" derives betas from the squared-cosine abar curve
    (offset 0.008) and clips them into [beta_min, beta_max].  sigma selects
    the reverse-step std: "posterior" (beta tilde), "beta" (sqrt beta_t) or
    "zero".
    """
    if T < 1:
        raise ContractViolation(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ContractViolation(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if spacing == "linear":
        betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_max])
    elif spacing == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
        betas = np.maximum.accumulate(betas)
    else:
        raise ContractViolation(f"unknown spacing {spacing!r}")
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if sigma == "posterior":
        var = np.zeros(T + 1)
        var[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        sig = np.sqrt(var)
    elif sigma == "beta":
        sig = np.sqrt(beta)
    elif sigma == "zero":
        sig = np.zeros(T + 1)
    else:
        raise ContractViolation(f"unknown sigma mode {sigma!r}")
    for arr in (beta, alpha, alpha_bar, sig):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sig)


def _check_t(t, sched, low=1):
    if not (low <= t <= sched.T):
        raise ContractViolation(f"step {t} outside [{low}, {sched.T}]")


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ContractViolation(f"shape mismatch: {sorted(shapes)}")


def forward_mix_step(z_prev, eps, j_bar, t: int, sched: NoiseSchedule,
                     w: MixWeights = MixWeights()) -> np.ndarray:
    _same_shape(z_prev, eps, j_bar)
    _check_t(t, sched)
    a = sched.alpha[t]
    return np.sqrt(a) * np.asarray(z_prev) + np.sqrt(1.0 - a) * (
        w.xi1 * np.asarray(eps) + w.xi2 * np.asarray(j_bar))


def mix_coefficient(t: int, sched: NoiseSchedule) -> float:
    """c_t of the unrolled mixed forward process (see module docstring)."""
    _check_t(t, sched, low=0)
    if t == 0:
        return 0.0
    ab = sched.alpha_bar
    s = np.arange(1, t + 1)
    return float(np.sum(np.sqrt(ab[t] / ab[s]) * np.sqrt(1.0 - sched.alpha[s])))


def forward_closed_form(z0, eps, j_bar, t: int, sched: NoiseSchedule,
                        w: MixWeights = MixWeights()) -> np.ndarray:
    """z_t after t mixed steps that all reuse the same eps and j_bar."""
    _same_shape(z0, eps, j_bar)
    _check_t(t, sched, low=0)
    mixed = w.xi1 * np.asarray(eps) + w.xi2 * np.asarray(j_bar)
    return np.sqrt(sched.alpha_bar[t]) * np.asarray(z0) + mix_coefficient(t, sched) * mixed


def step_perturbation(mixed, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Prediction that makes `reverse_step` undo one mixed forward step exactly.

    A forward step injects sqrt(1 - a_t) m; the reverse step removes
    (1 - a_t) / sqrt(1 - abar_t) p, so p = m sqrt(1 - abar_t) / sqrt(1 - a_t).
    """
    _check_t(t, sched)
    return np.asarray(mixed) * np.sqrt(1.0 - sched.alpha_bar[t]) / np.sqrt(1.0 - sched.alpha[t])


def reverse_step(z_t, pred, t: int, sched: NoiseSchedule, noise=None) -> np.ndarray:
    _same_shape(z_t, pred)
    _check_t(t, sched)
    a = sched.alpha[t]
    one_minus_ab = 1.0 - sched.alpha_bar[t]
    coef = (1.0 - a) / np.sqrt(one_minus_ab) if one_minus_ab > 0 else 0.0
    out = (np.asarray(z_t) - coef * np.asarray(pred)) / np.sqrt(a)
    if noise is not None:
        _same_shape(z_t, noise)
        out = out + sched.sigma[t] * np.asarray(noise)
    return out


class ZeroDenoiser:
    def predict(self, z_t, t, e, x):
        return np.zeros_like(z_t)


class MixedOracleDenoiser:
    """Predicts the exact perturbation that leads back to a known target.

    With z_t = sqrt(abar_t) target + c_t m (the unrolled mixed forward
    process), the oracle solves for m from the current z_t and returns the
    prediction that `step_perturbation` would produce for it.  Fed through
    `reverse_step` with sigma = 0 this walks the closed-form path back down
    and lands on the target at t = 0, whatever z_T it starts from.
    """

    def __init__(self, target, sched: NoiseSchedule):
        self.target = np.asarray(target, dtype=np.float64)
        self.sched = sched
        self._c = np.array([mix_coefficient(t, sched) for t in range(sched.T + 1)])

    def predict(self, z_t, t, e, x):
        m = (np.asarray(z_t) - np.sqrt(self.sched.alpha_bar[t]) * self.target) / self._c[t]
        return step_perturbation(m, t, self.sched)


def sample_stage2(j_bar_up, denoiser: Denoiser, sched: NoiseSchedule,
                  w: MixWeights = MixWeights(), cond=None, elevation: float = 0.0,
                  seed: int = 0, trace=None) -> np.ndarray:
    """Residual-guided sampling from z_T = xi1 eps + xi2 j_bar.

    `trace`, when a list, receives one stats dict per reverse step.
    """
    j_bar_up = np.asarray(j_bar_up, dtype=np.float64)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(j_bar_up.shape)
    z = w.xi1 * eps + w.xi2 * j_bar_up
    for t in range(sched.T, 0, -1):
        pred = np.asarray(denoiser.predict(z, t, elevation, cond))
        if pred.shape != z.shape:
            raise ContractViolation(
                f"denoiser returned shape {pred.shape} for input {z.shape} at t={t}")
        noise = rng.standard_normal(z.shape) if sched.sigma[t] > 0 else None
        z = reverse_step(z, pred, t, sched, noise)
        if trace is not None:
            trace.append(tensor_stats(z, t - 1))
    return z


def tensor_stats(z, t) -> dict:
    z = np.asarray(z)
    return {"t": int(t), "mean": float(z.mean()), "std": float(z.std()),
            "min": float(z.min()), "max": float(z.max())}


# ---------------------------------------------------------------- resampling

def _check_factor(factor):
    if int(factor) != factor or factor < 1:
        raise ContractViolation(f"resampling factor must be an integer >= 1, got {factor}")
    return int(factor)


def downsample(images, factor: int) -> np.ndarray:
    """Area average over factor x factor blocks of the last two axes."""
    f = _check_factor(factor)
    x = np.asarray(images, dtype=np.float64)
    h, w = x.shape[-2:]
    if h % f or w % f:
        raise ContractViolation(f"spatial size {h}x{w} not divisible by {f}")
    x = x.reshape(x.shape[:-2] + (h // f, f, w // f, f))
    return x.mean(axis=(-3, -1))


def _bilinear_weights(n, f):
    # half-pixel aligned sample positions in source coordinates, edge-clamped
    pos = (np.arange(n * f) + 0.5) / f - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    return np.clip(lo, 0, n - 1), np.clip(lo + 1, 0, n - 1), frac


def upsample(images, factor: int) -> np.ndarray:
    """Bilinear upsampling of the last two axes (half-pixel aligned)."""
    f = _check_factor(factor)
    x = np.asarray(images, dtype=np.float64)
    h, w = x.shape[-2:]
    y0, y1, fy = _bilinear_weights(h, f)
    x0, x1, fx = _bilinear_weights(w, f)
    rows = x[..., y0, :] * (1 - fy)[:, None] + x[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx
