"""Losses and metrics: MSE, a multi-scale perceptual proxy, identity loss,
the combined training loss, PSNR and identity cosine similarity.

Image sets are float arrays shaped (V, H, W, C); single images are (H, W, C).

The perceptual term is a deterministic stand-in for a learned metric: a
pyramid of linear feature bands (intensity, x/y finite differences,
Laplacian) compared by weighted mean squared difference.  Because every band
is linear in the image the proxy is a quadratic form in (a - b), which gives
an exact gradient through the band adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from PIL import Image

from .errors import ContractViolation

PSNR_CAP = 100.0
PYRAMID_LEVELS = 3
EMBED_DIM = 256
EMBED_SIZE = 32
EMBED_SEED = 20240601


class Embedder(Protocol):
    dim: int

    def embed(self, image: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 1.0
    lambda_i: float = 1.0

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_i < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _as_set(x):
    return x[None] if x.ndim == 3 else x


def mse(a, b) -> float:
    a, b = _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def mse_grad(a, b) -> np.ndarray:
    a, b = _check_shapes(a, b)
    return 2.0 * (a - b) / a.size


def psnr(a, b) -> float:
    """10 log10(1 / mse), capped at 100 dB (identical images report the cap)."""
    m = mse(a, b)
    if m <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / m))


# ------------------------------------------------------ perceptual proxy bands
# Each linear op works on (V, H, W, C) and has an explicit adjoint.

def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")


def _pad_T(g):
    x = g[:, 1:-1, 1:-1].copy()
    x[:, 0] += g[:, 0, 1:-1]
    x[:, -1] += g[:, -1, 1:-1]
    x[:, :, 0] += g[:, 1:-1, 0]
    x[:, :, -1] += g[:, 1:-1, -1]
    x[:, 0, 0] += g[:, 0, 0]
    x[:, 0, -1] += g[:, 0, -1]
    x[:, -1, 0] += g[:, -1, 0]
    x[:, -1, -1] += g[:, -1, -1]
    return x


def _blur(x):
    """Edge-padded [1, 2, 1] / 4 binomial blur, same size."""
    p = _pad(x)
    h = 0.25 * p[:, :, :-2] + 0.5 * p[:, :, 1:-1] + 0.25 * p[:, :, 2:]
    return 0.25 * h[:, :-2] + 0.5 * h[:, 1:-1] + 0.25 * h[:, 2:]


def _blur_T(g):
    H, W = g.shape[1], g.shape[2]
    h = np.zeros((g.shape[0], H + 2, W, g.shape[3]))
    h[:, :-2] += 0.25 * g
    h[:, 1:-1] += 0.5 * g
    h[:, 2:] += 0.25 * g
    p = np.zeros((g.shape[0], H + 2, W + 2, g.shape[3]))
    p[:, :, :-2] += 0.25 * h
    p[:, :, 1:-1] += 0.5 * h
    p[:, :, 2:] += 0.25 * h
    return _pad_T(p)


def _pool(x):
    H, W = x.shape[1] // 2 * 2, x.shape[2] // 2 * 2
    c = x[:, :H, :W]
    return 0.25 * (c[:, 0::2, 0::2] + c[:, 1::2, 0::2] + c[:, 0::2, 1::2] + c[:, 1::2, 1::2])


def _pool_T(g, shape):
    x = np.zeros(shape)
    for dy in (0, 1):
        for dx in (0, 1):
            x[:, dy:2 * g.shape[1]:2, dx:2 * g.shape[2]:2] += 0.25 * g
    return x


def _laplacian(x):
    p = _pad(x)
    return (p[:, :-2, 1:-1] + p[:, 2:, 1:-1] + p[:, 1:-1, :-2] + p[:, 1:-1, 2:]
            - 4.0 * p[:, 1:-1, 1:-1])


def _laplacian_T(g):
    H, W = g.shape[1], g.shape[2]
    p = np.zeros((g.shape[0], H + 2, W + 2, g.shape[3]))
    p[:, :-2, 1:-1] += g
    p[:, 2:, 1:-1] += g
    p[:, 1:-1, :-2] += g
    p[:, 1:-1, 2:] += g
    p[:, 1:-1, 1:-1] -= 4.0 * g
    return _pad_T(p)


def _diff_x_T(g, shape):
    x = np.zeros(shape)
    x[:, :, 1:] += g
    x[:, :, :-1] -= g
    return x


def _diff_y_T(g, shape):
    x = np.zeros(shape)
    x[:, 1:] += g
    x[:, :-1] -= g
    return x


def _level_shapes(shape):
    shapes = [shape]
    while len(shapes) < PYRAMID_LEVELS:
        V, H, W, C = shapes[-1]
        if H < 2 or W < 2:
            break
        shapes.append((V, H // 2, W // 2, C))
    return shapes


def perceptual_bands(x):
    """Feature bands of an image set as a list of (name, level, array)."""
    x = _as_set(np.asarray(x, dtype=np.float64))
    bands = []
    level = x
    for l, _ in enumerate(_level_shapes(x.shape)):
        if l > 0:
            level = _pool(_blur(level))
        bands.append(("intensity", l, level))
        if level.shape[2] > 1:
            bands.append(("grad_x", l, level[:, :, 1:] - level[:, :, :-1]))
        if level.shape[1] > 1:
            bands.append(("grad_y", l, level[:, 1:] - level[:, :-1]))
        bands.append(("laplacian", l, _laplacian(level)))
    return bands


def _band_terms(a, b):
    a, b = _check_shapes(a, b)
    a, b = _as_set(a), _as_set(b)
    n_levels = len(_level_shapes(a.shape))
    return [(name, lvl, fa - fb, 1.0 / n_levels)
            for (name, lvl, fa), (_, _, fb) in zip(perceptual_bands(a), perceptual_bands(b))]


def perceptual_proxy(a, b) -> float:
    """Sum over bands of (1 / levels) * mean squared band difference.

    Every band is averaged over all views, pixels and channels; a uniform
    intensity offset d therefore scores exactly d^2.
    """
    return float(sum(w * np.mean(d ** 2) for _, _, d, w in _band_terms(a, b)))


def perceptual_proxy_grad(a, b) -> np.ndarray:
    a_arr = np.asarray(a, dtype=np.float64)
    terms = _band_terms(a, b)
    shapes = _level_shapes(_as_set(a_arr).shape)
    # seed gradients for every band, then walk the pyramid back to level 0
    grads = [np.zeros(s) for s in shapes]
    for name, lvl, d, w in terms:
        g = 2.0 * w * d / d.size
        s = shapes[lvl]
        if name == "intensity":
            grads[lvl] += g
        elif name == "grad_x":
            grads[lvl] += _diff_x_T(g, s)
        elif name == "grad_y":
            grads[lvl] += _diff_y_T(g, s)
        else:
            grads[lvl] += _laplacian_T(g)
    for lvl in range(len(shapes) - 1, 0, -1):
        grads[lvl - 1] += _blur_T(_pool_T(grads[lvl], shapes[lvl - 1]))
    return grads[0].reshape(a_arr.shape)


# --------------------------------------------------------------- identity

def _to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[-1] == 1:
        return image[..., 0]
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


class PyramidEmbedder:
    """Deterministic handcrafted identity descriptor.

    Grayscale, box-resampled to 32x32, 3-level 2x2-mean pyramid
    (32, 16, 8).  Features: each level with its mean removed, plus per-level
    mean and standard deviation and a constant 1 (so no image maps to the zero
    vector).  A fixed Gaussian projection with seed `EMBED_SEED` maps the 1351
    features to `dim`, and the result is unit-normalised.
    """

    def __init__(self, dim: int = EMBED_DIM, seed: int = EMBED_SEED, size: int = EMBED_SIZE):
        self.dim = dim
        self.size = size
        n_feat = sum((size >> l) ** 2 for l in range(3)) + 2 * 3 + 1
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((dim, n_feat)) / np.sqrt(n_feat)

    def features(self, image) -> np.ndarray:
        gray = _to_gray(image).astype(np.float32)
        small = np.asarray(Image.fromarray(gray, mode="F").resize(
            (self.size, self.size), Image.BOX), dtype=np.float64)
        levels = [small]
        for _ in range(2):
            s = levels[-1]
            levels.append(0.25 * (s[0::2, 0::2] + s[1::2, 0::2] + s[0::2, 1::2] + s[1::2, 1::2]))
        parts = [(lv - lv.mean()).ravel() for lv in levels]
        parts.append(np.array([lv.mean() for lv in levels]))
        parts.append(np.array([lv.std() for lv in levels]))
        parts.append(np.ones(1))
        return np.concatenate(parts)

    def embed(self, image) -> np.ndarray:
        v = self._proj @ self.features(image)
        return v / np.linalg.norm(v)


_default_embedder = None


def default_embedder() -> PyramidEmbedder:
    global _default_embedder
    if _default_embedder is None:
        _default_embedder = PyramidEmbedder()
    return _default_embedder


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ContractViolation("embedder returned a zero-norm feature vector")
    return v / n


def csim(a, b, e: Embedder | None = None) -> float:
    e = e or default_embedder()
    return float(np.clip(_unit(e.embed(a)) @ _unit(e.embed(b)), -1.0, 1.0))


def id_loss(J, J_star, e: Embedder | None = None) -> float:
    """1 - mean_i cos(e(J_i), e(J_star)) against one identity reference image."""
    e = e or default_embedder()
    J = np.asarray(J)
    if J.ndim == 3:
        J = J[None]
    if len(J) < 1:
        raise ContractViolation("id_loss needs at least one view")
    ref = _unit(e.embed(J_star))
    cos = [_unit(e.embed(j)) @ ref for j in J]
    return float(1.0 - np.mean(cos))


def total_loss(J, J_star_set, e: Embedder | None = None, w: LossWeights = LossWeights(),
               id_ref=None) -> tuple[float, dict]:
    """mse + lambda_p * perceptual_proxy + lambda_i * id_loss, with its breakdown.

    The identity term compares every view of `J` with a single reference
    image, `id_ref`, which defaults to the first reference view.
    """
    J, J_star_set = _check_shapes(J, J_star_set)
    terms = {"mse": mse(J, J_star_set), "perceptual_proxy": perceptual_proxy(J, J_star_set)}
    if w.lambda_i > 0 or e is not None:
        ref = _as_set(J_star_set)[0] if id_ref is None else id_ref
        terms["id_loss"] = id_loss(_as_set(J), ref, e)
    else:
        terms["id_loss"] = 0.0
    total = terms["mse"] + w.lambda_p * terms["perceptual_proxy"] + w.lambda_i * terms["id_loss"]
    terms["total"] = total
    return float(total), terms
