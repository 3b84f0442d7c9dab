import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from headsplat import objective as obj
from headsplat.errors import ContractViolation
from headsplat.objective import LossWeights, PyramidEmbedder


class TableEmbedder:
    """Looks embeddings up by the image's first pixel value."""

    dim = 2

    def __init__(self, table):
        self.table = table

    def embed(self, image):
        return np.asarray(self.table[round(float(np.asarray(image).flat[0]), 6)], dtype=float)


def brute_mse(a, b):
    total, n = 0.0, 0
    for idx in itertools.product(*[range(s) for s in a.shape]):
        total += (a[idx] - b[idx]) ** 2
        n += 1
    return total / n


img2 = arrays(np.float64, (2, 2, 3), elements=st.floats(0, 1))


@settings(max_examples=50, deadline=None)
@given(img2, img2)
def test_mse_and_psnr_brute_force(a, b):
    m = brute_mse(a, b)
    assert abs(obj.mse(a, b) - m) < 1e-12
    if m > 1e-10:
        assert abs(obj.psnr(a, b) - 10 * np.log10(1 / m)) < 1e-10


def test_mse_psnr_trivial_values():
    z, o = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
    assert obj.mse(z, z) == 0.0 and obj.mse(z, o) == 1.0
    assert obj.psnr(z, z) == obj.PSNR_CAP
    assert obj.psnr(np.full((4, 4, 3), 0.1), z) == pytest.approx(20.0, abs=1e-12)
    checker = (np.indices((6, 6)).sum(0) % 2)[..., None].repeat(3, -1).astype(float)
    assert obj.psnr(checker, 1 - checker) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractViolation):
        obj.mse(z, np.zeros((4, 4, 1)))


def test_id_loss_hand_values():
    e = TableEmbedder({0.0: [1.0, 0.0], 0.1: [1.0, 0.0], 0.2: [0.5, np.sqrt(0.75)],
                       0.3: [0.0, 1.0], 0.4: [-1.0, 0.0]})
    ref = np.zeros((2, 2, 3))
    views = np.stack([np.full((2, 2, 3), 0.1), np.full((2, 2, 3), 0.2)])
    assert obj.id_loss(views, ref, e) == pytest.approx(0.25, abs=1e-12)
    assert obj.id_loss(np.full((1, 2, 2, 3), 0.3), ref, e) == pytest.approx(1.0, abs=1e-12)
    assert obj.id_loss(np.stack([ref, ref]), ref, e) == 0.0
    assert obj.csim(np.full((2, 2, 3), 0.4), ref, e) == pytest.approx(-1.0)


def brute_perceptual(a, b):
    """Loop-based reference: edge-padded [1,2,1] blur, 2x2 mean pool, bands per level."""
    def pad(x, i, j):
        return x[min(max(i, 0), x.shape[0] - 1), min(max(j, 0), x.shape[1] - 1)]

    def blur(x):
        H, W = x.shape
        k = [0.25, 0.5, 0.25]
        out = np.zeros_like(x)
        for i in range(H):
            for j in range(W):
                out[i, j] = sum(k[di] * k[dj] * pad(x, i + di - 1, j + dj - 1)
                                for di in range(3) for dj in range(3))
        return out

    def pool(x):
        H, W = x.shape[0] // 2, x.shape[1] // 2
        return np.array([[x[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(W)]
                         for i in range(H)])

    def bands(x):
        H, W = x.shape
        out = [x]
        if W > 1:
            out.append(np.array([[x[i, j + 1] - x[i, j] for j in range(W - 1)] for i in range(H)]))
        if H > 1:
            out.append(np.array([[x[i + 1, j] - x[i, j] for j in range(W)] for i in range(H - 1)]))
        out.append(np.array([[pad(x, i - 1, j) + pad(x, i + 1, j) + pad(x, i, j - 1)
                              + pad(x, i, j + 1) - 4 * x[i, j] for j in range(W)]
                             for i in range(H)]))
        return out

    levels = []
    shape = a.shape[1:3]
    while len(levels) < 3:
        levels.append(shape)
        if shape[0] < 2 or shape[1] < 2:
            break
        shape = (shape[0] // 2, shape[1] // 2)
    n_levels = len(levels)
    total = 0.0
    # per band: mean over views, pixels and channels
    sums = {}
    for v in range(a.shape[0]):
        for c in range(a.shape[3]):
            xa, xb = a[v, :, :, c], b[v, :, :, c]
            for lvl in range(n_levels):
                if lvl > 0:
                    xa, xb = pool(blur(xa)), pool(blur(xb))
                for k, (fa, fb) in enumerate(zip(bands(xa), bands(xb))):
                    s, n = sums.get((lvl, k), (0.0, 0))
                    sums[(lvl, k)] = (s + float(np.sum((fa - fb) ** 2)), n + fa.size)
    for s, n in sums.values():
        total += s / n / n_levels
    return total


@pytest.mark.parametrize("shape", [(1, 2, 2, 3), (2, 5, 4, 3), (1, 8, 8, 1), (1, 1, 3, 3)])
def test_perceptual_proxy_brute_force(shape):
    rng = np.random.default_rng(sum(shape))
    a, b = rng.random(shape), rng.random(shape)
    assert abs(obj.perceptual_proxy(a, b) - brute_perceptual(a, b)) < 1e-10


def test_perceptual_constant_offset_is_offset_squared():
    a = np.full((1, 16, 16, 3), 0.3)
    assert obj.perceptual_proxy(a, a + 0.2) == pytest.approx(0.04, abs=1e-12)
    assert obj.perceptual_proxy(a, a) == 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 6, 5, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (1, 6, 5, 3), elements=st.floats(0, 1)))
def test_losses_nonnegative_and_symmetric(a, b):
    assert obj.perceptual_proxy(a, b) >= 0
    assert obj.perceptual_proxy(a, b) == pytest.approx(obj.perceptual_proxy(b, a), abs=1e-14)
    assert obj.mse(a, b) >= 0


@pytest.mark.parametrize("shape", [(1, 2, 2, 3), (2, 7, 9, 3), (1, 16, 12, 3)])
def test_pixel_gradients_match_finite_differences(shape):
    rng = np.random.default_rng(3)
    a, b = rng.random(shape), rng.random(shape)
    for f, g in ((obj.mse, obj.mse_grad), (obj.perceptual_proxy, obj.perceptual_proxy_grad)):
        an = g(a, b)
        h = 1e-6
        for idx in list(itertools.product(*[range(s) for s in shape]))[:: max(1, a.size // 60)]:
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            fd = (f(ap, b) - f(am, b)) / (2 * h)
            assert abs(fd - an[idx]) <= 1e-4 * max(abs(fd), 1e-8) + 1e-11


def test_total_loss_components_and_affinity():
    rng = np.random.default_rng(7)
    J, Js = rng.random((3, 2, 2, 3)), rng.random((3, 2, 2, 3))
    e = PyramidEmbedder()
    parts = {"mse": brute_mse(J, Js), "perceptual_proxy": brute_perceptual(J, Js),
             "id_loss": 1 - np.mean([e.embed(j) @ e.embed(Js[0]) for j in J])}
    for lp, li in [(1.0, 1.0), (0.0, 0.0), (2.5, 0.3)]:
        total, terms = obj.total_loss(J, Js, e, LossWeights(lp, li))
        expected = parts["mse"] + lp * parts["perceptual_proxy"] + li * parts["id_loss"]
        assert abs(total - expected) < 1e-10
        for k, v in parts.items():
            assert abs(terms[k] - v) < 1e-10
    assert obj.total_loss(J, Js, None, LossWeights(0.0, 0.0))[0] == pytest.approx(parts["mse"], abs=0)


def test_total_loss_identical_inputs_is_zero():
    J = np.random.default_rng(0).random((4, 8, 8, 3))
    total, terms = obj.total_loss(J, J, id_ref=J[0])
    # every view is compared with view 0, so only a single-view set is trivially 0
    assert terms["mse"] == 0.0 and terms["perceptual_proxy"] == 0.0
    total1, terms1 = obj.total_loss(J[:1], J[:1])
    assert total1 == pytest.approx(0.0, abs=1e-15) and terms1["id_loss"] == pytest.approx(0.0, abs=1e-15)


def test_embedder_properties():
    e = PyramidEmbedder()
    rng = np.random.default_rng(1)
    a, b = rng.random((48, 40, 3)), rng.random((48, 40, 3))
    assert np.linalg.norm(e.embed(a)) == pytest.approx(1.0)
    assert np.array_equal(e.embed(a), PyramidEmbedder().embed(a))
    assert obj.csim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert obj.csim(a, b) == pytest.approx(float(e.embed(a) @ e.embed(b)), abs=1e-12)
    assert e.features(a).shape == (1351,)
    assert np.all(np.isfinite(e.embed(np.zeros((10, 10, 3)))))


def test_id_loss_permutation_invariant():
    rng = np.random.default_rng(2)
    J, ref = rng.random((5, 16, 16, 3)), rng.random((16, 16, 3))
    assert obj.id_loss(J, ref) == pytest.approx(obj.id_loss(J[::-1], ref), abs=1e-14)
    assert 0.0 <= obj.id_loss(J, ref) <= 2.0
