import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsplat.errors import ContractViolation
from headsplat.geometry import CameraPose
from headsplat.gradcheck import check_gradients, random_scene
from headsplat.rasterizer import project_gaussian, render, render_backward
from headsplat.splats import Gaussian, GaussianCloud, logit, sigmoid

FRONT = CameraPose(0.0, 0.0, 2.5, 40.0, 32, 32)


def iso(pos, sigma, opacity, color):
    return GaussianCloud.from_activated([pos], [sigma] * 3, [1.0, 0, 0, 0], [opacity], [color])


def test_origin_projects_to_principal_point():
    g = Gaussian(np.zeros(3), np.full(3, 0.1), np.array([1.0, 0, 0, 0]), 0.5, np.full(3, 0.5))
    for az in (0.0, 77.0, 200.0):
        proj = project_gaussian(g, CameraPose(25.0, az, 2.5, 40.0, 40, 30))
        assert np.allclose(proj.mean2d, [20.0, 15.0], atol=1e-9)
        assert proj.depth == pytest.approx(2.5)


def test_isotropic_on_axis_has_isotropic_footprint():
    g = Gaussian(np.array([0.0, 0.0, 0.4]), np.full(3, 0.07), np.array([1.0, 0, 0, 0]), 0.5,
                 np.full(3, 0.5))
    cov = project_gaussian(g, FRONT).cov2d
    assert abs(cov[0, 1]) < 1e-9 and abs(cov[0, 0] - cov[1, 1]) < 1e-9


def test_behind_camera_is_culled():
    g = Gaussian(np.array([0.0, 0.0, 3.0]), np.full(3, 0.1), np.array([1.0, 0, 0, 0]), 0.5,
                 np.full(3, 0.5))
    assert project_gaussian(g, FRONT) is None
    view = render(GaussianCloud.from_activated([[0, 0, 3.0]], [0.1] * 3, [1, 0, 0, 0], [0.5],
                                               [[0.5] * 3]), FRONT)
    assert view.stats["culled"] == 1 and view.stats["drawn"] == 0


def test_transparent_cloud_renders_background():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(30, 14)) * 0.3
    p[:, 13] = -40.0
    view = render(GaussianCloud(p), FRONT, (0.1, 0.7, 0.3))
    assert np.allclose(view.color, [0.1, 0.7, 0.3], atol=1e-12)
    assert np.max(view.alpha) < 1e-12


def test_single_splat_peak_and_radial_falloff():
    view = render(iso([0, 0, 0], 0.15, 0.99, [0.1, 0.1, 0.1]), CameraPose(0.0, 0.0, 2.5, 40.0, 33, 33))
    a = view.alpha
    assert np.unravel_index(np.argmax(a), a.shape) == (16, 16)
    row = a[16, 16:]
    assert np.all(np.diff(row) <= 1e-15)
    assert np.allclose(a, a.T, atol=1e-12) and np.allclose(a, a[::-1], atol=1e-12)


def test_two_splat_compositing_oracle():
    # opaque-centre splats with opacity 0.5: front red, back blue, white background
    pose = CameraPose(0.0, 0.0, 2.5, 40.0, 33, 33)
    cloud = GaussianCloud.from_activated(
        [[0, 0, 0.2], [0, 0, -0.2]], [[0.2] * 3, [0.2] * 3], [[1, 0, 0, 0]] * 2, [0.5, 0.5],
        [[1 - 1e-9, 1e-9, 1e-9], [1e-9, 1e-9, 1 - 1e-9]])
    centre = render(cloud, pose, (1.0, 1.0, 1.0)).color[16, 16]
    # pixel centre (16.5, 16.5) coincides with the principal point, so both alphas are 0.5
    expected = 0.5 * np.array([1, 0, 0]) + 0.25 * np.array([0, 0, 1]) + 0.25 * np.ones(3)
    assert np.allclose(centre, expected, atol=1e-6)


def test_depth_order_not_index_order():
    pose = CameraPose(0.0, 0.0, 2.5, 40.0, 17, 17)
    a = GaussianCloud.from_activated([[0, 0, -0.2], [0, 0, 0.2]], [[0.2] * 3] * 2, [[1, 0, 0, 0]] * 2,
                                     [0.5, 0.5], [[0.01, 0.01, 0.99], [0.99, 0.01, 0.01]])
    b = GaussianCloud(a.params[::-1].copy())
    assert np.array_equal(render(a, pose).color, render(b, pose).color)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_energy_bound_black_background(seed):
    cloud, pose = random_scene(seed, 30, 24)
    view = render(cloud, pose, (0.0, 0.0, 0.0))
    assert np.all(view.alpha >= 0) and np.all(view.alpha <= 1)
    assert np.all(view.color <= view.alpha[..., None] + 1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.tuples(*[st.floats(0, 1)] * 3))
def test_colour_is_composite_plus_background(seed, bg):
    cloud, pose = random_scene(seed, 20, 16)
    black = render(cloud, pose, (0.0, 0.0, 0.0))
    view = render(cloud, pose, bg)
    assert np.allclose(view.color, black.color + (1 - view.alpha[..., None]) * np.asarray(bg),
                       atol=1e-12)


def test_render_is_bitwise_deterministic():
    cloud, pose = random_scene(5, 50, 48)
    a, b = render(cloud, pose), render(cloud, pose)
    assert np.array_equal(a.color, b.color)
    G = np.random.default_rng(1).normal(size=a.color.shape)
    assert np.array_equal(render_backward(a, G), render_backward(b, G))


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), st.floats(0, 360))
def test_opposite_azimuths_mirror_mean(x, y, az):
    # a point on the plane through the origin facing both cameras has equal depth from each
    a = np.radians(az)
    right = np.array([np.cos(a), 0.0, -np.sin(a)])
    pos = x * right + np.array([0.0, y, 0.0])
    g = Gaussian(pos, np.full(3, 0.05), np.array([1.0, 0, 0, 0]), 0.5, np.full(3, 0.5))
    p1 = project_gaussian(g, CameraPose(0.0, az, 2.5, 40.0, 64, 64))
    p2 = project_gaussian(g, CameraPose(0.0, az + 180.0, 2.5, 40.0, 64, 64))
    assert abs((p1.mean2d[0] - 32.0) + (p2.mean2d[0] - 32.0)) < 0.5
    assert abs(p1.mean2d[1] - p2.mean2d[1]) < 1e-9


def test_zero_cotangent_gives_zero_gradient():
    cloud, pose = random_scene(2, 20)
    view = render(cloud, pose)
    assert np.all(render_backward(view, np.zeros_like(view.color)) == 0.0)


def test_isolated_splat_colour_gradient_closed_form():
    # d C_r(peak) / d logit_r = alpha * T * sigmoid'(logit) with T = 1 for a lone splat
    pose = CameraPose(0.0, 0.0, 2.5, 40.0, 33, 33)
    cloud = iso([0, 0, 0], 0.2, 0.7, [0.3, 0.6, 0.8])
    view = render(cloud, pose, (1.0, 1.0, 1.0))
    G = np.zeros_like(view.color)
    G[16, 16, 0] = 1.0
    grad = render_backward(view, G)
    c = sigmoid(logit(0.3))
    assert grad[0, 0] == pytest.approx(0.7 * 1.0 * c * (1 - c), rel=1e-9)
    assert grad[0, 1] == 0.0 and grad[0, 2] == 0.0


def test_backward_rejects_mismatched_state():
    cloud, pose = random_scene(1, 10)
    view = render(cloud, pose)
    with pytest.raises(ContractViolation):
        render_backward(view, np.zeros((3, 3, 3)))
    other = cloud.copy()
    other.params[0, 0] += 1.0
    with pytest.raises(ContractViolation):
        render_backward(view, np.zeros_like(view.color), cloud=other)
    with pytest.raises(ContractViolation):
        render_backward(view, np.zeros_like(view.color), pose=CameraPose(0.0, 10.0, 2.5, 40.0, 32, 32))


def test_degenerate_scale_is_skipped_and_counted():
    p = iso([0, 0, 0], 0.1, 0.5, [0.5] * 3).params
    p[0, 3:6] = -800.0   # exp underflows to 0, footprint only the blur floor
    p = np.vstack([p, p])
    p[1, 9:13] = 0.0     # zero quaternion
    view = render(GaussianCloud(p), FRONT)
    assert view.stats["skipped"] == 1
    assert np.all(np.isfinite(view.color))


@pytest.mark.parametrize("seed", [11, 12])
def test_gradients_match_finite_differences(seed):
    cloud, pose = random_scene(seed, 25)
    check = check_gradients(cloud, pose)
    assert check.mask.sum() > 100
    assert check.pass_fraction(1e-3) >= 0.95
