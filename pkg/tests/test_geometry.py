import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from videolayers.geometry import (
    Bilinear,
    DegeneratePointError,
    GridInterp,
    background_warp,
    brightness_adjust,
    canvas_from_homographies,
    hat_weights,
    hom_apply,
    hom_compose,
    hom_invert,
    sample_bilinear,
    translation,
    warp_by_homography,
)


def _random_hom(rng):
    H = np.eye(3) + rng.normal(scale=[[0.05, 0.05, 3], [0.05, 0.05, 3], [1e-4, 1e-4, 0]], size=(3, 3))
    return H / H[2, 2]


def test_identity_apply():
    assert hom_apply(np.eye(3), np.array([3.5, 2.0])).tolist() == [3.5, 2.0]


def test_translation_apply():
    assert hom_apply(translation(10, 5), np.array([0.0, 0.0])).tolist() == [10.0, 5.0]


def test_degenerate_point():
    H = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 1.0]])
    with pytest.raises(DegeneratePointError):
        hom_apply(H, np.array([-1.0, 0.0]))


@given(seed=st.integers(0, 10_000))
def test_group_laws(seed):
    rng = np.random.default_rng(seed)
    A, B = _random_hom(rng), _random_hom(rng)
    p = rng.uniform([0, 0], [96, 64], size=(20, 2))
    assert np.allclose(hom_apply(hom_invert(A), hom_apply(A, p)), p, atol=1e-6)
    assert np.allclose(hom_apply(hom_compose(A, B), p), hom_apply(A, hom_apply(B, p)), atol=1e-6)
    assert np.allclose(hom_compose(A, hom_invert(A)), np.eye(3), atol=1e-9)


def test_canvas_identity():
    spec = canvas_from_homographies(np.stack([np.eye(3)] * 3), 64, 48)
    assert spec.origin == (0.0, 0.0) and spec.size == (64, 48)


def test_canvas_with_translation():
    spec = canvas_from_homographies(np.stack([np.eye(3), translation(10, 0)]), 64, 48)
    assert spec.size == (74, 48)


@given(seed=st.integers(0, 10_000))
def test_canvas_contains_warped_corners(seed):
    rng = np.random.default_rng(seed)
    homs = np.stack([_random_hom(rng) for _ in range(4)])
    spec = canvas_from_homographies(homs, 32, 24)
    corners = np.array([[0, 0], [32, 0], [0, 24], [32, 24]], dtype=float)
    for H in homs:
        q = hom_apply(spec.frame_to_canvas_pixels(H), corners)
        assert np.all(q >= -1e-9) and np.all(q[:, 0] <= spec.width + 1e-9) and np.all(q[:, 1] <= spec.height + 1e-9)


# -- bilinear sampling ------------------------------------------------------------------------


def test_integer_coordinate_is_exact(rng):
    img = rng.random((5, 6))
    v, valid = sample_bilinear(img, np.array(2.0), np.array(3.0))
    assert v == img[3, 2] and valid == 1


def test_midpoint():
    v, _ = sample_bilinear(np.array([[0.0, 1.0]]), np.array(0.5), np.array(0.0))
    assert v == 0.5


def test_outside_clamps_and_is_invalid():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    v, valid = sample_bilinear(img, np.array([-3.0, 5.0]), np.array([0.0, 1.0]))
    assert v.tolist() == [1.0, 4.0] and valid.tolist() == [0.0, 0.0]


@given(x=st.floats(-2, 9), y=st.floats(-2, 7))
def test_bilinear_partition_of_unity(x, y):
    s = Bilinear((1, 6, 8), np.array([[x]]), np.array([[y]]))
    w = np.array([wi[0] for wi in s.w])
    assert np.all(w >= 0) and np.isclose(w.sum(), 1.0)
    # gradient with respect to the source values sums to one as well
    assert np.isclose(s.adjoint(np.ones((1, 1))).sum(), 1.0)


def test_adjoint_is_transpose(rng):
    x = rng.uniform(-1, 7, (2, 5, 4))
    y = rng.uniform(-1, 5, (2, 5, 4))
    s = Bilinear((2, 5, 7), x, y)
    img = rng.random((2, 5, 7, 3))
    g = rng.random((2, 5, 4, 3))
    assert np.isclose(np.sum(s.apply(img) * g), np.sum(img * s.adjoint(g)))


def test_coordinate_gradient_matches_differences(rng):
    img = rng.random((1, 6, 7, 2))
    # fractional parts kept away from the pixel grid, where the sampler has kinks
    x = rng.integers(0, 6, (1, 4, 4)) + rng.uniform(0.2, 0.8, (1, 4, 4))
    y = rng.integers(0, 5, (1, 4, 4)) + rng.uniform(0.2, 0.8, (1, 4, 4))
    g = rng.random((1, 4, 4, 2))
    gx, gy = Bilinear((1, 6, 7), x, y).coord_grad(img, g)
    h = 1e-3
    f = lambda xx, yy: np.sum(Bilinear((1, 6, 7), xx, yy).apply(img) * g)  # noqa: E731
    nx = np.zeros_like(x)
    ny = np.zeros_like(y)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        nx[idx] = (f(x + e, y) - f(x - e, y)) / (2 * h)
        ny[idx] = (f(x, y + e) - f(x, y - e)) / (2 * h)
    assert np.max(np.abs(gx - nx)) <= 1e-4 * max(np.abs(nx).max(), 1e-8)
    assert np.max(np.abs(gy - ny)) <= 1e-4 * max(np.abs(ny).max(), 1e-8)


# -- homography warps -----------------------------------------------------------------------


def test_identity_warp(rng):
    img = rng.random((4, 5, 3))
    out, valid = warp_by_homography(img, np.eye(3), (5, 4))
    assert np.array_equal(out, img) and valid.all()


def test_translation_warp_on_ramp():
    ramp = np.tile(np.arange(3.0), (3, 1))
    out, valid = warp_by_homography(ramp, translation(1, 0), (3, 3))
    assert out[:, :2].tolist() == [[1.0, 2.0]] * 3
    assert valid[:, 2].tolist() == [0.0, 0.0, 0.0] and valid[:, :2].all()


def test_warp_then_inverse_on_linear_ramp():
    ys, xs = np.mgrid[0:40, 0:50].astype(float)
    img = 0.3 + 0.01 * xs + 0.005 * ys
    H = np.array([[1.0, 0.02, 1.5], [-0.01, 1.0, 0.7], [0, 0, 1.0]])
    fwd, _ = warp_by_homography(img, H, (50, 40))
    back, _ = warp_by_homography(fwd, hom_invert(H), (50, 40))
    assert np.max(np.abs(back - img)[8:-8, 8:-8]) < 1e-5


# -- adjustment grids -------------------------------------------------------------------------


def test_zero_offsets_are_identity(rng):
    img = rng.random((6, 9, 3))
    out, valid = background_warp(img, np.zeros((1, 4, 7, 2)), 0, 5)
    assert np.array_equal(out, img) and valid.all()


def test_constant_offset_shifts_one_pixel(rng):
    img = rng.random((6, 9, 3))
    G = np.zeros((2, 4, 7, 2))
    G[..., 0] = 1.0
    out, valid = background_warp(img, G, 3, 12)
    assert np.allclose(out[:, :-1], img[:, 1:])
    assert np.allclose(out[:, -1], img[:, -1])  # clamp to edge
    assert not valid[:, -1].any()


def test_grid_node_weight_is_one():
    gi = GridInterp(21, 31, 61)
    w = gi.weights_at(10, 10, 20)  # t=10 -> node 1 of 3; y=10 -> node 1 of 4; x=20 -> node 2 of 7
    assert w[1, 1, 2] == 1.0 and w.sum() == 1.0


@given(n=st.integers(1, 40), k=st.integers(1, 8))
def test_hat_weights_partition_of_unity(n, k):
    w = hat_weights(n, k)
    assert np.all(w >= 0) and np.allclose(w.sum(axis=1), 1.0)


def test_gain_identity_and_half(rng):
    img = rng.random((5, 7, 3))
    assert np.array_equal(brightness_adjust(img, np.ones((1, 4, 7)), 0, 3), img)
    assert np.allclose(brightness_adjust(img, np.full((1, 4, 7), 0.5), 0, 3), img / 2)


def test_gain_linear_in_x_gives_ramp(rng):
    H, W = 5, 13
    G = np.tile(np.linspace(1.0, 2.0, 7), (2, 4, 1))
    out = brightness_adjust(np.ones((H, W)), G, 1, 15)
    assert np.allclose(out, np.tile(np.linspace(1.0, 2.0, W), (H, 1)))


def test_grid_adjoint_is_transpose(rng):
    gi = GridInterp(7, 9, 11, (2, 4, 7))
    G = rng.random((2, 4, 7, 2))
    g = rng.random((7, 9, 11, 2))
    assert np.isclose(np.sum(gi.field(G) * g), np.sum(G * gi.adjoint(g)))
