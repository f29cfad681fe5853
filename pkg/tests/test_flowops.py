import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from videolayers.flowops import flow_confidence, flow_sampler, lr_consistency, photometric_error, photometric_gate, warp_by_flow

H, W = 6, 8


def _const(u, v):
    f = np.zeros((H, W, 2))
    f[..., 0], f[..., 1] = u, v
    return f


def test_zero_flow_is_identity(rng):
    img = rng.random((H, W, 3))
    out, valid = warp_by_flow(img, np.zeros((H, W, 2)))
    assert np.array_equal(out, img) and valid.all()


def test_constant_flow_on_ramp():
    ramp = np.tile(np.arange(W, dtype=float), (H, 1))
    out, valid = warp_by_flow(ramp, _const(1, 0))
    xs = np.tile(np.arange(W, dtype=float), (H, 1))
    assert np.allclose(out[valid > 0], (xs + 1)[valid > 0])
    assert not valid[:, -1].any()


def test_flow_gradient_matches_differences(rng):
    img = rng.random((1, H, W))
    flow = rng.uniform(0.2, 0.8, (1, H - 2, W - 2, 2)) * np.sign(rng.normal(size=(1, H - 2, W - 2, 2)))
    pad = np.zeros((1, H, W, 2))
    pad[:, 1:-1, 1:-1] = flow
    g = rng.random((1, H, W))
    gx, gy = flow_sampler(pad, (1, H, W)).coord_grad(img, g)
    h = 1e-4
    k = (0, 2, 3)
    for c, ana in ((0, gx), (1, gy)):
        p, m = pad.copy(), pad.copy()
        p[k + (c,)] += h
        m[k + (c,)] -= h
        num = (np.sum(flow_sampler(p).apply(img) * g) - np.sum(flow_sampler(m).apply(img) * g)) / (2 * h)
        assert abs(num - ana[k]) <= 1e-4 * max(abs(num), 1e-8)


def test_exact_inverse_pair_is_consistent():
    e = lr_consistency(_const(1, 0), _const(-1, 0))
    assert np.all(e[np.isfinite(e)] == 0)


@given(u=st.integers(-3, 3), v=st.integers(-3, 3))
def test_consistency_zero_for_any_constant_inverse_pair(u, v):
    e = lr_consistency(_const(u, v), _const(-u, -v))
    assert np.all(e[np.isfinite(e)] == 0)


def test_consistency_error_point_four():
    e = lr_consistency(_const(1, 0), _const(-0.6, 0))
    assert np.allclose(e[:, :-1], 0.4)


def test_out_of_frame_lookup_gets_zero_weight():
    I = np.full((H, W, 3), 0.5)
    c = flow_confidence(_const(1, 0), _const(-1, 0), I, I, np.ones((H, W)))
    assert np.all(np.isinf(c.e_lr[:, -1]))
    assert np.all(c.weight[:, -1] == 0) and np.all(c.weight[:, :-1] == 1)


def test_photometric_same_frame():
    I = np.full((H, W, 3), 0.3)
    assert np.all(photometric_error(I, I, np.zeros((H, W, 2))) == 0)
    assert np.all(photometric_gate(I, I, np.zeros((H, W, 2))) == 1)


def test_photometric_gap_25_rejected():
    I = np.full((H, W, 3), 0.3)
    assert np.all(photometric_gate(I, I + 25 / 255, np.zeros((H, W, 2))) == 0)


@given(level=st.integers(0, 235))
def test_photometric_gap_exactly_20_rejected(level):
    I = np.full((H, W, 3), level / 255)
    assert np.all(photometric_gate(I, I + 20 / 255, np.zeros((H, W, 2))) == 0)
    assert np.all(photometric_gate(I, I + 19 / 255, np.zeros((H, W, 2))) == 1)


def test_confidence_cases():
    I = np.full((H, W, 3), 0.5)
    M = np.zeros((H, W))
    M[:, :4] = 1
    c = flow_confidence(np.zeros((H, W, 2)), np.zeros((H, W, 2)), I, I, M)
    assert np.array_equal(c.weight, M)
    c = flow_confidence(_const(1, 0), _const(-0.6, 0), I, I, np.ones((H, W)))
    assert np.allclose(c.weight[:, :-1], 0.6)


@given(seed=st.integers(0, 10_000))
def test_confidence_in_unit_interval_and_masked(seed):
    rng = np.random.default_rng(seed)
    fwd, bwd = rng.normal(size=(2, H, W, 2))
    I0, I1 = rng.random((2, H, W, 3))
    M = (rng.random((H, W)) > 0.5).astype(float)
    c = flow_confidence(fwd, bwd, I0, I1, M)
    assert np.all((c.weight >= 0) & (c.weight <= 1))
    assert np.all(c.weight[M == 0] == 0)
    assert np.allclose(c.weight, c.w_lr * c.w_p * M)
