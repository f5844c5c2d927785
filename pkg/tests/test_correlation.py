import numpy as np
import pytest
from numpy.testing import assert_allclose

from numerics.rng import make_rng
from numerics.tensor_ops import ShapeError
from toyflow.correlation import (
    CorrelationPyramid,
    correlation_lookup,
    correlation_lookup_pyramid_vjp,
    correlation_lookup_vjp,
    correlation_pyramid,
    correlation_pyramid_vjp,
    encode,
    encode_vjp,
)
from toyflow.params import ModelConfig, ParamLayout, init_params

SMALL = ModelConfig(total_stride=4, encoder_channels=3, feature_channels=4, context_channels=3)


def _features(seed=0, channels=4, size=4):
    rng = make_rng(seed, "features")
    return rng.standard_normal((channels, size, size)), rng.standard_normal((channels, size, size))


def test_encode_reaches_the_feature_grid():
    theta = init_params(SMALL, make_rng(0, "init"))
    params = ParamLayout(SMALL).views(theta)
    image = make_rng(0, "image").uniform(size=(3, 16, 16))
    u = encode(image, params["enc1_w"], params["enc1_b"], params["enc2_w"], params["enc2_b"], SMALL)
    assert u.shape == (4, 4, 4)
    assert np.all(u >= 0.0)
    with pytest.raises(ShapeError):
        encode(image[:, :15], params["enc1_w"], params["enc1_b"], params["enc2_w"], params["enc2_b"], SMALL)


def test_pyramid_levels_and_pooling():
    u1, u2 = _features()
    pyr = correlation_pyramid(u1, u2, 2, radius=1)
    assert pyr.levels[0].shape == (4, 4, 4, 4)
    assert pyr.levels[1].shape == (4, 4, 2, 2)
    assert pyr.channels == 2 * 9
    assert pyr.levels[0][1, 2, 3, 0] == pytest.approx(u1[:, 1, 2] @ u2[:, 3, 0])
    assert pyr.levels[1][1, 2, 0, 1] == pytest.approx(pyr.levels[0][1, 2, 0:2, 2:4].mean())
    with pytest.raises(ShapeError):
        correlation_pyramid(u1[:, :3, :3], u2[:, :3, :3], 2, 1)


def test_zero_flow_lookup_reads_the_matching_pixel():
    u1, u2 = _features(1)
    pyr = correlation_pyramid(u1, u2, 1, radius=0)
    out = correlation_lookup(pyr, np.zeros((2, 4, 4)))
    assert out.shape == (1, 4, 4)
    assert_allclose(out[0], np.einsum("cij,cij->ij", u1, u2))


def test_integer_flow_shifts_the_window():
    u1, u2 = _features(2)
    pyr = correlation_pyramid(u1, u2, 1, radius=1)
    flow = np.zeros((2, 4, 4))
    flow[0] = 1.0  # one pixel to the right
    out = correlation_lookup(pyr, flow)
    # Channel 4 is the window centre (dy=0, dx=0); channel 3 is dx=-1.
    assert out[4, 1, 1] == pytest.approx(u1[:, 1, 1] @ u2[:, 1, 2])
    assert out[3, 1, 1] == pytest.approx(u1[:, 1, 1] @ u2[:, 1, 1])
    # Taps beyond the right border read zero.
    assert out[5, 1, 2] == 0.0


def test_lookup_vjp_matches_directional_differences():
    u1, u2 = _features(3)
    pyr = correlation_pyramid(u1, u2, 2, radius=1)
    rng = make_rng(3, "lookup")
    flow = rng.uniform(-1.3, 1.3, size=(2, 4, 4))
    cot = rng.standard_normal((pyr.channels, 4, 4))
    direction = rng.standard_normal((2, 4, 4))
    eps = 1e-6
    numeric = np.sum(cot * (correlation_lookup(pyr, flow + eps * direction) - correlation_lookup(pyr, flow - eps * direction))) / (2 * eps)
    analytic = np.sum(correlation_lookup_vjp(pyr, flow, cot) * direction)
    assert analytic == pytest.approx(numeric, rel=1e-5, abs=1e-7)


def test_level_zero_matches_the_quadruple_loop():
    u1, u2 = _features(4, channels=4, size=8)
    c0 = correlation_pyramid(u1, u2, 1, radius=0).levels[0]
    expected = np.zeros((8, 8, 8, 8))
    for i in range(8):
        for j in range(8):
            for m in range(8):
                for n in range(8):
                    expected[i, j, m, n] = sum(u1[d, i, j] * u2[d, m, n] for d in range(4))
    assert_allclose(c0, expected, atol=1e-10)


def test_swapping_the_frames_transposes_level_zero():
    u1, u2 = _features(5)
    forward = correlation_pyramid(u1, u2, 2, radius=1).levels[0]
    backward = correlation_pyramid(u2, u1, 2, radius=1).levels[0]
    assert_allclose(forward, backward.transpose(2, 3, 0, 1), atol=1e-12)


def test_half_pixel_flow_averages_neighbouring_cells():
    u1, u2 = _features(6)
    pyr = correlation_pyramid(u1, u2, 1, radius=0)
    flow = np.zeros((2, 4, 4))
    flow[0] = 0.5
    out = correlation_lookup(pyr, flow)
    c0 = pyr.levels[0]
    for i in range(4):
        for j in range(3):
            assert out[0, i, j] == pytest.approx(0.5 * (c0[i, j, i, j] + c0[i, j, i, j + 1]), abs=1e-12)


def test_lookup_is_linear_in_the_pyramid():
    u1, u2 = _features(7)
    pyr = correlation_pyramid(u1, u2, 2, radius=1)
    rng = make_rng(7, "levels")
    flow = rng.uniform(-1.3, 1.3, size=(2, 4, 4))
    cot = rng.standard_normal((pyr.channels, 4, 4))
    other = CorrelationPyramid([rng.standard_normal(level.shape) for level in pyr.levels], pyr.radius)
    d_levels = correlation_lookup_pyramid_vjp(pyr, flow, cot)
    assert [d.shape for d in d_levels] == [level.shape for level in pyr.levels]
    expected = np.sum(cot * correlation_lookup(other, flow))
    assert sum(np.sum(d * level) for d, level in zip(d_levels, other.levels)) == pytest.approx(expected, rel=1e-10)


def test_pyramid_vjp_matches_directional_differences():
    u1, u2 = _features(8)
    rng = make_rng(8, "pyramid")
    d_levels = [rng.standard_normal((4, 4, 4, 4)), rng.standard_normal((4, 4, 2, 2))]
    du1, du2 = rng.standard_normal(u1.shape), rng.standard_normal(u2.shape)

    def pairing(a, b):
        return sum(np.sum(d * level) for d, level in zip(d_levels, correlation_pyramid(a, b, 2, 1).levels))

    eps = 1e-6
    numeric = (pairing(u1 + eps * du1, u2 + eps * du2) - pairing(u1 - eps * du1, u2 - eps * du2)) / (2 * eps)
    g1, g2 = correlation_pyramid_vjp(u1, u2, d_levels)
    assert np.sum(g1 * du1) + np.sum(g2 * du2) == pytest.approx(numeric, rel=1e-7)


def test_encode_vjp_matches_directional_differences():
    theta = init_params(SMALL, make_rng(9, "init"))
    params = ParamLayout(SMALL).views(theta)
    weights = [params[name] for name in ("enc1_w", "enc1_b", "enc2_w", "enc2_b")]
    rng = make_rng(9, "encode")
    image = rng.uniform(size=(3, 16, 16))
    cot = rng.standard_normal((4, 4, 4))
    directions = [rng.standard_normal(w.shape) for w in weights]

    def pairing(step):
        shifted = [w + step * d for w, d in zip(weights, directions)]
        return np.sum(cot * encode(image, *shifted, SMALL))

    eps = 1e-6
    numeric = (pairing(eps) - pairing(-eps)) / (2 * eps)
    grads = encode_vjp(image, *weights, SMALL, cot)
    assert sum(np.sum(g * d) for g, d in zip(grads, directions)) == pytest.approx(numeric, rel=1e-5, abs=1e-8)
