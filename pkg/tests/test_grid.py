import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodereg.grid import (gradient_central, identity_grid, jacobian_det, jacobian_det_vjp,
                          sample_linear, sample_linear_vjp, sample_nearest)

from conftest import central_fd, rel_err


def corner_oracle(field, point):
    """Eight-corner (2^d) weighted sum written out per point."""
    shape = field.shape
    base = [min(int(np.floor(c)), n - 2) for c, n in zip(point, shape)]
    total = 0.0
    for corner in itertools.product((0, 1), repeat=len(shape)):
        w = 1.0
        idx = []
        for c, b, k in zip(point, base, corner):
            f = c - b
            w *= f if k else 1.0 - f
            idx.append(b + k)
        total += w * field[tuple(idx)]
    return total


def test_identity_grid_samples_bit_exactly(rng):
    f = rng.standard_normal((5, 6, 7))
    assert np.array_equal(sample_linear(f, identity_grid(f.shape)), f)
    v = rng.standard_normal((2, 4, 9))
    assert np.array_equal(sample_linear(v, identity_grid((4, 9))), v)


def test_midpoint_1d():
    out = sample_linear(np.array([0.0, 2.0]), np.array([[0.5]]))
    assert out[0] == 1.0


def test_trilinear_matches_corner_oracle(rng):
    f = rng.standard_normal((5, 5, 5))
    pts = rng.uniform(0, 4, (3, 40))
    got = sample_linear(f, pts)
    want = [corner_oracle(f, pts[:, i]) for i in range(pts.shape[1])]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_clamps_outside_the_grid():
    f = np.arange(4.0)
    out = sample_linear(f, np.array([[-3.0, 7.5, 3.0]]))
    assert out.tolist() == [0.0, 3.0, 3.0]


def test_dimension_mismatch_raises(rng):
    with pytest.raises(ValueError):
        sample_linear(rng.standard_normal((4, 4)), np.zeros((3, 2, 2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_interpolant_bounded_by_corners(seed):
    r = np.random.default_rng(seed)
    f = r.standard_normal((4, 5))
    pts = r.uniform(0, [[3], [4]], (2, 30))
    out = sample_linear(f, pts)
    for i in range(pts.shape[1]):
        lo = np.floor(pts[:, i]).astype(int)
        lo = np.minimum(lo, [2, 3])
        block = f[lo[0]:lo[0] + 2, lo[1]:lo[1] + 2]
        assert block.min() - 1e-12 <= out[i] <= block.max() + 1e-12


def test_sampling_vjp_is_adjoint_in_the_field(rng):
    f = rng.standard_normal((2, 6, 5))
    c = rng.uniform(-1, 6, (2, 4, 3))
    g = rng.standard_normal((2, 4, 3))
    gf, _ = sample_linear_vjp(f, c, g, need_coords=False)
    assert abs(np.sum(sample_linear(f, c) * g) - np.sum(f * gf)) < 1e-10


def test_sampling_coordinate_gradient_matches_fd(rng):
    f = rng.standard_normal((6, 7))
    c = rng.uniform(0.2, 4.8, (2, 3, 3))
    c = c + 0.05  # keep away from integer kinks
    g = rng.standard_normal((3, 3))
    _, gc = sample_linear_vjp(f, c, g, need_field=False)
    for idx in [(0, 0, 0), (1, 2, 1), (0, 1, 2), (1, 0, 0)]:
        fd = central_fd(lambda: np.sum(sample_linear(f, c) * g), c, idx, 1e-6)
        assert rel_err(gc[idx], fd, 1e-8) < 1e-6


def test_nearest_keeps_label_alphabet(rng):
    labels = rng.integers(0, 4, (6, 6))
    out = sample_nearest(labels, identity_grid((6, 6)) + rng.uniform(-0.4, 0.4, (2, 6, 6)))
    assert set(np.unique(out)) <= set(np.unique(labels))


# -- finite differences ------------------------------------------------------

def test_gradient_of_constant_is_zero():
    assert np.all(gradient_central(np.full((5, 6), 3.0)) == 0)


def test_gradient_of_ramp():
    x = identity_grid((7, 5))[0]
    g = gradient_central(3 * x)
    np.testing.assert_allclose(g[0], 3.0, atol=1e-12)
    np.testing.assert_allclose(g[1], 0.0, atol=1e-12)


def test_gradient_of_quadratic_interior():
    x = np.arange(16.0)
    g = gradient_central(x ** 2)[0]
    assert np.max(np.abs(g[1:-1] - 2 * x[1:-1])) < 1e-10


def test_gradient_spacing_and_linearity(rng):
    a, b = rng.standard_normal((2, 6, 7))
    g = gradient_central(2 * a - 3 * b, spacing=(0.5, 2.0))
    want = 2 * gradient_central(a, (0.5, 2.0)) - 3 * gradient_central(b, (0.5, 2.0))
    np.testing.assert_allclose(g, want, atol=1e-12)
    np.testing.assert_allclose(gradient_central(a, (0.5, 2.0))[0], gradient_central(a)[0] * 2)


def test_gradient_rejects_degenerate_axis():
    with pytest.raises(ValueError):
        gradient_central(np.zeros((1, 5)))


# -- Jacobian determinants ---------------------------------------------------

def test_identity_determinant():
    assert np.all(jacobian_det(identity_grid((5, 6, 4))) == 1.0)


def test_uniform_scaling_determinant():
    det = jacobian_det(1.1 * identity_grid((5, 5, 5)))
    np.testing.assert_allclose(det[1:-1, 1:-1, 1:-1], 1.331, atol=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_affine_determinant(rng, d):
    A = np.eye(d) + 0.3 * rng.standard_normal((d, d))
    b = rng.standard_normal(d)
    shape = (6,) * d
    x = identity_grid(shape)
    phi = np.tensordot(A, x, axes=1) + b.reshape((d,) + (1,) * d)
    np.testing.assert_allclose(jacobian_det(phi), np.linalg.det(A), atol=1e-10)


def test_determinant_vjp_matches_fd(rng):
    phi = identity_grid((5, 6)) + 0.3 * rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((5, 6))
    g = jacobian_det_vjp(phi, w)
    for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 5), (1, 1, 0)]:
        fd = central_fd(lambda: np.sum(w * jacobian_det(phi)), phi, idx, 1e-6)
        assert rel_err(g[idx], fd, 1e-8) < 1e-7


def test_determinant_channel_mismatch():
    with pytest.raises(ValueError):
        jacobian_det(np.zeros((3, 5, 5)))
