import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcmap.grid import build_grid, build_operators
from qcmap.image import ScalarImage, fit_spline, resample_to_cells
from qcmap.measures import (
    MeasureError, beltrami_from_jacobians, beltrami_magnitude, conformality_distortion,
    dilatation, distortion_from_jacobians, field_histogram, jacobian_determinant, re_ssd,
)


def _affine(grid, M, b=None):
    b = np.zeros(grid.n) if b is None else b
    return (grid.node_coords @ np.asarray(M).T + b).T.ravel()


@pytest.fixture(scope="module")
def ops2():
    return build_operators(build_grid(2, 4))


@pytest.fixture(scope="module")
def ops3():
    return build_operators(build_grid(3, 3))


def test_identity(ops2, ops3):
    for ops in (ops2, ops3):
        X = ops.grid.X
        np.testing.assert_allclose(jacobian_determinant(X, ops), 1.0, atol=1e-12)
        np.testing.assert_allclose(conformality_distortion(X, ops), 1.0, atol=1e-12)
    np.testing.assert_allclose(beltrami_magnitude(ops2.grid.X, ops2), 0.0, atol=1e-12)


def test_uniform_scale(ops2):
    np.testing.assert_allclose(jacobian_determinant(2 * ops2.grid.X, ops2), 4.0, atol=1e-12)


def test_stretch_x1(ops2):
    Y = _affine(ops2.grid, np.diag([2.0, 1.0]))
    np.testing.assert_allclose(jacobian_determinant(Y, ops2), 2.0, atol=1e-12)
    np.testing.assert_allclose(conformality_distortion(Y, ops2), 1.25, atol=1e-12)
    mu = beltrami_magnitude(Y, ops2)
    np.testing.assert_allclose(mu, 1 / 3, atol=1e-12)
    np.testing.assert_allclose(dilatation(mu), 2.0, atol=1e-12)


def test_displaced_node_inverts_element(ops2):
    g = ops2.grid
    Y = g.X.copy()
    node = 6  # interior node (0.5, 0.25)
    Y[node] += 0.6  # push x1 past the right neighbour at 0.75
    det = jacobian_determinant(Y, ops2)
    touched = np.flatnonzero(np.any(g.elements == node, axis=1))
    assert np.any(det[touched] < 0)
    assert np.all(det[np.setdiff1d(np.arange(g.num_elements), touched)] == pytest.approx(1.0))
    # hand determinant of one inverted triangle
    e = touched[np.argmin(det[touched])]
    P = Y.reshape(2, -1).T[g.elements[e]]
    X = g.node_coords[g.elements[e]]
    ref = np.linalg.det(np.column_stack([P[1] - P[0], P[2] - P[0]])) / \
        np.linalg.det(np.column_stack([X[1] - X[0], X[2] - X[0]]))
    assert det[e] == pytest.approx(ref, abs=1e-12)
    K = conformality_distortion(Y, ops2)
    assert np.all(np.isinf(K[det <= 0]))


def test_3d_affine_determinant(ops3, rng):
    for _ in range(20):
        M = rng.normal(size=(3, 3))
        Y = _affine(ops3.grid, M, rng.normal(size=3))
        np.testing.assert_allclose(jacobian_determinant(Y, ops3), np.linalg.det(M), atol=1e-12)


def test_beltrami_requires_2d(ops3):
    with pytest.raises(MeasureError):
        beltrami_magnitude(ops3.grid.X, ops3)


def test_length_mismatch(ops2):
    with pytest.raises(MeasureError):
        jacobian_determinant(np.zeros(5), ops2)


def test_dilatation_values():
    np.testing.assert_allclose(dilatation([0.0]), [1.0])
    with pytest.raises(MeasureError):
        dilatation([1.0])


def test_sandwich_random_elements(rng):
    F = rng.normal(size=(1000, 2, 2))
    det = np.linalg.det(F)
    F[det < 0, :, 0] *= -1  # reflect to orientation-preserving maps
    F = F[np.abs(np.linalg.det(F)) > 1e-3]
    K = distortion_from_jacobians(F)
    Kd = dilatation(beltrami_from_jacobians(F))
    assert np.all(K >= 1 - 1e-12)
    assert np.all(K <= Kd * (1 + 1e-12))
    assert np.all(Kd <= 2 * K * (1 + 1e-12))
    # K_d equals the singular-value ratio
    s = np.linalg.svd(F, compute_uv=False)
    np.testing.assert_allclose(Kd, s[:, 0] / s[:, 1], rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(0, 2 * np.pi), st.sampled_from([2, 3]),
       st.integers(0, 2**32 - 1))
def test_similarity_has_unit_distortion(scale, angle, n, seed):
    if n == 2:
        c, s = np.cos(angle), np.sin(angle)
        R = np.array([[c, -s], [s, c]])
    else:
        Q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
        R = Q * np.sign(np.linalg.det(Q))
    F = np.broadcast_to(scale * R, (4, n, n))
    np.testing.assert_allclose(distortion_from_jacobians(F), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_measures_translation_invariant(seed):
    r = np.random.default_rng(seed)
    g = build_grid(2, 3)
    ops = build_operators(g)
    Y = g.X + 0.03 * r.normal(size=g.num_dofs)
    t = np.repeat(r.normal(size=2), g.num_nodes)
    for f in (jacobian_determinant, conformality_distortion, beltrami_magnitude):
        np.testing.assert_allclose(f(Y + t, ops), f(Y, ops), rtol=1e-10, atol=1e-12)


def test_distortion_at_least_one(rng):
    F = np.eye(3) + 0.3 * rng.normal(size=(500, 3, 3))
    K = distortion_from_jacobians(F)
    pos = np.linalg.det(F) > 0
    assert np.all(K[pos] >= 1 - 1e-12)


# ---------------------------------------------------------------- Re_SSD

def _images():
    g = build_grid(2, 8)
    ops = build_operators(g)
    x = np.linspace(0, 1, 17)
    T = fit_spline(ScalarImage(np.add.outer(x, 0.5 * x), [1 / 16] * 2, [0, 0]))
    return g, ops, T


def test_re_ssd_identity_is_100():
    g, ops, T = _images()
    R = resample_to_cells(T, g) + 0.1
    assert re_ssd(T, R, g.X, ops) == pytest.approx(100.0)


def test_re_ssd_perfect_alignment_is_0():
    g, ops, T = _images()
    shift = np.repeat([0.05, 0.0], g.num_nodes)
    R = T.evaluate((ops.P @ (g.X + shift)).reshape(2, -1).T)
    assert re_ssd(T, R, g.X + shift, ops) == pytest.approx(0.0, abs=1e-20)


def test_re_ssd_undefined():
    g, ops, T = _images()
    R = resample_to_cells(T, g)
    with pytest.raises(MeasureError, match="undefined"):
        re_ssd(T, R, g.X, ops)


# ---------------------------------------------------------------- histogram

def test_histogram_examples():
    h = field_histogram(np.ones(7), bins=10, range=(0, 2))
    assert h.counts[5] == 7 and h.counts.sum() == 7
    h = field_histogram([1.0, 2.0, 3.0], bins=3, range=(1, 3))
    np.testing.assert_array_equal(h.counts, [1, 1, 1])
    assert h.median == 2.0 and h.mean == 2.0 and h.min == 1.0 and h.max == 3.0
    ops = build_operators(build_grid(2, 4))
    assert field_histogram(jacobian_determinant(ops.grid.X, ops)).median == pytest.approx(1.0)


def test_histogram_errors():
    with pytest.raises(MeasureError):
        field_histogram([])
    with pytest.raises(MeasureError):
        field_histogram([1.0], bins=0)
