import numpy as np
import pytest
import scipy.sparse as sp

from qcmap.energy import (
    EXP_CLAMP, EnergyError, Problem, ThetaContext, Weights, augmented_lagrangian_value,
    clamped_exp, make_theta_context, make_y_context, theta_value_grad_hess, y_value_grad_hess,
)
from qcmap.grid import build_grid, build_operators, build_landmarks

from _problems import full_problem, random_state


def _fd_directional(f, x, v, step):
    return (f(x + step * v) - f(x - step * v)) / (2 * step)


# ---------------------------------------------------------------- Theta

def _theta_ctx(n=2, k=12, seed=0, **w):
    r = np.random.default_rng(seed)
    weights = Weights(**{"alpha1": 0.5, "alpha2": 1.0, "alpha4": 3.0, "rho1": 2.0, **w})
    return ThetaContext(r=r.uniform(0.5, 3.0, k), s=r.uniform(0.2, 2.0, k), weights=weights,
                        h=0.1, n=n, prior_index=np.array([1, 4, 7]),
                        theta_bar=np.array([0.2, -0.3, 0.5]))


def test_theta_stationary_example():
    k = 8
    ctx = ThetaContext(r=np.ones(k), s=np.ones(k),
                       weights=Weights(alpha1=1.0, alpha2=0.0, alpha4=0.0, rho1=1.0), h=0.1, n=2)
    ev = theta_value_grad_hess(np.zeros(k), ctx)
    np.testing.assert_array_equal(ev.grad, 0.0)


@pytest.mark.parametrize("n", [2, 3])
def test_theta_gradient_fd(n):
    ctx = _theta_ctx(n)
    r = np.random.default_rng(1)
    f = lambda t: theta_value_grad_hess(t, ctx, need_derivatives=False).value
    for _ in range(10):
        th, v = 0.5 * r.normal(size=12), r.normal(size=12)
        g = theta_value_grad_hess(th, ctx).grad
        fd = _fd_directional(f, th, v, 1e-5)
        assert abs(fd - g @ v) / max(1.0, abs(g @ v)) <= 1e-6


def test_theta_2d_formulas():
    ctx = _theta_ctx(2)
    th = np.linspace(-0.4, 0.4, 12)
    ev = theta_value_grad_hess(th, ctx)
    w, h, e = ctx.weights, ctx.h, np.exp(th)
    mask = np.zeros(12)
    mask[ctx.prior_index] = 1
    prior = np.zeros(12)
    prior[ctx.prior_index] = th[ctx.prior_index] - ctx.theta_bar
    grad = w.alpha1 * h * th - 0.5 * w.alpha2 * h * ctx.r / e + w.alpha4 * h * prior \
        + w.rho1 * h * e * (e - ctx.s)
    np.testing.assert_allclose(ev.grad, grad, rtol=1e-13, atol=1e-15)
    base = w.alpha1 * h + 0.5 * w.alpha2 * h * ctx.r / e + w.alpha4 * h * mask
    # penalty curvature: at least the Gauss-Newton e^2 term, the true e(2e - s) when larger
    pen = ev.hess_diag - base
    assert np.all(pen >= w.rho1 * h * e * e * (1 - 1e-12))
    np.testing.assert_allclose(pen, w.rho1 * h * e * np.maximum(2 * e - ctx.s, e), rtol=1e-12)


def test_theta_hessian_positive_everywhere():
    r = np.random.default_rng(2)
    for n in (2, 3):
        ctx = _theta_ctx(n, seed=3)
        for _ in range(100):
            th = r.uniform(-80, 80, 12)
            assert np.all(theta_value_grad_hess(th, ctx).hess_diag > 0)


def test_theta_clamp_flag_and_nonfinite():
    ctx = _theta_ctx(2)
    th = np.zeros(12)
    th[0] = EXP_CLAMP + 1
    assert theta_value_grad_hess(th, ctx).clamped
    assert not theta_value_grad_hess(np.zeros(12), ctx).clamped
    th[0] = np.nan
    with pytest.raises(EnergyError):
        theta_value_grad_hess(th, ctx)


def test_clamped_exp():
    v, hit = clamped_exp(np.array([0.0, 100.0]))
    assert hit and v[1] == np.exp(EXP_CLAMP)


# ---------------------------------------------------------------- Y

@pytest.mark.parametrize("n,N", [(2, 4), (3, 2)])
def test_y_gradient_fd_all_terms(n, N):
    prob = full_problem(n, N)
    r = np.random.default_rng(4)
    for _ in range(10):
        Y, th, l1, l2 = random_state(prob, r)
        ctx = make_y_context(prob, th, l1, l2, rho1=3.0)
        f = lambda y: y_value_grad_hess(y, ctx, need_derivatives=False).value
        g = y_value_grad_hess(Y, ctx).grad
        v = r.normal(size=Y.size)
        fd = _fd_directional(f, Y, v, 1e-5)
        assert abs(fd - g @ v) / max(1.0, abs(g @ v)) <= 1e-5


def test_y_gradient_fd_second_order():
    prob = full_problem(2, 4)
    r = np.random.default_rng(5)
    Y, th, l1, l2 = random_state(prob, r)
    ctx = make_y_context(prob, th, l1, l2, rho1=3.0)
    f = lambda y: y_value_grad_hess(y, ctx, need_derivatives=False).value
    gv = y_value_grad_hess(Y, ctx).grad @ (v := r.normal(size=Y.size))
    errs = [abs(_fd_directional(f, Y, v, s) - gv) for s in (1e-2, 5e-3, 2.5e-3)]
    # central differences: halving the step divides the error by about four
    assert errs[1] < errs[0] / 3 and errs[2] < errs[1] / 3


def test_y_identity_example():
    g = build_grid(2, 4)
    ops = build_operators(g)
    prob = Problem(ops=ops, weights=Weights(alpha2=1.0, alpha3=0.5))
    ctx = make_y_context(prob, np.zeros(g.num_elements), np.zeros(g.num_elements),
                         np.zeros(0), rho1=1.0)
    ev = y_value_grad_hess(g.X, ctx)
    assert ev.terms["smooth"] == 0.0
    assert ev.terms["constraint"] == pytest.approx(0.0, abs=1e-28)
    # determinant residual is zero at the identity, so only the distortion term remains
    only = Problem(ops=ops, weights=Weights(alpha2=0.0, alpha3=0.5))
    ctx0 = make_y_context(only, np.zeros(g.num_elements), np.zeros(g.num_elements),
                          np.zeros(0), rho1=1.0)
    np.testing.assert_allclose(y_value_grad_hess(g.X, ctx0).grad, 0.0, atol=1e-13)


@pytest.mark.parametrize("mode", ["exact", "paper", "weighted"])
@pytest.mark.parametrize("n", [2, 3])
def test_y_hessian_spd_with_landmarks(mode, n):
    prob = full_problem(n, 3 if n == 3 else 4)
    prob.hessian_distortion = mode
    r = np.random.default_rng(6)
    Y, th, l1, l2 = random_state(prob, r)
    H = y_value_grad_hess(Y, make_y_context(prob, th, l1, l2, rho1=2.0)).hess
    assert abs(H - H.T).max() <= 1e-12 * abs(H).max()
    for _ in range(100):
        p = r.normal(size=Y.size)
        assert p @ (H @ p) > 0
    # descent direction
    g = y_value_grad_hess(Y, make_y_context(prob, th, l1, l2, rho1=2.0)).grad
    step = sp.linalg.spsolve(H.tocsc(), -g)
    assert g @ step < 0


def test_y_hessian_exact_distortion_is_true_hessian():
    # with only the distortion term, J2 is quadratic in Y and the surrogate is exact
    g = build_grid(2, 3)
    ops = build_operators(g)
    prob = Problem(ops=ops, weights=Weights(alpha2=1.0))
    r = np.random.default_rng(7)
    th = 0.2 * r.normal(size=g.num_elements)
    ctx = make_y_context(prob, th, np.zeros(g.num_elements), np.zeros(0), rho1=1e-300)
    Y = g.X + 0.05 * r.normal(size=g.num_dofs)
    H = y_value_grad_hess(Y, ctx).hess.toarray()
    v = r.normal(size=Y.size)
    dg = y_value_grad_hess(Y + 1e-4 * v, ctx).grad - y_value_grad_hess(Y - 1e-4 * v, ctx).grad
    np.testing.assert_allclose(dg / 2e-4, H @ v, rtol=1e-6, atol=1e-10)


def test_identity_local_minimum():
    g = build_grid(2, 4)
    ops = build_operators(g)
    prob = Problem(ops=ops, weights=Weights(alpha2=1.0, alpha3=0.1))
    # the neutral start multiplier -2 alpha2 / n balances the boundary flux of
    # the distortion term; the second variation is then the conformal energy
    lam1 = np.full(g.num_elements, -1.0)
    ctx = make_y_context(prob, np.zeros(g.num_elements), lam1, np.zeros(0), rho1=1.0)
    f0 = y_value_grad_hess(g.X, ctx, need_derivatives=False).value
    np.testing.assert_allclose(y_value_grad_hess(g.X, ctx).grad, 0.0, atol=1e-14)
    r = np.random.default_rng(8)
    for _ in range(50):
        d = r.normal(size=g.num_dofs)
        d *= 1e-3 / np.linalg.norm(d)
        assert y_value_grad_hess(g.X + d, ctx, need_derivatives=False).value >= f0 - 1e-14


def test_y_errors():
    prob = full_problem(2, 4)
    ctx = make_y_context(prob, np.zeros(prob.grid.num_elements),
                         np.zeros(prob.grid.num_elements), np.zeros(2), rho1=1.0)
    with pytest.raises(EnergyError):
        y_value_grad_hess(np.zeros(3), ctx)
    Y = prob.grid.X.copy()
    Y[0] = np.inf
    with pytest.raises(EnergyError):
        y_value_grad_hess(Y, ctx)


def test_problem_validation():
    g = build_grid(2, 4)
    ops = build_operators(g)
    with pytest.raises(EnergyError):
        Problem(ops=ops, weights=Weights(), reference=np.zeros(3))
    with pytest.raises(EnergyError):
        Problem(ops=ops, weights=Weights(),
                landmarks=build_landmarks(build_grid(2, 2), [((0.5, 0.5), (0.5, 0.5))]))
    with pytest.raises(EnergyError):
        Weights(alpha1=-1.0)


# ---------------------------------------------------------------- augmented Lagrangian

def test_augmented_lagrangian_identity():
    g = build_grid(2, 4)
    prob = Problem(ops=build_operators(g), weights=Weights(alpha1=1, alpha2=2.0, alpha3=1))
    z = np.zeros(g.num_elements)
    total, terms = augmented_lagrangian_value(prob, g.X, z, z, np.zeros(0), 1.0)
    assert total == pytest.approx(2.0 * g.h * g.num_elements, rel=1e-14)
    assert terms["distortion"] == total


def test_augmented_lagrangian_zero_weights():
    g = build_grid(2, 3)
    prob = Problem(ops=build_operators(g), weights=Weights(alpha2=0.0))
    z = np.zeros(g.num_elements)
    total, _ = augmented_lagrangian_value(prob, g.X, z, z, np.zeros(0), 1.0)
    assert total == 0.0


def test_augmented_lagrangian_breakdown_sums():
    prob = full_problem(3, 2)
    r = np.random.default_rng(9)
    Y, th, l1, l2 = random_state(prob, r)
    total, terms = augmented_lagrangian_value(prob, Y, th, l1, l2, 4.0)
    assert len(terms) == 7
    assert abs(total - sum(terms.values())) <= 1e-12 * max(1.0, abs(total))
    with pytest.raises(EnergyError):
        augmented_lagrangian_value(prob, Y[:-1], th, l1, l2, 4.0)


def test_theta_context_from_problem():
    prob = full_problem(2, 4)
    r = np.random.default_rng(10)
    Y, th, l1, _ = random_state(prob, r)
    ctx = make_theta_context(prob, Y, l1, 2.0)
    assert np.all(ctx.r >= 0)
    assert ctx.prior_index.size == prob.prior.selected.size
