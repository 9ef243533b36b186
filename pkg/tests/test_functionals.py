import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levychaos.functionals import (
    UnsupportedFunctionalError,
    builtin_functional,
    cosine_quadratic,
    cutoff_chi,
    cutoff_chi_d1,
    cutoff_chi_d2,
    empirical_projection_grad,
    empirical_projection_hess,
    flat_derivative_identity_residual,
    smoothed_power_functional,
    sqrt_bump_linear,
)
from levychaos.linflow import InvalidArgumentError
from levychaos.measures import EmpiricalMeasure, empirical


def rand_measure(seed, n=5, d=1, scale=2.0):
    rng = np.random.default_rng(seed)
    return empirical(rng.standard_normal((n, d)) * scale)


# ---------------------------------------------------------------------------
# cutoff spline


def test_cutoff_boundary_values():
    eps = 0.3
    assert cutoff_chi(np.array([0.0, eps, 2 * eps, 5.0]), eps) == pytest.approx(
        [0.0, 0.0, 1.0, 1.0], abs=1e-15
    )
    # C2 join: first and second derivatives vanish at both knots
    for f in (cutoff_chi_d1, cutoff_chi_d2):
        assert f(np.array([eps, 2 * eps]), eps) == pytest.approx([0.0, 0.0], abs=1e-12)


def test_cutoff_derivatives_match_fd():
    eps, h = 0.4, 1e-6
    r = np.array([0.45, 0.55, 0.7, 0.75])
    fd1 = (cutoff_chi(r + h, eps) - cutoff_chi(r - h, eps)) / (2 * h)
    assert np.allclose(cutoff_chi_d1(r, eps), fd1, atol=1e-7)
    fd2 = (cutoff_chi(r + h, eps) - 2 * cutoff_chi(r, eps) + cutoff_chi(r - h, eps)) / h**2
    assert np.allclose(cutoff_chi_d2(r, eps), fd2, atol=1e-3)


# ---------------------------------------------------------------------------
# defining identity


def test_identity_residual_same_measure():
    u = sqrt_bump_linear()
    mu = rand_measure(0)
    assert flat_derivative_identity_residual(u, mu, mu) == pytest.approx(0.0, abs=1e-14)


def test_identity_residual_linear_exact():
    # delta u/dm is measure-independent, so the identity is exact for any nodes
    u = sqrt_bump_linear()
    assert flat_derivative_identity_residual(u, rand_measure(1), rand_measure(2)) < 1e-13


def test_identity_residual_quadratic_exact():
    # integrand is a polynomial of degree <= 2 in t: Gauss-Legendre(8) is exact
    u = cosine_quadratic()
    res = flat_derivative_identity_residual(u, rand_measure(3), rand_measure(4), 8)
    assert res < 1e-12


def test_identity_residual_smoothed_power():
    u = smoothed_power_functional(beta=0.6, eps=0.25)
    res = flat_derivative_identity_residual(u, rand_measure(5), rand_measure(6))
    assert res < 1e-12


# ---------------------------------------------------------------------------
# empirical projections


def u_n(u, x):
    return u(empirical(x))


@pytest.mark.parametrize(
    "maker",
    [
        sqrt_bump_linear,
        lambda: smoothed_power_functional(0.7, 0.3),
        cosine_quadratic,
    ],
)
def test_projection_grad_matches_fd(maker):
    u = maker()
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 1)) * 2
    h = 1e-6
    for i in (0, 3):
        xp, xm = x.copy(), x.copy()
        xp[i, 0] += h
        xm[i, 0] -= h
        fd = (u_n(u, xp) - u_n(u, xm)) / (2 * h)
        got = empirical_projection_grad(u, x, i)[0]
        assert got == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_projection_grad_linear_closed_form():
    u = sqrt_bump_linear()
    x = np.array([[0.5], [-1.0], [2.0]])
    # (1/N) phi'(x_i) with phi' = x/sqrt(1+x^2)
    want = (0.5 / np.sqrt(1.25)) / 3
    assert empirical_projection_grad(u, x, 0)[0] == pytest.approx(want, rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        empirical_projection_grad(u, x, 5)


def test_projection_hess_linear():
    u = sqrt_bump_linear()
    x = np.array([[0.5], [-1.0], [2.0]])
    assert empirical_projection_hess(u, x, 0, 1) == pytest.approx(0.0, abs=1e-15)
    s = np.sqrt(1.25)
    want = (1 / s - 0.25 / s**3) / 3  # (1/N) phi''(x_0)
    assert empirical_projection_hess(u, x, 0, 0)[0, 0] == pytest.approx(want, rel=1e-12)


def test_projection_hess_quadratic_matches_fd():
    u = cosine_quadratic()
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 1)) * 2
    h = 1e-4
    for i, j in ((0, 2), (1, 1)):
        def f(xi, xj):
            y = x.copy()
            y[i, 0], y[j, 0] = xi, xj
            return u_n(u, y)

        xi0, xj0 = x[i, 0], x[j, 0]
        if i == j:
            fd = (f(xi0 + h, xi0 + h) - 2 * f(xi0, xi0) + f(xi0 - h, xi0 - h)) / h**2
        else:
            fd = (
                f(xi0 + h, xj0 + h)
                - f(xi0 + h, xj0 - h)
                - f(xi0 - h, xj0 + h)
                + f(xi0 - h, xj0 - h)
            ) / (4 * h**2)
        got = empirical_projection_hess(u, x, i, j)[0, 0]
        assert got == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_projection_hess_requires_second_derivatives():
    from levychaos.functionals import Functional

    u = Functional(eval=lambda m: 0.0, flat_d1=lambda m, v: 0.0, grad_d1=lambda m, v: 0.0)
    with pytest.raises(UnsupportedFunctionalError):
        empirical_projection_hess(u, np.zeros((2, 1)), 0, 0)


# ---------------------------------------------------------------------------
# class-C and builtin properties


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 500), x=st.floats(-5, 5), y=st.floats(-5, 5))
def test_class_c_lipschitz_flat_d1(seed, x, y):
    mu = rand_measure(seed)
    for u in (sqrt_bump_linear(), cosine_quadratic()):
        assert u.in_class_c
        a = u.flat_d1(mu, np.array([x]))[0]
        b = u.flat_d1(mu, np.array([y]))[0]
        assert abs(a - b) <= abs(x - y) + 1e-12


def test_smoothed_power_derivative_formula():
    # grad_d1 = beta sgn(v)|v|^{beta-1} chi + |v|^beta chi' against central FD
    beta, eps = 0.8, 0.25
    u = smoothed_power_functional(beta, eps)
    mu = rand_measure(1)
    v = np.array([-1.4, -0.4, 0.3, 0.45, 0.9])
    h = 1e-6
    fd = (u.flat_d1(mu, v + h) - u.flat_d1(mu, v - h)) / (2 * h)
    got = u.grad_d1(mu, v)[:, 0]
    assert np.allclose(got, fd, atol=1e-7)
    # closed form away from the cutoff band
    vv = np.array([2.0, -3.0])
    want = beta * np.sign(vv) * np.abs(vv) ** (beta - 1)
    assert np.allclose(u.grad_d1(mu, vv)[:, 0], want, atol=1e-12)


def test_flat_d2_symmetry():
    u = cosine_quadratic()
    mu = rand_measure(2)
    v, vp = np.array([0.7]), np.array([-1.2])
    assert u.flat_d2(mu, v, vp)[0] == pytest.approx(u.flat_d2(mu, vp, v)[0], rel=1e-14)


def test_builtin_registry():
    assert builtin_functional("linear_sqrt").name == "sqrt_bump"
    assert builtin_functional("smoothed_power", beta=0.5).name == "smoothed_power"
    assert builtin_functional("cosine_quadratic").name == "cosine_quadratic"
    with pytest.raises(InvalidArgumentError):
        builtin_functional("nope")
