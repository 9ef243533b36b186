"""Measure functionals with flat (linear) derivatives.

A functional u on probability measures carries its first flat derivative
delta u / delta m (a function of (mu, v)), the space gradient of that
derivative, and optionally a second flat derivative.  Builtins cover the
three families used throughout the experiments:

* Linear:        u(mu) = int phi dmu
* SmoothedPower: u(mu) = int |x|^beta chi_eps(x) dmu  (C2 cutoff chi_eps)
* Quadratic:     u(mu) = int int psi(x - y) dmu(x) dmu(y)

Empirical projections u^N(x_1..x_N) = u(mean of deltas) and their exact
derivative formulas live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linflow import InvalidArgumentError
from .measures import EmpiricalMeasure


class UnsupportedFunctionalError(TypeError):
    """Raised when an operation needs derivative data the functional lacks."""


@dataclass(frozen=True)
class Functional:
    """u with flat derivative data.

    ``eval``    : mu -> real
    ``flat_d1`` : (mu, v) -> real, v an (m, d) batch -> (m,)
    ``grad_d1`` : (mu, v) -> (m, d), the space gradient of flat_d1 in v
    ``hess_d1`` : (mu, v) -> (m, d, d), optional
    ``flat_d2`` : (mu, v, vp) -> real batched over v/vp pairs, optional
    ``grad_flat_d2``: (mu, v, vp) -> (m, d, d): d_{v'} (delta/dm) d_v delta u
    """

    eval: Callable
    flat_d1: Callable
    grad_d1: Callable
    hess_d1: Optional[Callable] = None
    flat_d2: Optional[Callable] = None
    grad_flat_d2: Optional[Callable] = None
    lipschitz_d1: float = np.inf
    lipschitz_d2: float = np.inf
    name: str = "custom"

    def __call__(self, mu):
        return float(self.eval(mu))

    @property
    def in_class_c(self):
        """Both derivative Lipschitz constants at most one."""
        return self.lipschitz_d1 <= 1.0 and self.lipschitz_d2 <= 1.0


def _as_batch(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v[None, None]
    elif v.ndim == 1:
        v = v[:, None] if v.shape[0] > 0 else v[None, :]
    return v


# ---------------------------------------------------------------------------
# defining identity


def flat_derivative_identity_residual(u: Functional, mu, nu, t_nodes=8):
    """Residual of u(mu)-u(nu) = int_0^1 int du/dm(t mu + (1-t) nu) d(mu-nu) dt.

    The inner integral is exact on empirical measures; the t-integral uses
    Gauss-Legendre with ``t_nodes`` nodes.
    """
    if u.flat_d1 is None:
        raise UnsupportedFunctionalError("flat_d1 required")
    nodes, weights = np.polynomial.legendre.leggauss(t_nodes)
    ts = 0.5 * (nodes + 1)
    total = 0.0
    atoms = np.vstack([mu.atoms, nu.atoms])
    signed = np.concatenate([mu.weights, -nu.weights])
    for t, w in zip(ts, weights):
        mix = EmpiricalMeasure(
            np.vstack([mu.atoms, nu.atoms]),
            np.concatenate([t * mu.weights, (1 - t) * nu.weights]),
        )
        total += 0.5 * w * float(signed @ u.flat_d1(mix, atoms))
    return abs(u(mu) - u(nu) - total)


# ---------------------------------------------------------------------------
# empirical projections


def empirical_projection_grad(u: Functional, x, i):
    """d_{x_i} u(empirical(x)) = (1/N) grad_v du/dm(mu_x)(x_i)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if not 0 <= i < n:
        raise InvalidArgumentError("particle index out of range")
    mu = EmpiricalMeasure(x)
    return u.grad_d1(mu, x[i : i + 1])[0] / n


def empirical_projection_hess(u: Functional, x, i, j):
    """d_{x_j} d_{x_i} u(empirical(x)).

    Equals (1/N^2) d_{v'} (delta/dm) d_v du/dm(mu_x)(x_i, x_j), plus the
    diagonal term (1/N) d_v^2 du/dm(mu_x)(x_i) when i = j.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise InvalidArgumentError("particle index out of range")
    if u.grad_flat_d2 is None or u.hess_d1 is None:
        raise UnsupportedFunctionalError("second derivatives not available")
    mu = EmpiricalMeasure(x)
    out = u.grad_flat_d2(mu, x[i : i + 1], x[j : j + 1])[0] / n**2
    if i == j:
        out = out + u.hess_d1(mu, x[i : i + 1])[0] / n
    return out


# ---------------------------------------------------------------------------
# builtin: linear


def linear_functional(phi, grad_phi, hess_phi=None, lipschitz=1.0, name="linear"):
    """u(mu) = int phi dmu; flat derivative is phi itself, second is zero."""

    def ev(mu):
        return mu.integrate(phi)

    def d1(mu, v):
        return np.asarray(phi(_as_batch(v)), dtype=float)

    def g1(mu, v):
        return np.asarray(grad_phi(_as_batch(v)), dtype=float)

    def h1(mu, v):
        if hess_phi is None:
            raise UnsupportedFunctionalError("no Hessian for this phi")
        return np.asarray(hess_phi(_as_batch(v)), dtype=float)

    def d2(mu, v, vp):
        v = _as_batch(v)
        return np.zeros(v.shape[0])

    def g2(mu, v, vp):
        v = _as_batch(v)
        return np.zeros((v.shape[0], v.shape[1], v.shape[1]))

    return Functional(
        eval=ev,
        flat_d1=d1,
        grad_d1=g1,
        hess_d1=h1 if hess_phi is not None else None,
        flat_d2=d2,
        grad_flat_d2=g2,
        lipschitz_d1=lipschitz,
        lipschitz_d2=0.0,
        name=name,
    )


def sqrt_bump_linear(scale=1.0):
    """The smooth 1-Lipschitz test map phi(x) = scale (sqrt(1+|x|^2) - 1), d=1.

    scale <= 1 keeps the flat derivative 1-Lipschitz (class-C flag).
    """

    def phi(x):
        r = np.linalg.norm(_as_batch(x), axis=1)
        return scale * (np.sqrt(1 + r**2) - 1)

    def grad(x):
        x = _as_batch(x)
        r2 = np.sum(x**2, axis=1, keepdims=True)
        return scale * x / np.sqrt(1 + r2)

    def hess(x):
        x = _as_batch(x)
        d = x.shape[1]
        r2 = np.sum(x**2, axis=1)
        s = np.sqrt(1 + r2)
        eye = np.eye(d)[None]
        outer = x[:, :, None] * x[:, None, :]
        return scale * (eye / s[:, None, None] - outer / s[:, None, None] ** 3)

    return linear_functional(phi, grad, hess, lipschitz=scale, name="sqrt_bump")


# ---------------------------------------------------------------------------
# builtin: smoothed power


def _smoothstep_c2(s):
    """Quintic smoothstep: 0 at 0, 1 at 1, with vanishing 1st/2nd derivatives."""
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10 - 15 * s + 6 * s**2)


def _smoothstep_c2_d1(s):
    inside = (s > 0) & (s < 1)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 30 * s**2 * (1 - s) ** 2, 0.0)


def _smoothstep_c2_d2(s):
    inside = (s > 0) & (s < 1)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 60 * s * (1 - s) * (1 - 2 * s), 0.0)


def cutoff_chi(r, eps):
    """C2 cutoff: 0 on [0, eps], 1 on [2 eps, inf), quintic spline between."""
    return _smoothstep_c2((np.asarray(r, dtype=float) - eps) / eps)


def cutoff_chi_d1(r, eps):
    return _smoothstep_c2_d1((np.asarray(r, dtype=float) - eps) / eps) / eps


def cutoff_chi_d2(r, eps):
    return _smoothstep_c2_d2((np.asarray(r, dtype=float) - eps) / eps) / eps**2


def smoothed_power_functional(beta, eps, name="smoothed_power"):
    """u(mu) = int |v|^beta chi_eps(|v|) dmu, d=1.

    The cutoff removes the origin so the map is smooth for every beta > 0;
    the flat derivative is the integrand itself and is measure-independent.
    """
    if beta <= 0:
        raise InvalidArgumentError("beta must be positive")
    if eps <= 0:
        raise InvalidArgumentError("cutoff eps must be positive")

    def f(v):
        v = _as_batch(v)[:, 0]
        a = np.abs(v)
        return a**beta * cutoff_chi(a, eps)

    def fp(v):
        v = _as_batch(v)[:, 0]
        a = np.abs(v)
        sgn = np.sign(v)
        # the cutoff kills everything below eps, so powers are safe there
        asafe = np.where(a > eps, a, eps)
        val = beta * asafe ** (beta - 1) * cutoff_chi(a, eps)
        val = val + asafe**beta * cutoff_chi_d1(a, eps)
        return sgn * np.where(a > eps, val, 0.0)

    def fpp(v):
        v = _as_batch(v)[:, 0]
        a = np.abs(v)
        asafe = np.where(a > eps, a, eps)
        t1 = beta * (beta - 1) * asafe ** (beta - 2) * cutoff_chi(a, eps)
        t2 = 2 * beta * asafe ** (beta - 1) * cutoff_chi_d1(a, eps)
        t3 = asafe**beta * cutoff_chi_d2(a, eps)
        return np.where(a > eps, t1 + t2 + t3, 0.0)

    def ev(mu):
        return mu.integrate(lambda x: f(x))

    def d1(mu, v):
        return f(v)

    def g1(mu, v):
        return fp(v)[:, None]

    def h1(mu, v):
        return fpp(v)[:, None, None]

    def d2(mu, v, vp):
        v = _as_batch(v)
        return np.zeros(v.shape[0])

    def g2(mu, v, vp):
        v = _as_batch(v)
        return np.zeros((v.shape[0], 1, 1))

    # numeric Lipschitz bound for flat_d1 (sup of |f'|); unbounded for beta > 1
    grid = np.linspace(-4 * eps - 5, 4 * eps + 5, 20001)

    return Functional(
        eval=ev,
        flat_d1=d1,
        grad_d1=g1,
        hess_d1=h1,
        flat_d2=d2,
        grad_flat_d2=g2,
        lipschitz_d1=float(np.max(np.abs(fp(grid)))) if beta < 1 else np.inf,
        lipschitz_d2=0.0,
        name=name,
    )


# ---------------------------------------------------------------------------
# builtin: quadratic


def quadratic_functional(psi, grad_psi, hess_psi=None, lipschitz=1.0, name="quadratic"):
    """u(mu) = int int psi(x - y) dmu(x) dmu(y) for smooth psi."""

    def ev(mu):
        # chunk the pairwise sum: large reference measures would otherwise
        # materialize an n x n x d array
        step = max(1, 2**22 // max(mu.n, 1))
        total = 0.0
        for k in range(0, mu.n, step):
            diff = mu.atoms[k : k + step, None, :] - mu.atoms[None, :, :]
            m = diff.shape[0]
            vals = psi(diff.reshape(-1, mu.d)).reshape(m, mu.n)
            total += mu.weights[k : k + step] @ vals @ mu.weights
        return float(total)

    def d1(mu, v):
        v = _as_batch(v)
        a = v[:, None, :] - mu.atoms[None, :, :]  # v - y
        b = -a  # y - v
        m, n, d = a.shape
        vals = psi(a.reshape(-1, d)).reshape(m, n) + psi(b.reshape(-1, d)).reshape(m, n)
        return vals @ mu.weights

    def g1(mu, v):
        v = _as_batch(v)
        a = v[:, None, :] - mu.atoms[None, :, :]
        m, n, d = a.shape
        ga = grad_psi(a.reshape(-1, d)).reshape(m, n, d)
        gb = grad_psi((-a).reshape(-1, d)).reshape(m, n, d)
        return np.einsum("mnd,n->md", ga - gb, mu.weights)

    def h1(mu, v):
        if hess_psi is None:
            raise UnsupportedFunctionalError("no Hessian for this psi")
        v = _as_batch(v)
        a = v[:, None, :] - mu.atoms[None, :, :]
        m, n, d = a.shape
        ha = hess_psi(a.reshape(-1, d)).reshape(m, n, d, d)
        hb = hess_psi((-a).reshape(-1, d)).reshape(m, n, d, d)
        return np.einsum("mnde,n->mde", ha + hb, mu.weights)

    def d2(mu, v, vp):
        v, vp = _as_batch(v), _as_batch(vp)
        return psi(v - vp) + psi(vp - v)

    def g2(mu, v, vp):
        if hess_psi is None:
            raise UnsupportedFunctionalError("no Hessian for this psi")
        v, vp = _as_batch(v), _as_batch(vp)
        # d_{v'} d_v [psi(v - v') + psi(v' - v)] = -Hess psi(v-v') - Hess psi(v'-v)
        return -(hess_psi(v - vp) + hess_psi(vp - v))

    return Functional(
        eval=ev,
        flat_d1=d1,
        grad_d1=g1,
        hess_d1=h1 if hess_psi is not None else None,
        flat_d2=d2,
        grad_flat_d2=g2 if hess_psi is not None else None,
        lipschitz_d1=2 * lipschitz,
        lipschitz_d2=2 * lipschitz,
        name=name,
    )


def cosine_quadratic(scale=0.25, freq=1.0):
    """Quadratic builtin with psi(x) = scale (1 - cos(freq x)), d=1; smooth,
    bounded, with derivative Lipschitz constant scale freq^2 per psi term."""

    def psi(x):
        x = _as_batch(x)[:, 0]
        return scale * (1 - np.cos(freq * x))

    def gpsi(x):
        x = _as_batch(x)[:, 0]
        return (scale * freq * np.sin(freq * x))[:, None]

    def hpsi(x):
        x = _as_batch(x)[:, 0]
        return (scale * freq**2 * np.cos(freq * x))[:, None, None]

    return quadratic_functional(
        psi, gpsi, hpsi, lipschitz=scale * freq, name="cosine_quadratic"
    )


# ---------------------------------------------------------------------------
# registry for config-driven selection


def builtin_functional(name, **params):
    """Construct a builtin by name; used by experiment configs."""
    if name == "linear_sqrt":
        return sqrt_bump_linear(scale=params.get("scale", 1.0))
    if name == "smoothed_power":
        return smoothed_power_functional(
            beta=params.get("beta", 0.5), eps=params.get("eps", 0.25)
        )
    if name == "cosine_quadratic":
        return cosine_quadratic(
            scale=params.get("scale", 0.25), freq=params.get("freq", 1.0)
        )
    raise InvalidArgumentError(f"unknown functional '{name}'")
