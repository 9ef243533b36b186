"""Empirical measures, moments, and exact Wasserstein distances at desk scale.

Distances are exact (sorting in 1d, assignment / min-cost flow otherwise); no
entropic or sampled approximations, so rate fits downstream see only Monte
Carlo noise, never solver bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .linflow import InvalidArgumentError


class CapacityError(ValueError):
    """Raised when an exact solver is asked for more atoms than it supports."""


_ASSIGN_MAX = 2048
_FLOW_MAX = 512


@dataclass(frozen=True)
class EmpiricalMeasure:
    """A finitely supported probability measure sum_k w_k delta_{x_k}."""

    atoms: np.ndarray  # (N, d)
    weights: np.ndarray = None  # (N,), defaults to uniform

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise InvalidArgumentError("atoms must be a nonempty (N, d) array")
        if not np.all(np.isfinite(atoms)):
            raise InvalidArgumentError("atoms must be finite")
        if self.weights is None:
            w = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float)
        if w.shape != (atoms.shape[0],):
            raise InvalidArgumentError("weights must match the atom count")
        if np.any(w < -1e-15) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("weights must be a probability vector")
        atoms = atoms.copy()
        w = np.clip(w, 0.0, None)
        atoms.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @property
    def n(self):
        return self.atoms.shape[0]

    @property
    def d(self):
        return self.atoms.shape[1]

    @property
    def uniform(self):
        return np.allclose(self.weights, 1.0 / self.n, atol=1e-14)

    def mean(self):
        return self.weights @ self.atoms

    def moment(self, beta):
        """M_beta: (sum w |x|^beta)^{1/beta} for beta >= 1, no root below 1."""
        if beta <= 0:
            raise InvalidArgumentError("moment order must be positive")
        raw = float(self.weights @ np.linalg.norm(self.atoms, axis=1) ** beta)
        return raw ** (1.0 / beta) if beta >= 1 else raw

    def integrate(self, f):
        """int f dmu for a vectorized f taking (N, d) atoms."""
        return float(self.weights @ np.asarray(f(self.atoms), dtype=float))

    def translate(self, c):
        return EmpiricalMeasure(self.atoms + np.asarray(c, dtype=float), self.weights)

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.atoms, self.weights]), delimiter=",")

    @classmethod
    def from_csv(cls, path):
        data = np.atleast_2d(np.loadtxt(path, delimiter=","))
        return cls(data[:, :-1], data[:, -1])


def empirical(points):
    """Uniform empirical measure on the given points."""
    return EmpiricalMeasure(np.asarray(points, dtype=float))


@dataclass(frozen=True)
class MeasureMoment:
    beta: float
    value: float

    def __post_init__(self):
        if self.beta <= 0:
            raise InvalidArgumentError("moment order must be positive")
        if self.value < 0:
            raise InvalidArgumentError("moment value must be nonnegative")


def measure_moment(mu: EmpiricalMeasure, beta):
    return MeasureMoment(beta, mu.moment(beta))


# ---------------------------------------------------------------------------
# Wasserstein distances


def _check_1d(mu, nu):
    if mu.d != 1 or nu.d != 1:
        raise InvalidArgumentError("1d solver requires one-dimensional atoms")


def w1_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    """Exact W1 in d=1: the L1 distance between the two CDFs.

    Handles general weights; ties in the sort are broken by atom index so the
    result is deterministic.
    """
    _check_1d(mu, nu)
    xs = np.concatenate([mu.atoms[:, 0], nu.atoms[:, 0]])
    # signed weights: +w for mu, -w for nu; stable sort keeps index order on ties
    dw = np.concatenate([mu.weights, -nu.weights])
    order = np.argsort(xs, kind="stable")
    xs, dw = xs[order], dw[order]
    cdf_gap = np.cumsum(dw)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(xs)))


def _cost_matrix(mu, nu, beta=1.0):
    diff = mu.atoms[:, None, :] - nu.atoms[None, :, :]
    c = np.linalg.norm(diff, axis=2)
    return c if beta == 1.0 else c**beta


def _ot_cost(mu, nu, beta):
    """Exact optimal transport cost for ground cost |x-y|^beta (no root)."""
    if mu.uniform and nu.uniform and mu.n == nu.n:
        if mu.n > _ASSIGN_MAX:
            raise CapacityError(f"assignment solver capped at N={_ASSIGN_MAX}")
        cost = _cost_matrix(mu, nu, beta)
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum()) / mu.n
    if max(mu.n, nu.n) > _FLOW_MAX:
        raise CapacityError(f"min-cost flow solver capped at N={_FLOW_MAX}")
    cost = _cost_matrix(mu, nu, beta)
    m, n = mu.n, nu.n
    # transport LP: minimize <c, pi> s.t. row sums = mu.weights, col sums = nu.weights
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n : (i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def w1_exact(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    """Exact W1 in any dimension via assignment (uniform) or min-cost flow."""
    return _ot_cost(mu, nu, 1.0)


def w_beta(mu: EmpiricalMeasure, nu: EmpiricalMeasure, beta):
    """Exact W_beta: cost |x-y|^beta, with the 1/beta root applied iff beta >= 1."""
    if not (0 < beta <= 2):
        raise InvalidArgumentError("beta must lie in (0, 2]")
    cost = _ot_cost(mu, nu, beta)
    return cost ** (1.0 / beta) if beta >= 1 else cost
