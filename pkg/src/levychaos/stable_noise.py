"""Alpha-stable Levy noise: spectral measures, symbols, and samplers.

The Levy measure is nu(dy) = dmu(theta) dr / r^{1+alpha} with a discrete
spherical part mu.  The module provides

* exact annulus masses and compensator drifts,
* the (truncated) Levy symbol through a fast vectorized radial integral,
* a compound-Poisson jump sampler for radii in [eps, trunc) together with
  a Gaussian surrogate for the compensated jumps below eps,
* the Chambers-Mallows-Stuck transform as an independent 1d oracle.

All samplers take an explicit numpy Generator and are deterministic given
it; replications derive independent generators via `derive_rng`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gamma as gamma_fn

from .linflow import InvalidArgumentError

# ---------------------------------------------------------------------------
# spectral measures and specs


@dataclass(frozen=True)
class SpectralMeasure:
    """Discrete measure on the unit sphere: directions theta_i with weights w_i."""

    directions: np.ndarray  # (n, d), unit rows
    weights: np.ndarray  # (n,), positive

    def __post_init__(self):
        dirs = np.atleast_2d(np.asarray(self.directions, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if dirs.shape[0] != w.shape[0]:
            raise InvalidArgumentError("directions and weights must match in length")
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise InvalidArgumentError("spectral directions must be unit vectors")
        if np.any(w <= 0):
            raise InvalidArgumentError("spectral weights must be positive")
        dirs.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "weights", w)

    @property
    def d(self):
        return self.directions.shape[1]

    @property
    def total_weight(self):
        return float(self.weights.sum())

    def quadratic_form(self):
        """sum_i w_i theta_i theta_i^T, whose smallest eigenvalue is eta in (ND)."""
        return np.einsum("i,ij,ik->jk", self.weights, self.directions, self.directions)

    def nondegeneracy_eta(self):
        return float(np.linalg.eigvalsh(self.quadratic_form())[0])

    def is_symmetric(self, tol=1e-12):
        """True iff the measure is invariant under theta -> -theta."""
        items = sorted(
            (tuple(np.round(th, 12)), w)
            for th, w in zip(self.directions, self.weights)
        )
        flipped = sorted(
            (tuple(np.round(-th, 12)), w)
            for th, w in zip(self.directions, self.weights)
        )
        return all(
            a[0] == b[0] and abs(a[1] - b[1]) <= tol for a, b in zip(items, flipped)
        )


def symmetric_pair_1d(total_weight=1.0):
    """The canonical 1d symmetric spectral measure: weight split on +-1."""
    return SpectralMeasure(
        directions=np.array([[1.0], [-1.0]]),
        weights=np.array([total_weight / 2, total_weight / 2]),
    )


def isotropic_2d(n_atoms=8, total_weight=1.0):
    """Evenly spread atoms on the unit circle (symmetric for even n_atoms)."""
    ang = 2 * np.pi * np.arange(n_atoms) / n_atoms
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return SpectralMeasure(dirs, np.full(n_atoms, total_weight / n_atoms))


@dataclass(frozen=True)
class StableSpec:
    """A (possibly truncated) alpha-stable driving noise.

    ``eps`` is the small-jump cutoff below which the compensated jump
    integral is replaced by its Gaussian surrogate; ``trunc`` removes jumps
    of radius >= trunc (np.inf keeps them all).
    """

    alpha: float
    spectral: SpectralMeasure
    eps: float = 1e-2
    trunc: float = np.inf
    nd_eta: float = 1e-10

    def __post_init__(self):
        if not (0 < self.alpha < 2):
            raise InvalidArgumentError("alpha must lie in (0, 2)")
        if self.eps <= 0:
            raise InvalidArgumentError("eps must be positive")
        if not (self.eps < self.trunc or self.eps == self.trunc):
            raise InvalidArgumentError("need eps <= trunc")
        if self.spectral.nondegeneracy_eta() < self.nd_eta:
            raise InvalidArgumentError("spectral measure violates non-degeneracy")

    @property
    def d(self):
        return self.spectral.d

    @property
    def symmetric(self):
        return self.spectral.is_symmetric()

    def with_trunc(self, trunc):
        return StableSpec(self.alpha, self.spectral, self.eps, trunc, self.nd_eta)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "directions": self.spectral.directions.tolist(),
            "weights": self.spectral.weights.tolist(),
            "eps": self.eps,
            "trunc": None if np.isinf(self.trunc) else self.trunc,
        }

    @classmethod
    def from_dict(cls, data):
        spectral = SpectralMeasure(
            np.asarray(data["directions"], dtype=float),
            np.asarray(data["weights"], dtype=float),
        )
        trunc = data.get("trunc")
        return cls(
            alpha=float(data["alpha"]),
            spectral=spectral,
            eps=float(data.get("eps", 1e-2)),
            trunc=np.inf if trunc is None else float(trunc),
        )


# ---------------------------------------------------------------------------
# radial densities: masses, moments, compensators


def _radial_integral(alpha, power, r0, r1):
    """int_{r0}^{r1} r^{power} r^{-1-alpha} dr, with r1 = inf allowed."""
    expo = power - alpha
    if expo == 0:
        if np.isinf(r1):
            raise InvalidArgumentError("divergent radial integral")
        return math.log(r1 / r0)
    if np.isinf(r1):
        if expo > 0:
            raise InvalidArgumentError("divergent radial integral")
        return -(r0**expo) / expo
    return (r1**expo - r0**expo) / expo


def levy_annulus_mass(spec: StableSpec, r0, r1):
    """nu-mass of the annulus r0 <= |z| < r1."""
    if r0 <= 0:
        raise InvalidArgumentError("annulus inner radius must be positive")
    if r1 < r0:
        raise InvalidArgumentError("need r0 <= r1")
    if r1 == r0:
        return 0.0
    return spec.spectral.total_weight * _radial_integral(spec.alpha, 0, r0, r1)


def compensator_drift(spec: StableSpec, r0, r1):
    """int_{r0 <= |z| < r1} z dnu(z): the drift a compensated integral subtracts."""
    if r1 <= r0:
        return np.zeros(spec.d)
    radial = _radial_integral(spec.alpha, 1, r0, r1)
    return radial * (spec.spectral.weights[:, None] * spec.spectral.directions).sum(
        axis=0
    )


def small_jump_gaussian_cov(spec: StableSpec):
    """Covariance of the Gaussian surrogate for compensated jumps below eps.

    Sigma_eps = int_{|z|<eps} z z^T dnu = eps^{2-alpha}/(2-alpha) * sum w theta theta^T.
    """
    scale = spec.eps ** (2 - spec.alpha) / (2 - spec.alpha)
    return scale * spec.spectral.quadratic_form()


# ---------------------------------------------------------------------------
# the radial symbol kernel G(x) = int_0^x (e^{iu} - 1 - iu) u^{-1-alpha} du

_SERIES_CUT = 2.0
_TABLE_MAX = 60.0
_PANEL = 0.05
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


def _integrand(u, alpha):
    return (np.exp(1j * u) - 1.0 - 1j * u) * u ** (-1.0 - alpha)


def _series_G(x, alpha, nterms=48):
    """Power series sum_{k>=2} i^k x^{k-alpha}/(k! (k-alpha)); for x <= ~4."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape, dtype=complex)
    term_coef = 1.0 + 0j
    for k in range(1, nterms + 1):
        term_coef *= 1j / k
        if k >= 2:
            out += term_coef / (k - alpha) * x ** (k - alpha)
    return out


def _tail_E(x, alpha, max_terms=30):
    """E(x) = int_x^inf e^{iu} u^{-1-alpha} du, asymptotic series (x >= ~40)."""
    x = np.asarray(x, dtype=float)
    nu = 1.0 + alpha
    out = np.zeros(x.shape, dtype=complex)
    coef = np.ones(x.shape, dtype=complex)
    phase = 1j * np.exp(1j * x)
    power = x**-nu
    for m in range(max_terms):
        term = coef * phase * power
        out += term
        coef = coef * (-1j) * (nu + m)
        power = power / x
        if np.max(np.abs(coef * power)) < 1e-16:
            break
    return out


class _GTable:
    """Cached evaluator of G for a fixed alpha, accurate to ~1e-12 absolute."""

    def __init__(self, alpha):
        self.alpha = alpha
        edges = np.arange(_SERIES_CUT, _TABLE_MAX + _PANEL / 2, _PANEL)
        mids = 0.5 * (edges[:-1] + edges[1:])
        half = _PANEL / 2
        nodes = mids[:, None] + half * _GL_NODES[None, :]
        vals = _integrand(nodes, alpha) @ _GL_WEIGHTS * half
        self.edges = edges
        self.prefix = np.concatenate(
            [[_series_G(np.array(_SERIES_CUT), alpha)], np.cumsum(vals) + _series_G(np.array(_SERIES_CUT), alpha)]
        )
        self.G_top = self.prefix[-1]
        self.E_top = _tail_E(np.array(_TABLE_MAX), alpha)

    def _quad_region(self, x):
        j = np.clip(((x - _SERIES_CUT) / _PANEL).astype(int), 0, len(self.edges) - 2)
        lo = self.edges[j]
        half = 0.5 * (x - lo)
        nodes = (lo + half)[:, None] + half[:, None] * _GL_NODES[None, :]
        resid = (_integrand(nodes, self.alpha) @ _GL_WEIGHTS) * half
        return self.prefix[j] + resid

    def _beyond(self, x):
        # G(x) = G(60) + int_60^x (e^{iu}-1-iu) u^{-1-a} du, analytic pieces + E.
        a = self.alpha
        minus_one = -_radial_integral_arr(a, 0, _TABLE_MAX, x)
        minus_iu = -1j * _radial_integral_arr(a, 1, _TABLE_MAX, x)
        return self.G_top + (self.E_top - _tail_E(x, a)) + minus_one + minus_iu

    def G(self, x):
        """Vectorized G(x) for x >= 0."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=complex)
        flat_x = x.ravel()
        flat = out.ravel()
        small = flat_x <= _SERIES_CUT
        mid = (~small) & (flat_x <= _TABLE_MAX)
        big = flat_x > _TABLE_MAX
        if small.any():
            flat[small] = _series_G(flat_x[small], self.alpha)
        if mid.any():
            flat[mid] = self._quad_region(flat_x[mid])
        if big.any():
            flat[big] = self._beyond(flat_x[big])
        return out

    def G_inf(self):
        """G(inf) = Gamma(-alpha) e^{-i pi alpha / 2}; requires alpha > 1."""
        a = self.alpha
        if a <= 1:
            raise InvalidArgumentError(
                "fully compensated infinite-radius symbol needs alpha > 1"
            )
        return gamma_fn(-a) * np.exp(-1j * np.pi * a / 2)


def _radial_integral_arr(alpha, power, r0, r1):
    """Array version of the plain radial power integral (finite bounds)."""
    expo = power - alpha
    if expo == 0:
        return np.log(np.asarray(r1) / r0)
    return (np.asarray(r1) ** expo - np.asarray(r0) ** expo) / expo


@lru_cache(maxsize=32)
def _g_table(alpha):
    return _GTable(alpha)


def _radial_symbol(alpha, s, r0, r1, compensated):
    """int_{r0}^{r1} (e^{irs} - 1 - irs[compensated]) r^{-1-alpha} dr, vectorized in s."""
    s = np.asarray(s, dtype=float)
    tab = _g_table(float(alpha))
    absd = np.abs(s)
    out = np.zeros(s.shape, dtype=complex)
    nz = absd > 0
    sa = absd[nz]
    if np.isinf(r1):
        upper = np.full(sa.shape, tab.G_inf())
    else:
        upper = tab.G(r1 * sa)
    lower = tab.G(r0 * sa) if r0 > 0 else 0.0
    val = (upper - lower) * sa**alpha
    val = np.where(s[nz] < 0, np.conj(val), val)
    if not compensated:
        # add back int i r s r^{-1-alpha} dr over [r0, r1] (needs finite bounds)
        if r0 <= 0 or np.isinf(r1):
            raise InvalidArgumentError("uncompensated symbol needs 0 < r0 <= r1 < inf")
        val = val + 1j * s[nz] * _radial_integral(alpha, 1, r0, r1)
    out[nz] = val
    return out


def annulus_symbol(spec: StableSpec, lam, r0, r1, compensated=True):
    """Levy symbol contribution of jumps with radius in [r0, r1).

    With compensation this is int (e^{i<lam,z>} - 1 - i<lam,z>) dnu over the
    annulus; without it the -i<lam,z> term is dropped.  ``lam`` has shape
    (..., d); the result has shape (...,).
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    s = lam @ spec.spectral.directions.T  # (..., n_atoms)
    vals = _radial_symbol(spec.alpha, s, r0, r1, compensated)
    return np.squeeze(vals @ spec.spectral.weights)


def truncated_symbol(spec: StableSpec, lam, delta):
    """psi_delta(lam) = int_{|y|<delta} [e^{i<lam,y>} - 1 - i<lam,y>] dnu(y)."""
    if not delta > 0:
        raise InvalidArgumentError("delta must be positive")
    return annulus_symbol(spec, lam, 0.0, delta, compensated=True)


def sampler_symbol(spec: StableSpec, lam, compensated_big=True):
    """Levy symbol of the law produced by the decomposition sampler.

    Gaussian surrogate below eps plus compensated jumps in [eps, min(1,trunc))
    plus jumps in [1, trunc) (compensated iff ``compensated_big``).
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    cov = small_jump_gaussian_cov(spec)
    gauss = -0.5 * np.einsum("...i,ij,...j->...", lam, cov, lam)
    out = gauss.astype(complex)
    lo, hi = spec.eps, spec.trunc
    if hi > lo:
        split = min(1.0, hi)
        if split > lo:
            out = out + annulus_symbol(spec, lam, lo, split, compensated=True)
        if hi > max(1.0, lo):
            out = out + annulus_symbol(
                spec, lam, max(1.0, lo), hi, compensated=compensated_big
            )
    return np.squeeze(out)


# ---------------------------------------------------------------------------
# samplers


def derive_rng(root_seed, *indices):
    """Deterministic per-task generator: independent streams for each index path."""
    ss = np.random.SeedSequence(root_seed, spawn_key=tuple(int(i) for i in indices))
    return np.random.default_rng(ss)


def sample_radii(spec: StableSpec, n, rng, r0=None, r1=None):
    """Inverse-CDF Pareto radii r^{-1-alpha} on [r0, r1); branch-free."""
    a = spec.alpha
    r0 = spec.eps if r0 is None else r0
    r1 = spec.trunc if r1 is None else r1
    u = rng.random(n)
    hi = 0.0 if np.isinf(r1) else r1 ** (-a)
    return (r0 ** (-a) - u * (r0 ** (-a) - hi)) ** (-1.0 / a)


def sample_directions(spec: StableSpec, n, rng):
    """Atom directions drawn proportionally to the spectral weights."""
    w = spec.spectral.weights
    idx = rng.choice(len(w), size=n, p=w / w.sum())
    return spec.spectral.directions[idx]


@dataclass
class JumpEventStream:
    """Sorted jump events on [0, T] with radius in [eps, trunc).

    Compensator rates are per unit time; ``drift_small`` covers radii in
    [eps, 1) (always subtracted when the caller realizes the compensated
    integral), ``drift_big`` covers [1, trunc) and is exposed so callers can
    assemble either the plain or the compensated big-jump integral.
    """

    times: np.ndarray
    marks: np.ndarray  # (n, d)
    drift_small: np.ndarray
    drift_big: np.ndarray
    T: float

    def total_compensator(self):
        return self.drift_small + self.drift_big


def sample_jump_stream(spec: StableSpec, T, rng) -> JumpEventStream:
    """Compound-Poisson jump stream of all jumps with radius in [eps, trunc)."""
    if T <= 0:
        raise InvalidArgumentError("horizon must be positive")
    lo, hi = spec.eps, spec.trunc
    if hi <= lo:
        n = 0
    else:
        rate = levy_annulus_mass(spec, lo, hi)
        n = rng.poisson(rate * T)
    times = np.sort(rng.random(n)) * T
    radii = sample_radii(spec, n, rng, lo, hi)
    dirs = sample_directions(spec, n, rng)
    marks = radii[:, None] * dirs
    drift_small = compensator_drift(spec, lo, min(1.0, hi))
    drift_big = (
        compensator_drift(spec, max(1.0, lo), hi)
        if hi > max(1.0, lo) and spec.alpha > 1
        else np.zeros(spec.d)
    )
    if hi > max(1.0, lo) and spec.alpha <= 1 and not spec.symmetric:
        if not np.isinf(hi):
            drift_big = compensator_drift(spec, max(1.0, lo), hi)
    return JumpEventStream(times, marks, drift_small, drift_big, float(T))


def sample_increments(spec: StableSpec, T, n, rng, compensated_big=True):
    """n i.i.d. copies of the driver increment Z_T, shape (n, d).

    Gaussian surrogate below eps, Pareto jumps in [eps, trunc), compensator
    drift per the spec bookkeeping.  Fully vectorized over samples.
    """
    d = spec.d
    lo, hi = spec.eps, spec.trunc
    cov = small_jump_gaussian_cov(spec) * T
    chol = np.linalg.cholesky(cov + 1e-30 * np.eye(d))
    out = rng.standard_normal((n, d)) @ chol.T
    if hi > lo:
        rate = levy_annulus_mass(spec, lo, hi)
        counts = rng.poisson(rate * T, size=n)
        total = int(counts.sum())
        radii = sample_radii(spec, total, rng, lo, hi)
        dirs = sample_directions(spec, total, rng)
        owner = np.repeat(np.arange(n), counts)
        np.add.at(out, owner, radii[:, None] * dirs)
        drift = compensator_drift(spec, lo, min(1.0, hi))
        if compensated_big and hi > max(1.0, lo):
            drift = drift + compensator_drift(spec, max(1.0, lo), hi)
        out -= T * drift
    return out


def sample_stable_oracle_1d(alpha, scale, n, seed):
    """Exact symmetric alpha-stable samples via the Chambers-Mallows-Stuck transform.

    Scale convention: characteristic function exp(-scale^alpha |lam|^alpha).
    Validation oracle only; independent of the decomposition sampler.
    """
    if not (0 < alpha < 2):
        raise InvalidArgumentError("alpha must lie in (0, 2)")
    if scale <= 0:
        raise InvalidArgumentError("scale must be positive")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    u = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    w = rng.exponential(1.0, size=n)
    if abs(alpha - 1.0) < 1e-12:
        return scale * np.tan(u)
    x = (
        np.sin(alpha * u)
        / np.cos(u) ** (1.0 / alpha)
        * (np.cos(u - alpha * u) / w) ** ((1.0 - alpha) / alpha)
    )
    return scale * x


def stable_scale_constant(alpha):
    """C(alpha) with psi_inf(lam) = -C |lam|^alpha for unit-weight symmetric 1d noise.

    C(alpha) = -Gamma(-alpha) cos(pi alpha / 2), with the limit pi/2 at alpha = 1.
    """
    if not (0 < alpha < 2):
        raise InvalidArgumentError("alpha must lie in (0, 2)")
    if abs(alpha - 1.0) < 1e-12:
        return math.pi / 2
    return float(-gamma_fn(-alpha) * math.cos(math.pi * alpha / 2))
