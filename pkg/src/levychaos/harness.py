"""N-sweep experiments: mean-field convergence rates and reporting.

The harness runs replicated particle simulations over a geometric N grid,
estimates the strong error E|u(mu^N_T) - u(mu_T)| and the weak error
|E u(mu^N_T) - u(mu_T)|, fits log-log slopes against the theoretical
exponents -(1 - 1/alpha) (strong, up to a log factor) and -(alpha - 1)
(weak), and measures the empirical-measure sampling rate of the initial
data in W1.

Design notes:
  * the reference u(mu_T) is computed two independent ways (density
    quadrature and a large Monte Carlo sample) and the run aborts if they
    disagree beyond their combined tolerance;
  * with common random numbers enabled, all N share nested particle
    streams within a replication, so error curves are strongly positively
    correlated and slope estimates are much less noisy;
  * every (replication) task is pure given its derived seed, so the rep
    loop may be farmed out to any scheduler; aggregation is
    order-independent sums;
  * slope acceptance is one-sided (fitted slope <= theory + margin)
    because the theory gives upper bounds, with a signal-to-noise guard
    that drops N points whose error is indistinguishable from Monte Carlo
    noise.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import ndtri

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .functionals import Functional, builtin_functional
from .linflow import InvalidArgumentError, MatrixFlow
from .mckv_sim import (
    InitialLaw,
    OUModel,
    sample_event_batch,
    sample_limit_law,
    simulate_particles_exact,
)
from .measures import EmpiricalMeasure, w1_1d
from .stable_noise import SpectralMeasure, StableSpec, derive_rng

SCHEMA_VERSION = 1

SLOPE_MARGIN = 0.15  # one-sided allowance on fitted slopes
SNR_FLOOR = 3.0  # points below this signal/noise are dropped


class ReferenceMismatchError(RuntimeError):
    """The two reference backends for u(mu_T) disagree."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully specified rate experiment.

    Parsed from TOML (see ``from_toml``); the schema is versioned and the
    N grid must be strictly increasing.  ``class_c`` asserts that the
    functional has both flat-derivative Lipschitz constants at most one
    and is verified against the functional's declared constants plus a
    sampled increment check.
    """

    model: OUModel
    functional_name: str
    functional_params: dict = field(default_factory=dict)
    class_c: bool = False
    n_grid: tuple = ()
    replications: int = 200
    reference_samples: int = 200_000
    coupled: bool = True
    seed: int = 0
    out: str = ""

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        object.__setattr__(self, "n_grid", grid)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise InvalidArgumentError("N grid must be strictly increasing")
        if any(n < 1 for n in grid):
            raise InvalidArgumentError("N grid entries must be positive")
        if self.replications < 1 or self.reference_samples < 1:
            raise InvalidArgumentError("replication counts must be positive")
        u = self.functional()
        if self.class_c:
            check_class_c(u)

    def functional(self) -> Functional:
        return builtin_functional(self.functional_name, **self.functional_params)

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data):
        if data.get("schema") != SCHEMA_VERSION:
            raise InvalidArgumentError(
                f"config schema must be {SCHEMA_VERSION}, got {data.get('schema')!r}"
            )
        model = build_model(data["model"])
        fn = data.get("functional", {"name": "linear_sqrt"})
        sweep = data.get("sweep", {})
        return cls(
            model=model,
            functional_name=fn["name"],
            functional_params=dict(fn.get("params", {})),
            class_c=bool(fn.get("class_c", False)),
            n_grid=tuple(sweep.get("n_grid", ())),
            replications=int(sweep.get("replications", 200)),
            reference_samples=int(sweep.get("reference_samples", 200_000)),
            coupled=bool(sweep.get("coupled", True)),
            seed=int(data.get("seed", 0)),
            out=str(data.get("out", "")),
        )


def build_model(block) -> OUModel:
    """OUModel from a config ``[model]`` block."""
    noise_blk = block["noise"]
    trunc = noise_blk.get("trunc")
    noise = StableSpec(
        alpha=float(noise_blk["alpha"]),
        spectral=SpectralMeasure(
            np.asarray(noise_blk["directions"], dtype=float),
            np.asarray(noise_blk["weights"], dtype=float),
        ),
        eps=float(noise_blk.get("eps", 1e-2)),
        trunc=np.inf if trunc is None else float(trunc),
    )
    mu0_blk = block["mu0"]
    mu0 = InitialLaw(mu0_blk["family"], dict(mu0_blk.get("params", {})))
    flow = MatrixFlow(
        np.asarray(block["A"], dtype=float),
        np.asarray(block["Aprime"], dtype=float),
        np.asarray(block["B"], dtype=float),
    )
    return OUModel(
        flow=flow,
        noise=noise,
        mu0=mu0,
        T=float(block.get("T", 1.0)),
        beta=float(block.get("beta", 1.0)),
    )


def check_class_c(u: Functional, n_samples=256, seed=7, width=3.0):
    """Verify the class-C claim: flat-derivative Lipschitz constants <= 1.

    Checks the declared constants and samples increment ratios of flat_d1
    (and flat_d2 when available) over random points and base measures.
    Raises if any check fails.
    """
    if not u.in_class_c:
        raise InvalidArgumentError(
            f"functional '{u.name}' declares Lipschitz constants above 1"
        )
    rng = derive_rng(seed, 97)
    mu = EmpiricalMeasure(rng.normal(size=(8, 1)))
    v = width * rng.normal(size=(n_samples, 1))
    vp = width * rng.normal(size=(n_samples, 1))
    gap = np.abs(np.linalg.norm(v - vp, axis=1))
    keep = gap > 1e-9
    d1 = np.abs(u.flat_d1(mu, v) - u.flat_d1(mu, vp))[keep] / gap[keep]
    if d1.max() > 1.0 + 1e-9:
        raise InvalidArgumentError(
            f"functional '{u.name}' violates the class-C first-derivative bound"
        )
    if u.flat_d2 is not None:
        w = width * rng.normal(size=(n_samples, 1))
        d2 = np.abs(u.flat_d2(mu, v, w) - u.flat_d2(mu, vp, w))[keep] / gap[keep]
        if d2.max() > 1.0 + 1e-9:
            raise InvalidArgumentError(
                f"functional '{u.name}' violates the class-C second-derivative bound"
            )


# ---------------------------------------------------------------------------
# reference value


def reference_value(config: ExperimentConfig, seed=None):
    """u(mu_T) two ways: density quadrature and large-sample Monte Carlo.

    Returns (reference, mc_value, tolerance) where ``reference`` is the
    density-backend value (preferred) and ``tolerance`` is the combined
    disagreement budget.  Raises ReferenceMismatchError if the backends
    disagree beyond it.
    """
    from .kolmogorov import Semigroup, phi

    model = config.model
    u = config.functional()
    seed = config.seed if seed is None else seed

    # density backend needs a finite truncation level; far levels only
    # perturb the law by O(trunc^{1-alpha})
    trunc = model.noise.trunc
    if np.isinf(trunc):
        trunc = 1e6
    mu0_atoms = _initial_quadrature(model.mu0, 257)
    sg = Semigroup(model, trunc, u, backend="density")
    ref, tol_density = phi(sg, model.T, EmpiricalMeasure(mu0_atoms))

    law = sample_limit_law(model, model.noise.trunc, config.reference_samples, seed)
    vals = u.flat_d1(law, law.atoms) if _is_linear(u) else None
    if vals is not None:
        # per-sample values give an honest standard error
        mc = float(vals.mean())
        mc_std = float(vals.std(ddof=1) / math.sqrt(len(vals)))
    else:
        mc = float(u(law))
        # batch the sample into 8 sub-measures for a spread estimate
        parts = np.array_split(law.atoms, 8)
        sub = np.array([u(EmpiricalMeasure(p)) for p in parts])
        mc_std = float(sub.std(ddof=1) / math.sqrt(len(sub)))
    tol = tol_density + 5.0 * mc_std + 1e-6
    if abs(ref - mc) > tol:
        raise ReferenceMismatchError(
            f"reference backends disagree: density {ref:.8g} vs MC {mc:.8g} "
            f"(tolerance {tol:.3g})"
        )
    return ref, mc, tol


def _is_linear(u: Functional):
    return u.lipschitz_d2 == 0.0


def _initial_quadrature(mu0: InitialLaw, n):
    """Equal-weight quantile atoms discretizing a 1d initial law."""
    if mu0.family == "point":
        return np.atleast_2d(mu0.mean())
    if mu0.d != 1:
        raise InvalidArgumentError("density reference needs d = 1")
    us = (np.arange(n) + 0.5) / n
    return quantile_function(mu0)(us)[:, None]


def quantile_function(mu0: InitialLaw):
    """The quantile function u -> Q(u) of a 1d initial law."""
    if mu0.d != 1:
        raise InvalidArgumentError("quantiles implemented for d = 1 only")
    fam, p = mu0.family, mu0.params
    if fam == "point":
        x0 = float(np.atleast_1d(np.asarray(p["x0"], dtype=float))[0])
        return lambda u: np.full_like(np.asarray(u, dtype=float), x0)
    if fam == "uniform":
        lo = float(np.atleast_1d(np.asarray(p["low"], dtype=float))[0])
        hi = float(np.atleast_1d(np.asarray(p["high"], dtype=float))[0])
        return lambda u: lo + (hi - lo) * np.asarray(u, dtype=float)
    if fam == "gaussian":
        m = float(np.atleast_1d(np.asarray(p["mean"], dtype=float))[0])
        s = float(np.broadcast_to(np.asarray(p["std"], dtype=float), (1,))[0])
        return lambda u: m + s * ndtri(np.asarray(u, dtype=float))
    # symmetric shifted-Pareto tail: |X| = scale * (R - 1), R ~ Pareto(q)
    q = float(p["index"])
    scale = float(p.get("scale", 1.0))

    def qf(u):
        u = np.asarray(u, dtype=float)
        hi = scale * ((2.0 * np.clip(1.0 - u, 1e-300, None)) ** (-1.0 / q) - 1.0)
        lo = -scale * ((2.0 * np.clip(u, 1e-300, None)) ** (-1.0 / q) - 1.0)
        return np.where(u >= 0.5, hi, lo)

    return qf


# ---------------------------------------------------------------------------
# report


@dataclass
class RateReport:
    """Per-N errors with bootstrap CIs, fitted slopes, and pass flags."""

    n_grid: list
    strong_errors: list
    strong_ci: list  # [lo, hi] pairs
    weak_errors: list
    weak_ci: list
    strong_slope: float
    strong_slope_ci: list
    weak_slope: float
    weak_slope_ci: list
    theory_strong_exponent: float
    theory_weak_exponent: float
    reference_value: float
    reference_mc: float
    reference_tol: float
    dropped_strong: list
    dropped_weak: list
    passes: dict

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _bootstrap_indices(n_rep, n_boot, rng):
    return rng.integers(0, n_rep, size=(n_boot, n_rep))


def bootstrap_mean_ci(values, rng, n_boot=400, level=0.95):
    """Percentile bootstrap CI for the mean of a 1d sample."""
    values = np.asarray(values, dtype=float)
    idx = _bootstrap_indices(len(values), n_boot, rng)
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def fit_loglog_slope(ns, errs, sigmas=None):
    """Weighted least-squares slope of log(err) against log(N)."""
    ns = np.asarray(ns, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if len(ns) < 2 or np.any(errs <= 0):
        return math.nan
    w = None
    if sigmas is not None:
        sig_log = np.asarray(sigmas, dtype=float) / errs
        if np.all(sig_log > 0):
            w = 1.0 / sig_log  # polyfit weights multiply residuals
    return float(np.polyfit(np.log(ns), np.log(errs), 1, w=w)[0])


def run_sweep(config: ExperimentConfig, seed=None) -> RateReport:
    """Replicated N-sweep of the truncated particle system.

    For each replication and each N, the exact solver is run with noise
    truncated at level N; the strong error averages |u - reference| over
    replications, the weak error is |mean(u) - reference|.  Slope fits
    are bootstrap-calibrated; see the module docstring for the pass
    conventions.
    """
    model = config.model
    model.require_supercritical_alpha()
    u = config.functional()
    seed = config.seed if seed is None else int(seed)
    grid = list(config.n_grid)
    if not grid:
        raise InvalidArgumentError("empty N grid")
    n_max, M = grid[-1], config.replications

    ref, ref_mc, ref_tol = reference_value(config, seed)

    vals = np.empty((len(grid), M))
    for rep in range(M):
        rng = derive_rng(seed, 11, rep)
        gauss_seed = int(derive_rng(seed, 13, rep).integers(2**62))
        if config.coupled:
            X0 = model.mu0.sample(n_max, rng)
            events = sample_event_batch(model.noise, model.T, n_max, rng)
        for k, n in enumerate(grid):
            if config.coupled:
                ev = events.restrict_streams(n).filtered(float(n))
                path = simulate_particles_exact(
                    model, n, trunc_at_N=True, seed=gauss_seed, events=ev, X0=X0[:n]
                )
            else:
                sub = int(derive_rng(seed, 14, rep, k).integers(2**62))
                path = simulate_particles_exact(model, n, trunc_at_N=True, seed=sub)
            vals[k, rep] = u(path.empirical())

    dev = np.abs(vals - ref)
    strong = dev.mean(axis=1)
    weak = np.abs(vals.mean(axis=1) - ref)

    # shared bootstrap resampling keeps the common-random-number coupling
    brng = derive_rng(seed, 15)
    idx = _bootstrap_indices(M, 400, brng)
    s_boot = dev[:, idx.T].mean(axis=1).T  # (n_boot, K)
    w_boot = np.abs(vals[:, idx.T].mean(axis=1).T - ref)
    s_ci = np.quantile(s_boot, [0.025, 0.975], axis=0).T
    w_ci = np.quantile(w_boot, [0.025, 0.975], axis=0).T
    s_sig = s_boot.std(axis=0, ddof=1)
    w_sig = w_boot.std(axis=0, ddof=1)

    # floor guard: drop N whose error is below the Monte Carlo noise floor
    keep_s = strong >= SNR_FLOOR * np.maximum(s_sig, 1e-300)
    keep_w = weak >= SNR_FLOOR * np.maximum(w_sig, 1e-300)
    arr_n = np.asarray(grid, dtype=float)

    def slope_with_ci(err, sig, keep, boot):
        if keep.sum() < 2:
            return math.nan, [math.nan, math.nan]
        s = fit_loglog_slope(arr_n[keep], err[keep], sig[keep])
        bs = [
            fit_loglog_slope(arr_n[keep], b[keep], sig[keep])
            for b in boot
            if np.all(b[keep] > 0)
        ]
        if len(bs) >= 20:
            lo, hi = np.quantile(bs, [0.025, 0.975])
        else:
            lo = hi = math.nan
        return s, [float(lo), float(hi)]

    s_slope, s_slope_ci = slope_with_ci(strong, s_sig, keep_s, s_boot)
    w_slope, w_slope_ci = slope_with_ci(weak, w_sig, keep_w, w_boot)

    alpha = model.noise.alpha
    th_strong = -(1.0 - 1.0 / alpha)
    th_weak = -(alpha - 1.0)
    passes = {}
    if len(grid) >= 2:
        passes["strong"] = bool(
            not math.isnan(s_slope) and s_slope <= th_strong + SLOPE_MARGIN
        )
        passes["weak"] = bool(
            not math.isnan(w_slope)
            and w_slope <= th_weak + SLOPE_MARGIN
            and keep_w[-1]
        )
    return RateReport(
        n_grid=grid,
        strong_errors=[float(x) for x in strong],
        strong_ci=[[float(a), float(b)] for a, b in s_ci],
        weak_errors=[float(x) for x in weak],
        weak_ci=[[float(a), float(b)] for a, b in w_ci],
        strong_slope=s_slope,
        strong_slope_ci=s_slope_ci,
        weak_slope=w_slope,
        weak_slope_ci=w_slope_ci,
        theory_strong_exponent=th_strong,
        theory_weak_exponent=th_weak,
        reference_value=float(ref),
        reference_mc=float(ref_mc),
        reference_tol=float(ref_tol),
        dropped_strong=[int(n) for n, k in zip(grid, keep_s) if not k],
        dropped_weak=[int(n) for n, k in zip(grid, keep_w) if not k],
        passes=passes,
    )


# ---------------------------------------------------------------------------
# initial-data sampling rate


@dataclass
class InitialRateResult:
    n_grid: list
    errors: list  # mean W1 to the true law per N
    slope: float
    slope_ci: list


def _w1_to_law(sorted_xs, qf, gl_nodes, gl_weights):
    """Exact-to-quadrature W1 between an empirical measure and a 1d law.

    W1 = int_0^1 |x_(ceil(uN)) - Q(u)| du, integrated with Gauss-Legendre
    panels on each of the N equal-probability intervals.
    """
    n = len(sorted_xs)
    base = (np.arange(n)[:, None] + 0.5 * (gl_nodes + 1.0)[None, :]) / n
    diff = np.abs(sorted_xs[:, None] - qf(base))
    return float((diff @ gl_weights).sum() / (2.0 * n))


def initial_data_rate(mu0: InitialLaw, n_grid, M=500, seed=0) -> InitialRateResult:
    """Fitted slope of E W1(empirical_N, mu0) over an N grid (d = 1).

    A point mass gives identically zero errors and a NaN slope.
    """
    grid = sorted(int(n) for n in n_grid)
    qf = quantile_function(mu0)
    if mu0.family == "point":
        return InitialRateResult(grid, [0.0] * len(grid), math.nan, [math.nan] * 2)
    gl_nodes, gl_weights = np.polynomial.legendre.leggauss(16)
    errs = np.empty((len(grid), M))
    for k, n in enumerate(grid):
        for rep in range(M):
            rng = derive_rng(seed, 21, k, rep)
            xs = np.sort(mu0.sample(n, rng)[:, 0])
            errs[k, rep] = _w1_to_law(xs, qf, gl_nodes, gl_weights)
    means = errs.mean(axis=1)
    slope = fit_loglog_slope(grid, means)
    brng = derive_rng(seed, 22)
    idx = _bootstrap_indices(M, 200, brng)
    boots = [fit_loglog_slope(grid, errs[:, i].mean(axis=1)) for i in idx]
    lo, hi = np.quantile(boots, [0.025, 0.975])
    return InitialRateResult(grid, [float(x) for x in means], slope, [float(lo), float(hi)])


# ---------------------------------------------------------------------------
# artifact output


def emit_report(report: RateReport, out_dir, stem="rates"):
    """Write CSV + JSON + gnuplot-ready data files; returns written paths.

    Content is a pure function of the report, so identical reports give
    byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = [
        "N",
        "strong_error",
        "strong_lo",
        "strong_hi",
        "weak_error",
        "weak_lo",
        "weak_hi",
    ]
    rows = [
        [
            report.n_grid[i],
            repr(report.strong_errors[i]),
            repr(report.strong_ci[i][0]),
            repr(report.strong_ci[i][1]),
            repr(report.weak_errors[i]),
            repr(report.weak_ci[i][0]),
            repr(report.weak_ci[i][1]),
        ]
        for i in range(len(report.n_grid))
    ]
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    dat_path = out / f"{stem}.dat"
    with open(dat_path, "w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in rows:
            fh.write(" ".join(str(c) for c in row) + "\n")
    json_path = out / f"{stem}.json"
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [csv_path, dat_path, json_path]


def load_report(json_path) -> RateReport:
    with open(json_path) as fh:
        return RateReport.from_dict(json.load(fh))
