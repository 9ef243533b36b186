"""Command-line entry points.

Every subcommand reads a versioned TOML config, derives all randomness
from the --seed argument, and writes CSV + JSON artifacts into --out.
Output content is a pure function of (config, seed), so reruns are
byte-identical.  The process exits 0 iff every pass flag in the emitted
summary is true.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .harness import (
    SCHEMA_VERSION,
    ExperimentConfig,
    build_model,
    emit_report,
    fit_loglog_slope,
    run_sweep,
)
from .density_fourier import invert_density
from .functionals import builtin_functional
from .ito_check import ItoExperiment, ito_residual
from .linflow import InvalidArgumentError, mean_flow
from .measures import EmpiricalMeasure
from .mckv_sim import simulate_particles_exact
from .stable_noise import derive_rng


def _load_config(path):
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    if data.get("schema") != SCHEMA_VERSION:
        raise click.ClickException(
            f"config schema must be {SCHEMA_VERSION}, got {data.get('schema')!r}"
        )
    return data


def _functional(data, blk=None):
    # a command block may override the top-level functional choice
    spec = (blk or {}).get("functional") or data.get("functional", {"name": "linear_sqrt"})
    return builtin_functional(spec["name"], **spec.get("params", {}))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _finish(out, summary, name="summary.json"):
    _write_json(Path(out) / name, summary)
    ok = all(bool(v) for k, v in summary.items() if k == "pass" or k.endswith("_pass"))
    click.echo(f"pass: {ok}")
    sys.exit(0 if ok else 1)


def _finite_trunc(data, block, model):
    trunc = data.get(block, {}).get("trunc", model.noise.trunc)
    if np.isinf(trunc):
        raise click.ClickException(f"[{block}] needs a finite truncation level")
    return float(trunc)


common = [
    click.option("--config", "config_path", required=True, type=click.Path(exists=True)),
    click.option("--seed", default=0, type=click.IntRange(0, 2**64 - 1)),
    click.option(
        "--out", "out_dir", required=True, type=click.Path(file_okay=False)
    ),
]


def _with_common(fn):
    for deco in reversed(common):
        fn = deco(fn)
    return fn


@click.group()
def main():
    """Mean-field stable-noise simulation and verification experiments."""


@main.command()
@_with_common
def simulate(config_path, seed, out_dir):
    """Replicated exact particle simulation with a mean-flow identity check."""
    data = _load_config(config_path)
    model = build_model(data["model"])
    blk = data.get("simulate", {})
    n = int(blk.get("n", 200))
    reps = int(blk.get("replications", 100))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    rep_means = np.empty((reps, model.d))
    for rep in range(reps):
        sub = int(derive_rng(seed, 31, rep).integers(2**62))
        path = simulate_particles_exact(model, n, seed=sub)
        rep_means[rep] = path.terminal.mean(axis=0)
        for i in range(n):
            for k in range(model.d):
                rows.append([rep, i, k, repr(float(path.terminal[i, k]))])
    _write_csv(out / "particles.csv", ["replication", "particle", "dim", "value"], rows)

    expected = mean_flow(model.flow, model.mu0.mean(), model.T)
    got = rep_means.mean(axis=0)
    se = rep_means.std(axis=0, ddof=1) / np.sqrt(reps)
    ok = bool(np.all(np.abs(got - expected) <= 3 * se + 1e-12))
    _finish(
        out,
        {
            "empirical_mean": got.tolist(),
            "expected_mean": np.asarray(expected).tolist(),
            "standard_error": se.tolist(),
            "pass": ok,
        },
    )


@main.command("rate-fit")
@_with_common
def rate_fit(config_path, seed, out_dir):
    """N-sweep error rates with slope fits against theory."""
    data = _load_config(config_path)
    cfg = ExperimentConfig.from_dict(data)
    report = run_sweep(cfg, seed=seed)
    out = Path(out_dir)
    emit_report(report, out)
    summary = report.to_dict()
    summary["pass"] = bool(report.passes) and all(report.passes.values())
    _finish(out, summary)


@main.command()
@_with_common
def density(config_path, seed, out_dir):
    """FFT densities of the driving flow at configured times, with mass check."""
    data = _load_config(config_path)
    model = build_model(data["model"])
    blk = data.get("density", {})
    trunc = _finite_trunc(data, "density", model) if "trunc" in blk else model.noise.trunc
    times = [float(t) for t in blk.get("times", [model.T])]
    n = int(blk.get("n", 2**14))
    extent = blk.get("extent")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    masses = []
    for idx, t in enumerate(times):
        grid = invert_density(model, trunc, t, extent=extent, n=n)
        _write_csv(
            out / f"density_{idx}.csv",
            ["x", "p"],
            [[repr(float(x)), repr(float(p))] for x, p in zip(grid.x, grid.p)],
        )
        masses.append(grid.mass())
    _finish(
        out,
        {
            "times": times,
            "masses": masses,
            "pass": bool(all(abs(m - 1) <= 1e-6 for m in masses)),
        },
    )


@main.command("ito-check")
@_with_common
def ito_check_cmd(config_path, seed, out_dir):
    """Residual of the measure-flow change-of-variables identity."""
    data = _load_config(config_path)
    model = build_model(data["model"])
    blk = data.get("ito", {})
    u = _functional(data, blk)
    b_const = blk.get("b")
    sigma_const = blk.get("sigma")
    exp = ItoExperiment(
        driver=model.noise,
        u=u,
        mu0=model.mu0,
        t=float(blk.get("t", model.T)),
        b=(lambda s: np.asarray(b_const, dtype=float)) if b_const is not None else None,
        sigma=(lambda s: np.asarray(sigma_const, dtype=float))
        if sigma_const is not None
        else None,
        beta_growth=float(blk.get("beta_growth", 1.2)),
        gamma_holder=float(blk.get("gamma_holder", 1.0)),
        M=int(blk.get("replications", 10_000)),
        n_nodes=int(blk.get("n_nodes", 64)),
    )
    result = ito_residual(exp, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "ito.csv",
        ["quantity", "value"],
        [[k, repr(float(v))] for k, v in result.items() if k != "pass"],
    )
    _finish(out, result)


@main.command("pde-residual")
@_with_common
def pde_residual_cmd(config_path, seed, out_dir):
    """Backward-equation residual on a (time, measure) grid."""
    from .kolmogorov import Semigroup, pde_residual, phi

    data = _load_config(config_path)
    model = build_model(data["model"])
    blk = data.get("pde", {})
    u = _functional(data, blk)
    trunc = _finite_trunc(data, "pde", model)
    ts = [float(t) for t in blk.get("times", [model.T / 2])]
    n_mu = int(blk.get("measures", 4))
    n_atoms = int(blk.get("atoms", 5))
    h = float(blk.get("h", 0.02))

    rng = derive_rng(seed, 41)
    mus = [EmpiricalMeasure(rng.normal(size=(n_atoms, model.d))) for _ in range(n_mu)]
    sg = Semigroup(model, trunc, u, backend="density")
    result = pde_residual(sg, ts, mus, h=h)
    values = [[phi(sg, t, mu)[0] for mu in mus] for t in ts]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, t in enumerate(ts):
        for j in range(n_mu):
            rows.append(
                [
                    repr(t),
                    j,
                    repr(values[i][j]),
                    repr(float(result["residuals"][i, j])),
                    repr(float(result["tolerances"][i, j])),
                ]
            )
    _write_csv(
        out / "pde.csv", ["t", "measure", "value", "residual", "tolerance"], rows
    )
    _finish(
        out,
        {
            "grid": {
                "ts": ts,
                "measures": [mu.atoms.tolist() for mu in mus],
            },
            "values": values,
            "residuals": result["residuals"].tolist(),
            "tolerances": result["tolerances"].tolist(),
            "pass": result["pass"],
        },
    )


@main.command("generator-gap")
@_with_common
def generator_gap_cmd(config_path, seed, out_dir):
    """Empirical-projection generator error over an N grid with slope fit."""
    from .kolmogorov import Semigroup, generator_gap

    data = _load_config(config_path)
    model = build_model(data["model"])
    blk = data.get("generator_gap", {})
    u = _functional(data, blk)
    trunc = _finite_trunc(data, "generator_gap", model)
    grid = [int(n) for n in blk.get("n_grid", [8, 16, 32, 64, 128, 256])]
    slope_tol = float(blk.get("slope_tol", 0.2))

    sg = Semigroup(model, trunc, u, backend="density")
    rng = derive_rng(seed, 42)
    particles, limits, gaps = [], [], []
    for n in grid:
        x = model.mu0.sample(n, rng)
        p, l, g = generator_gap(sg, 0.0, x)
        particles.append(p)
        limits.append(l)
        gaps.append(abs(g))
    slope = fit_loglog_slope(grid, gaps)
    if max(gaps) < 1e-12 or len(grid) < 2:
        ok = True  # gap vanishes identically (linear functionals)
    else:
        ok = bool(np.isfinite(slope) and abs(slope + 1.0) <= slope_tol)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "generator_gap.csv",
        ["N", "particle", "limit", "gap"],
        [
            [n, repr(p), repr(l), repr(g)]
            for n, p, l, g in zip(grid, particles, limits, gaps)
        ],
    )
    _finish(
        out,
        {
            "grid": grid,
            "values": {"particle": particles, "limit": limits},
            "residuals": gaps,
            "tolerances": {"slope": -1.0, "slope_tol": slope_tol},
            "fitted_slope": slope,
            "pass": ok,
        },
    )


if __name__ == "__main__":
    main()
