"""Reproducible experiment runner.

Subcommands
-----------
``run <config>``
    Execute one registered experiment; write ``report.json``, CSV tables,
    optional SVG plots, and finally ``manifest.json`` (the manifest is
    written last, so its presence marks a completed run).
``list``
    Print the experiment registry with one-line claims.
``seed-check <config>``
    Run the experiment twice with the same seed and byte-compare the
    numeric outputs (all CSV files plus ``report.json``).

Config format
-------------
Flat ``key = value`` lines; values are JSON; ``#`` starts a comment.
Dotted keys group settings (``geometry.L``, ``model.b``, ``init.u``,
``opts.t_grid``, ``tolerance.z``).  Initial fields are specs like
``["flat", 0.5]``, ``["point", 3, 2.0]``, ``["points", [[1,1.0],[31,2.0]]]``
or ``["values", [0.1, 0.2, ...]]``.  Every experiment ships defaults, so
a minimal config is just ``experiment = "martingale"`` plus overrides.

Exit codes: 0 pass, 1 statistical fail (or seed-check mismatch),
2 usage/config error, 3 numerical blowup.

The output root is the current directory unless ``SYMBRANCH_OUTPUT_ROOT``
is set; ``output_dir`` from the config is resolved against that root.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .errors import ConfigurationError, NumericalBlowupError
from .heat import negative_mass_path, q_compensator, solve_heat
from .lattice import (
    Field,
    Geometry,
    b2,
    green_origin,
    make_geometry,
    mc_occupation_time,
    return_probabilities,
)
from .particle import ParticleParams, scaling_bridge, simulate_particles
from .sde import SbmParams, pam_ensemble, simulate_sbm

OUTPUT_ROOT_ENV = "SYMBRANCH_OUTPUT_ROOT"

_EVENT_NAMES = ("mig_x", "mig_y", "pair", "ind_x", "ind_y")


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines (JSON values, # comments)."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            # allow trailing comments after the value
            head = value.split("#", 1)[0].strip()
            try:
                parsed = json.loads(head)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(
                    f"config line {lineno}: value {value!r} is not valid JSON"
                ) from exc
        if key in out:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = parsed
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved run request (registry defaults + file overrides)."""

    experiment: str
    d: int
    L: int
    b: float
    rho: float
    dt: float
    T: float
    bound: float | None
    init: dict
    replicas: int
    seed: int
    output_dir: str | None
    plots: bool
    tolerances: dict
    options: dict

    def flat(self) -> dict:
        """Config echo in the flat dotted-key form (for reports)."""
        out = {
            "experiment": self.experiment,
            "geometry.d": self.d,
            "geometry.L": self.L,
            "model.b": self.b,
            "model.rho": self.rho,
            "model.dt": self.dt,
            "model.T": self.T,
            "replicas": self.replicas,
            "seed": self.seed,
            "plots": self.plots,
        }
        if self.bound is not None:
            out["model.bound"] = self.bound
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        for k, v in sorted(self.init.items()):
            out[f"init.{k}"] = v
        for k, v in sorted(self.tolerances.items()):
            out[f"tolerance.{k}"] = v
        for k, v in sorted(self.options.items()):
            out[f"opts.{k}"] = v
        return out


_SCALAR_KEYS = {
    "experiment", "replicas", "seed", "output_dir", "plots",
    "geometry.d", "geometry.L",
    "model.b", "model.rho", "model.dt", "model.T", "model.bound",
}
_GROUP_PREFIXES = ("init.", "tolerance.", "opts.")


def config_from_mapping(flat: dict) -> ExperimentConfig:
    name = flat.get("experiment")
    if not isinstance(name, str):
        raise ConfigurationError("config must set experiment = \"<name>\"")
    if name not in REGISTRY:
        known = ", ".join(REGISTRY)
        raise ConfigurationError(f"unknown experiment {name!r}; known: {known}")
    merged = dict(REGISTRY[name].defaults)
    merged.update(flat)

    unknown = [
        k for k in merged
        if k not in _SCALAR_KEYS and not k.startswith(_GROUP_PREFIXES)
    ]
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in merged.items() if k.startswith(prefix)}

    bound = merged.get("model.bound")
    return ExperimentConfig(
        experiment=name,
        d=int(merged.get("geometry.d", 1)),
        L=int(merged.get("geometry.L", 16)),
        b=float(merged.get("model.b", 1.0)),
        rho=float(merged.get("model.rho", 0.0)),
        dt=float(merged.get("model.dt", 1e-3)),
        T=float(merged.get("model.T", 1.0)),
        bound=None if bound is None else float(bound),
        init=group("init."),
        replicas=int(merged.get("replicas", 1000)),
        seed=int(merged.get("seed", 1729)),
        output_dir=merged.get("output_dir"),
        plots=bool(merged.get("plots", False)),
        tolerances=group("tolerance."),
        options=group("opts."),
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    return config_from_mapping(parse_config_text(text))


def build_field(spec, geometry: Geometry, nonneg: bool = True) -> Field:
    """Construct a field from a config spec.

    Specs: ``["flat", value]``, ``["point", site, mass]``,
    ``["points", [[site, mass], ...]]``, ``["values", [...]]``.  Sites
    may be flat indices or coordinate lists.
    """
    err = f"bad field spec {spec!r}"
    if not isinstance(spec, (list, tuple)) or not spec or not isinstance(spec[0], str):
        raise ConfigurationError(err)
    kind, *rest = spec

    def site_key(s):
        # point_masses wants coordinate tuples; accept flat indices too
        if isinstance(s, (list, tuple)):
            return tuple(int(c) for c in s)
        return geometry.coords_of(int(s))

    if kind == "flat" and len(rest) == 1:
        return Field.constant(geometry, float(rest[0]), nonneg=nonneg)
    if kind == "point" and len(rest) == 2:
        return Field.point_masses(
            geometry, {site_key(rest[0]): float(rest[1])}, nonneg=nonneg
        )
    if kind == "points" and len(rest) == 1:
        masses = {site_key(s): float(m) for s, m in rest[0]}
        return Field.point_masses(geometry, masses, nonneg=nonneg)
    if kind == "values" and len(rest) == 1:
        vals = np.asarray(rest[0], dtype=float)
        if vals.shape != (geometry.site_count,):
            raise ConfigurationError(
                f"values spec needs {geometry.site_count} entries, got {vals.shape}"
            )
        return Field(geometry, vals, nonneg=nonneg)
    raise ConfigurationError(err)


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------


@dataclass
class Check:
    """One named pass/fail assertion with its observed value."""

    name: str
    observed: float
    requirement: str
    passed: bool

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "observed": self.observed,
            "requirement": self.requirement,
            "pass": self.passed,
        }


@dataclass
class RunOutcome:
    passed: bool
    estimates: list = field(default_factory=list)  # (name, McEstimate)
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)  # filename -> (header, rows)
    notes: list = field(default_factory=list)
    series: dict | None = None  # optional plot payload


@dataclass
class RunManifest:
    experiment: str
    config: dict
    code_version: str
    passed: bool
    wall_time_s: float
    files: list


def _fmt_cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt_cell(c) for c in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _write_plot(path: Path, series: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    x = series["x"]
    for label, y in series["curves"].items():
        ax.plot(x, y, marker="o", label=label)
    ax.set_xlabel(series.get("xlabel", "t"))
    ax.set_ylabel(series.get("ylabel", "value"))
    ax.set_title(series.get("title", ""))
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    sub = cfg.output_dir or f"runs/{cfg.experiment}-seed{cfg.seed}"
    return root / sub


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> tuple[RunManifest, RunOutcome]:
    """Execute the configured experiment and write its artifacts.

    ``manifest.json`` is written last; identical config and seed produce
    byte-identical CSV/JSON numeric outputs.
    """
    from . import __version__

    entry = REGISTRY[cfg.experiment]
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outcome = entry.runner(cfg)
    wall = time.perf_counter() - t0

    files = []
    report = {
        "experiment": cfg.experiment,
        "claim": entry.claim,
        "params": cfg.flat(),
        "seed": cfg.seed,
        "estimates": [est.as_dict(name) for name, est in outcome.estimates],
        "checks": [c.as_dict() for c in outcome.checks],
        "pass": outcome.passed,
        "notes": outcome.notes,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    files.append("report.json")

    est_rows = [
        (name, e.mean, e.std_error, e.ci_low, e.ci_high, e.n_replicas)
        for name, e in outcome.estimates
    ]
    _write_csv(out_dir / "estimates.csv",
               ("name", "mean", "se", "ci_low", "ci_high", "n"), est_rows)
    files.append("estimates.csv")

    for fname, (header, rows) in sorted(outcome.tables.items()):
        _write_csv(out_dir / fname, header, rows)
        files.append(fname)

    if cfg.plots and outcome.series is not None:
        _write_plot(out_dir / "series.svg", outcome.series)
        files.append("series.svg")

    manifest = RunManifest(
        experiment=cfg.experiment,
        config=cfg.flat(),
        code_version=__version__,
        passed=outcome.passed,
        wall_time_s=wall,
        files=sorted(files),
    )
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest.__dict__, indent=2) + "\n"
    )
    return manifest, outcome


# ---------------------------------------------------------------------------
# Experiment runners
# ---------------------------------------------------------------------------


def _check(name, observed, requirement, passed) -> Check:
    return Check(name, float(observed), requirement, bool(passed))


def _sbm_params(cfg: ExperimentConfig, **overrides) -> SbmParams:
    kw = dict(b=cfg.b, rho=cfg.rho, dt=cfg.dt, T=cfg.T, bound=cfg.bound)
    kw.update(overrides)
    return SbmParams(**kw)


def _trajectory_table(cfg: ExperimentConfig, params: SbmParams, u0, v0, times) -> tuple:
    """Snapshot CSV rows (replica, t, site_index, u, v) for two replicas."""
    rows = []
    for r in range(min(cfg.replicas, 2)):
        traj = simulate_sbm(u0, v0, params, cfg.seed, times, replica=r,
                            salt=1_000_003)
        for k, t in enumerate(traj.times):
            for i in range(traj.geometry.site_count):
                rows.append((r, float(t), i, traj.u_path[k, i], traj.v_path[k, i]))
    return ("replica", "t", "site_index", "u", "v"), rows


def run_green_b2(cfg: ExperimentConfig) -> RunOutcome:
    d = cfg.d
    horizon = int(cfg.options.get("walk_horizon", 1024))
    walkers = int(cfg.options.get("walkers", 200_000))
    z_tol = float(cfg.tolerances.get("z", 3.5))

    g = green_origin(d)
    b2_val = b2(d)
    probs = return_probabilities(d, horizon)
    partial = float(probs.sum())
    mc_mean, mc_se = mc_occupation_time(d, horizon, walkers, cfg.seed)
    z = (mc_mean - partial) / mc_se
    identity_err = abs(b2_val * g - 2.0)

    checks = [
        _check("occupation_mc_vs_series_z", z, f"|z| <= {z_tol}", abs(z) <= z_tol),
        _check("b2_times_g_identity", identity_err, "<= 1e-12", identity_err <= 1e-12),
    ]
    est = analysis.McEstimate(mean=mc_mean, variance=mc_se**2 * walkers,
                              n_replicas=walkers)
    cum = np.cumsum(probs)
    table = (("n", "p_return", "partial_sum"),
             [(int(n), float(p), float(c)) for n, (p, c) in enumerate(zip(probs, cum))])
    return RunOutcome(
        passed=all(c.passed for c in checks),
        estimates=[("occupation_time_mc", est)],
        checks=checks,
        tables={"return_probabilities.csv": table},
        notes=[
            f"series g(0,0) = {g!r}, threshold 2/g = {b2_val!r}",
            f"series partial sum to n={horizon}: {partial!r}",
        ],
        series={"x": list(range(horizon + 1)), "curves": {"partial_sum": cum.tolist()},
                "xlabel": "n", "ylabel": "sum p_n", "title": "walk return mass"},
    )


def run_heat_qlimit(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    f = build_field(cfg.init["f"], geom, nonneg=False)
    t_end = float(cfg.options.get("t_end", 200.0))
    step = float(cfg.options.get("grid_step", 5.0))
    quad_tol = float(cfg.options.get("quad_tol", 1e-7))
    limit_tol = float(cfg.tolerances.get("limit", 1e-2))
    mono_tol = float(cfg.tolerances.get("monotone", 1e-8))

    grid = np.arange(0.0, t_end + step / 2, step)
    q_traj = q_compensator(f, grid, quad_tol=quad_tol)
    neg = negative_mass_path(f, grid[1:])
    q_inf = q_traj.limit_total()
    limit_err = abs(q_traj.total_path[-1] - q_inf)

    checks = [
        _check("q_total_limit_error", limit_err, f"<= {limit_tol}", limit_err <= limit_tol),
        _check("negative_mass_at_end", neg[-1], f"<= {limit_tol}", neg[-1] <= limit_tol),
        _check("q_min_increment", q_traj.min_increment, f">= -{mono_tol}",
               q_traj.min_increment >= -mono_tol),
    ]
    q_rows = [
        (float(t), i, q_traj.q_values[k, i])
        for k, t in enumerate(grid) for i in range(geom.site_count)
    ]
    tot_rows = [(float(t), q_traj.total_path[k + 1], neg[k])
                for k, t in enumerate(grid[1:])]
    return RunOutcome(
        passed=all(c.passed for c in checks),
        checks=checks,
        tables={
            "q_trajectory.csv": (("t", "site_index", "value"), q_rows),
            "totals.csv": (("t", "q_total", "negative_mass"), tot_rows),
        },
        notes=[f"limit <f_minus, 1> = {q_inf!r}"],
        series={"x": grid[1:].tolist(),
                "curves": {"q_total": q_traj.total_path[1:].tolist(),
                           "negative_mass": neg.tolist()},
                "xlabel": "t", "ylabel": "mass", "title": "compensator totals"},
    )


def run_heat_pointsource(cfg: ExperimentConfig) -> RunOutcome:
    from .heat import l1_distance_to_point_source

    geom = make_geometry(cfg.d, cfg.L)
    f = build_field(cfg.init["f"], geom, nonneg=True)
    ts = [float(t) for t in cfg.options.get("t_grid", [1.0, 10.0, 100.0])]
    horizon = float(cfg.options.get("horizon", 300.0))
    final_tol = float(cfg.tolerances.get("final", 0.05))

    dists = [l1_distance_to_point_source(f, t) for t in ts]
    final = l1_distance_to_point_source(f, horizon)
    drops = np.diff(dists)
    checks = [
        _check("l1_strictly_decreasing_maxdiff", float(drops.max()), "< 0",
               bool(np.all(drops < 0.0))),
        _check("l1_at_horizon", final, f"< {final_tol}", final < final_tol),
    ]
    sol = solve_heat(f, ts + [horizon])
    heat_rows = [
        (float(t), i, sol.snapshots[k, i])
        for k, t in enumerate(sol.time_grid) for i in range(geom.site_count)
    ]
    l1_rows = list(zip(ts + [horizon], dists + [final]))
    return RunOutcome(
        passed=all(c.passed for c in checks),
        checks=checks,
        tables={
            "heat_snapshots.csv": (("t", "site_index", "value"), heat_rows),
            "l1_distance.csv": (("t", "l1_distance"), l1_rows),
        },
        series={"x": ts + [horizon], "curves": {"l1_distance": dists + [final]},
                "xlabel": "t", "ylabel": "L1 gap", "title": "collapse to point source"},
    )


def run_martingale(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    u0 = build_field(cfg.init["u"], geom)
    v0 = build_field(cfg.init["v"], geom)
    params = _sbm_params(cfg)
    rep = analysis.martingale_test(
        params, u0, v0, t=cfg.T, replicas=cfg.replicas, seed=cfg.seed,
        n_record=int(cfg.options.get("n_record", 50)),
        z_tol=float(cfg.tolerances.get("z", 3.0)),
        gap_tol=float(cfg.tolerances.get("gap", 0.1)),
    )
    checks = [
        _check("z_mean_u", rep.z_u, f"|z| <= {rep.z_tol}", abs(rep.z_u) <= rep.z_tol),
        _check("z_mean_v", rep.z_v, f"|z| <= {rep.z_tol}", abs(rep.z_v) <= rep.z_tol),
        _check("qv_bracket_relative_gap", rep.relative_gap, f"<= {rep.gap_tol}",
               rep.relative_gap <= rep.gap_tol),
    ]
    header, rows = _trajectory_table(cfg, params, u0, v0,
                                     np.linspace(0.0, cfg.T, 11))
    return RunOutcome(
        passed=rep.passed,
        estimates=[("mass_u_final", rep.mean_u), ("mass_v_final", rep.mean_v),
                   ("realized_qv", rep.qv), ("bracket_integral", rep.bracket)],
        checks=checks,
        tables={"trajectories.csv": (header, rows)},
        notes=[f"initial totals u = {rep.u0_total!r}, v = {rep.v0_total!r}"],
    )


def run_pam_singlesite(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    w0 = build_field(cfg.init.get("w", ["flat", 1.0]), geom)
    params = _sbm_params(cfg, rho=0.0, scheme="split-step")
    samples = np.empty(cfg.replicas)

    def collect(rec, step, fields, rep_slice):
        samples[rep_slice] = fields[0][:, 0]

    pam_ensemble(w0, params, cfg.seed, cfg.replicas, [cfg.T], collect)
    mean_est = analysis.McEstimate.from_samples(samples)
    sq_est = analysis.McEstimate.from_samples(samples**2)
    target_sq = math.exp(cfg.b * cfg.T) * float(w0.values[0]) ** 2
    z_tol = float(cfg.tolerances.get("z", 3.0))
    z_mean = (mean_est.mean - w0.values[0]) / mean_est.std_error
    z_sq = (sq_est.mean - target_sq) / sq_est.std_error
    checks = [
        _check("z_first_moment", z_mean, f"|z| <= {z_tol}", abs(z_mean) <= z_tol),
        _check("z_second_moment", z_sq, f"|z| <= {z_tol}", abs(z_sq) <= z_tol),
    ]
    rows = [(r, samples[r]) for r in range(cfg.replicas)]
    return RunOutcome(
        passed=all(c.passed for c in checks),
        estimates=[("w_final", mean_est), ("w_final_sq", sq_est)],
        checks=checks,
        tables={"samples.csv": (("replica", "w_T"), rows)},
        notes=[f"lognormal targets: mean {float(w0.values[0])!r}, "
               f"second moment {target_sq!r}"],
    )


def run_selfduality(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    phi = build_field(cfg.init["phi"], geom)
    theta = float(cfg.options.get("theta", 1.0))
    lambdas = [float(x) for x in cfg.options.get("lambdas", [0.5, 1.0, 2.0])]
    rep = analysis.self_duality_test(
        b=cfg.b, theta=theta, phi=phi, t=cfg.T, lambdas=lambdas,
        replicas=cfg.replicas, seed=cfg.seed, dt=cfg.dt,
        z_tol=float(cfg.tolerances.get("z", 3.0)),
    )
    checks, estimates, rows = [], [], []
    for lam, lhs, rhs, z in rep.entries:
        checks.append(_check(f"z_lambda_{lam:g}", z, f"|z| <= {rep.z_tol}",
                             abs(z) <= rep.z_tol))
        estimates.append((f"laplace_flat_side_lambda_{lam:g}", lhs))
        estimates.append((f"laplace_summable_side_lambda_{lam:g}", rhs))
        rows.append((lam, lhs.mean, lhs.std_error, rhs.mean, rhs.std_error, z))
    return RunOutcome(
        passed=rep.passed,
        estimates=estimates,
        checks=checks,
        tables={"pairings.csv": (("lambda", "lhs_mean", "lhs_se",
                                  "rhs_mean", "rhs_se", "z"), rows)},
    )


def run_comparison(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    u0 = build_field(cfg.init["u"], geom)
    v0 = build_field(cfg.init["v"], geom)
    phis = cfg.options.get("phi_fns", ["square", "exp_scaled"])
    ts = [float(t) for t in cfg.options.get("t_grid", [1.0, 2.0, 5.0])]
    rep = analysis.comparison_test(
        u0, v0, b=cfg.b, phi_fn=phis, t=ts, replicas=cfg.replicas,
        seed=cfg.seed, dt=cfg.dt,
        se_tol=float(cfg.tolerances.get("se", 2.0)),
    )
    checks, estimates, rows = [], [], []
    for name, tk, lhs, rhs, slack in rep.entries:
        checks.append(_check(f"slack_{name}_t{tk:g}", slack, ">= 0", slack >= 0.0))
        estimates.append((f"pair_{name}_t{tk:g}", lhs))
        estimates.append((f"single_{name}_t{tk:g}", rhs))
        rows.append((name, tk, lhs.mean, lhs.std_error, rhs.mean, rhs.std_error, slack))
    return RunOutcome(
        passed=rep.passed,
        estimates=estimates,
        checks=checks,
        tables={"comparisons.csv": (("phi", "t", "pair_mean", "pair_se",
                                     "single_mean", "single_se", "slack"), rows)},
    )


def run_sbm_structure(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    u0 = build_field(cfg.init["u"], geom)
    v0 = build_field(cfg.init["v"], geom)
    params = _sbm_params(cfg, rho=1.0)
    step = float(cfg.options.get("record_step", 0.25))
    heat_tol = float(cfg.tolerances.get("heat", 1e-6))
    times = np.arange(step, cfg.T + step / 2, step)

    diff0 = Field(geom, v0.values - u0.values)
    zeta = solve_heat(diff0, times, method="euler", dt=cfg.dt).snapshots

    max_decomp = 0.0
    max_prod = 0.0
    max_heat_dev = 0.0
    table_rows = []
    for r in range(cfg.replicas):
        traj = simulate_sbm(u0, v0, params, cfg.seed, times, replica=r)
        md = analysis.min_decomposition_check(traj)
        max_decomp = max(max_decomp, md.max_decomposition_violation)
        max_prod = max(max_prod, md.max_product_violation)
        dev = float(np.max(np.abs((traj.v_path - traj.u_path) - zeta)))
        max_heat_dev = max(max_heat_dev, dev)
        if r == 0:
            for k, t in enumerate(traj.times):
                for i in range(geom.site_count):
                    table_rows.append((r, float(t), i,
                                       traj.u_path[k, i], traj.v_path[k, i]))
    checks = [
        _check("max_min_decomposition_violation", max_decomp, "== 0", max_decomp == 0.0),
        _check("max_min_product_violation", max_prod, "== 0", max_prod == 0.0),
        _check("max_difference_heat_deviation", max_heat_dev, f"<= {heat_tol}",
               max_heat_dev <= heat_tol),
    ]
    return RunOutcome(
        passed=all(c.passed for c in checks),
        checks=checks,
        tables={"trajectory.csv": (("replica", "t", "site_index", "u", "v"),
                                   table_rows)},
        notes=["difference field follows the noiseless Euler heat flow; "
               "min-process algebra holds exactly on every snapshot"],
    )


def run_steppingstone(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    u0 = build_field(cfg.init["u"], geom)
    v0 = build_field(cfg.init["v"], geom)
    params = _sbm_params(cfg, rho=-1.0)
    step = float(cfg.options.get("record_step", 0.5))
    sum_tol = float(cfg.tolerances.get("sum", 1e-10))
    times = np.arange(step, cfg.T + step / 2, step)

    target = float(u0.values[0] + v0.values[0])
    max_dev = 0.0
    table_rows = []
    for r in range(cfg.replicas):
        traj = simulate_sbm(u0, v0, params, cfg.seed, times, replica=r)
        dev = float(np.max(np.abs((traj.u_path + traj.v_path) - target)))
        max_dev = max(max_dev, dev)
        if r == 0:
            for k, t in enumerate(traj.times):
                for i in range(geom.site_count):
                    table_rows.append((r, float(t), i,
                                       traj.u_path[k, i], traj.v_path[k, i]))
    checks = [
        _check("max_sum_deviation", max_dev, f"<= {sum_tol}", max_dev <= sum_tol),
    ]
    return RunOutcome(
        passed=all(c.passed for c in checks),
        checks=checks,
        tables={"trajectory.csv": (("replica", "t", "site_index", "u", "v"),
                                   table_rows)},
        notes=[f"conserved flat sum target {target!r}"],
    )


def run_extinction_trend(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    u0 = build_field(cfg.init["u"], geom)
    v0 = build_field(cfg.init["v"], geom)
    ts = [float(t) for t in cfg.options.get("t_grid", [5.0, 20.0, 50.0])]
    frac = float(cfg.options.get("eps_frac", 0.05))
    gap_tol = float(cfg.tolerances.get("mass_gap", 1e-9))
    params = _sbm_params(cfg, rho=1.0, T=max(ts))
    rep = analysis.coexistence_estimator(
        params, u0, v0, T_grid=ts, eps_mass=frac * u0.total(),
        replicas=cfg.replicas, seed=cfg.seed,
    )
    probs = rep.prob_values()
    trend_ok = bool(np.all(np.diff(probs) <= 0.0))
    checks = [
        _check("survival_prob_nonincreasing_maxstep", float(np.diff(probs).max()),
               "<= 0", trend_ok),
        _check("max_mass_gap_error", rep.max_mass_gap_error, f"<= {gap_tol}",
               rep.max_mass_gap_error <= gap_tol),
    ]
    estimates = []
    rows = []
    for k, t in enumerate(ts):
        estimates.append((f"survival_prob_T{t:g}", rep.prob[k]))
        estimates.append((f"mass_u_T{t:g}", rep.mean_u[k]))
        estimates.append((f"mass_v_T{t:g}", rep.mean_v[k]))
        rows.append((t, rep.prob[k].mean, rep.prob[k].std_error,
                     rep.mean_u[k].mean, rep.mean_v[k].mean))
    return RunOutcome(
        passed=all(c.passed for c in checks),
        estimates=estimates,
        checks=checks,
        tables={"trend.csv": (("T", "survival_prob", "se", "mean_u", "mean_v"),
                              rows)},
        notes=[f"threshold {frac:g} of initial u mass = {frac * u0.total()!r}; "
               "the preserved mass gap keeps v above it, so the joint "
               "probability tracks the u side"],
        series={"x": ts, "curves": {"survival_prob": probs.tolist()},
                "xlabel": "T", "ylabel": "P", "title": "survival probability trend"},
    )


def run_duality_functional(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    u0 = build_field(cfg.init["u"], geom)
    v0 = build_field(cfg.init["v"], geom)
    ts = [float(t) for t in cfg.options.get("t_grid", [2.0, 5.0, 10.0])]
    rep = analysis.duality_functional_experiment(
        u0, v0, b=cfg.b, theta=float(cfg.options.get("theta", 1.0)),
        T_grid=ts, eps=float(cfg.options.get("eps", 0.05)),
        replicas=cfg.replicas, seed=cfg.seed, dt=cfg.dt,
        q_step=float(cfg.options.get("q_step", 0.05)),
        z_tol=float(cfg.tolerances.get("z", 3.0)),
    )
    checks, estimates, rows = [], [], []
    for t_val, lhs, rhs, bound, margin in rep.entries:
        checks.append(_check(f"margin_T{t_val:g}", margin, ">= 0", margin >= 0.0))
        estimates.append((f"pairing_T{t_val:g}", lhs))
        estimates.append((f"flat_laplace_T{t_val:g}", rhs))
        rows.append((t_val, lhs.mean, lhs.std_error, rhs.mean, rhs.std_error,
                     bound, margin))
    notes = [f"t_star = {rep.t_star!r}, compensator limit {rep.q_limit!r}"]
    if rep.skipped:
        notes.append(f"horizons below t_star skipped: {list(rep.skipped)}")
    return RunOutcome(
        passed=rep.passed,
        estimates=estimates,
        checks=checks,
        tables={"bounds.csv": (("T", "pairing_mean", "pairing_se", "flat_mean",
                                "flat_se", "bound", "margin"), rows)},
        notes=notes,
    )


def run_particle_bridge(cfg: ExperimentConfig) -> RunOutcome:
    geom = make_geometry(cfg.d, cfg.L)
    u0 = build_field(cfg.init["u"], geom)
    v0 = build_field(cfg.init["v"], geom)
    n_values = [int(n) for n in cfg.options.get("n_values", [10, 50, 250])]
    rep = scaling_bridge(
        u0, v0, b=cfg.b, rho=cfg.rho, T=cfg.T, n_values=n_values,
        seed=cfg.seed,
        particle_replicas=int(cfg.options.get("particle_replicas", 6000)),
        sde_replicas=int(cfg.options.get("sde_replicas", 24000)),
        sde_dt=cfg.dt,
    )
    disc = rep.discrepancies
    checks = [
        _check("discrepancy_strictly_decreasing_maxstep", float(np.diff(disc).max()),
               "< 0", rep.is_decreasing()),
    ]
    rows = []
    for lv in rep.levels:
        for name, (mean, se) in lv.estimates.items():
            rows.append((lv.n, name, mean, se))
    sde_rows = [(name, mean, se) for name, (mean, se) in rep.sde_estimates.items()]
    # a short event log from a small scale documents the event schema
    ev_n = n_values[min(1, len(n_values) - 1)]
    ev_params = ParticleParams(b=cfg.b, rho=cfg.rho, T=min(cfg.T, 0.2),
                               mass_scale=ev_n)
    from .particle import counts_from_density

    traj = simulate_particles(
        counts_from_density(u0, ev_n), counts_from_density(v0, ev_n),
        geom, ev_params, cfg.seed, [ev_params.T], salt=77, log_events=True,
    )
    ev = traj.event_log
    ev_rows = []
    for t_ev, ch, site, aux in zip(ev["times"], ev["channel"], ev["site"], ev["aux"]):
        ch, site, aux = int(ch), int(site), int(aux)
        name = _EVENT_NAMES[ch]
        if name == "mig_x":
            ev_rows.append((0, float(t_ev), site, name, -1, 0))
            ev_rows.append((0, float(t_ev), aux, name, 1, 0))
        elif name == "mig_y":
            ev_rows.append((0, float(t_ev), site, name, 0, -1))
            ev_rows.append((0, float(t_ev), aux, name, 0, 1))
        elif name == "pair":
            dy = aux if cfg.rho > 0 else -aux
            ev_rows.append((0, float(t_ev), site, name, aux, dy))
        elif name == "ind_x":
            ev_rows.append((0, float(t_ev), site, name, aux, 0))
        else:
            ev_rows.append((0, float(t_ev), site, name, 0, aux))
    return RunOutcome(
        passed=all(c.passed for c in checks),
        checks=checks,
        tables={
            "bridge_levels.csv": (("n", "moment", "mean", "se"), rows),
            "bridge_sde.csv": (("moment", "mean", "se"), sde_rows),
            "events_sample.csv": (("replica", "t_event", "site", "channel",
                                   "dX", "dY"), ev_rows),
        },
        notes=[f"discrepancies over n={n_values}: {disc.tolist()!r}"],
        series={"x": n_values, "curves": {"discrepancy": disc.tolist()},
                "xlabel": "n", "ylabel": "max moment gap",
                "title": "particle-to-diffusion bridge"},
    )


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistryEntry:
    claim: str
    defaults: dict
    runner: object


REGISTRY: dict[str, RegistryEntry] = {
    "green-b2": RegistryEntry(
        claim="d=3 walk return mass matches an independent occupation-time "
              "MC; the second-moment threshold satisfies b2 * g(0,0) = 2",
        defaults={"geometry.d": 3, "geometry.L": 4,
                  "opts.walkers": 200_000, "opts.walk_horizon": 1024},
        runner=run_green_b2,
    ),
    "heat-qlimit": RegistryEntry(
        claim="compensator total mass converges to the initial negative "
              "mass; the negative part dissipates; q is nondecreasing",
        defaults={"geometry.d": 1, "geometry.L": 128,
                  "init.f": ["points", [[0, 2.0], [1, -1.0]]],
                  "opts.t_end": 200.0, "opts.grid_step": 5.0},
        runner=run_heat_qlimit,
    ),
    "heat-pointsource": RegistryEntry(
        claim="heat flow from a summable profile collapses to the "
              "point-source profile in L1",
        defaults={"geometry.d": 1, "geometry.L": 128,
                  "init.f": ["point", 1, 1.0],
                  "opts.t_grid": [1.0, 10.0, 100.0], "opts.horizon": 300.0},
        runner=run_heat_pointsource,
    ),
    "martingale": RegistryEntry(
        claim="pair total masses are driftless and the realized quadratic "
              "variation of the u total matches b * integral <u, v> dt",
        defaults={"geometry.d": 1, "geometry.L": 32, "model.b": 1.0,
                  "model.rho": 1.0, "model.dt": 1e-3, "model.T": 5.0,
                  "init.u": ["flat", 0.5], "init.v": ["flat", 0.5],
                  "replicas": 800},
        runner=run_martingale,
    ),
    "pam-singlesite": RegistryEntry(
        claim="single-site multiplicative-noise field reproduces the "
              "lognormal moments E[w]=w0, E[w^2]=w0^2 exp(bT)",
        defaults={"geometry.d": 1, "geometry.L": 1, "model.b": 1.0,
                  "model.dt": 1e-3, "model.T": 1.0,
                  "init.w": ["flat", 1.0], "replicas": 4000},
        runner=run_pam_singlesite,
    ),
    "selfduality": RegistryEntry(
        claim="flat-start and summable-start fields satisfy the Laplace "
              "pairing <w~_t, theta 1> =law= <phi, w_t>",
        defaults={"geometry.d": 1, "geometry.L": 16, "model.b": 0.5,
                  "model.dt": 1e-3, "model.T": 2.0,
                  "init.phi": ["point", 0, 1.0], "opts.theta": 1.0,
                  "opts.lambdas": [0.5, 1.0, 2.0], "replicas": 2000},
        runner=run_selfduality,
    ),
    "comparison": RegistryEntry(
        claim="convex functions of the pair's summed mass are dominated "
              "by the single field started from u0 + v0",
        defaults={"geometry.d": 1, "geometry.L": 16, "model.b": 1.0,
                  "model.dt": 1e-3,
                  "init.u": ["point", 0, 1.0], "init.v": ["point", 1, 1.0],
                  "opts.t_grid": [1.0, 2.0, 5.0],
                  "opts.phi_fns": ["square", "exp_scaled"], "replicas": 1200},
        runner=run_comparison,
    ),
    "sbm-structure": RegistryEntry(
        claim="for the perfectly correlated pair, u = min + (u-v)^+ and "
              "min^2 <= uv hold exactly and v - u follows the noiseless "
              "heat flow",
        defaults={"geometry.d": 1, "geometry.L": 16, "model.b": 1.0,
                  "model.dt": 1e-3, "model.T": 5.0,
                  "init.u": ["flat", 0.8], "init.v": ["points", [[2, 3.0]]],
                  "replicas": 3, "opts.record_step": 0.25},
        runner=run_sbm_structure,
    ),
    "steppingstone": RegistryEntry(
        claim="at full negative correlation with flat unit initial sum, "
              "u + v stays identically 1",
        defaults={"geometry.d": 1, "geometry.L": 16, "model.b": 1.0,
                  "model.dt": 1e-3, "model.T": 5.0,
                  "init.u": ["flat", 0.3], "init.v": ["flat", 0.7],
                  "replicas": 5, "opts.record_step": 0.5},
        runner=run_steppingstone,
    ),
    "extinction-trend": RegistryEntry(
        claim="with less initial u mass than v mass, the probability that "
              "the u total stays above a small threshold is nonincreasing "
              "in the horizon; the mass gap is preserved pathwise",
        defaults={"geometry.d": 1, "geometry.L": 6, "model.b": 1.0,
                  "model.dt": 1e-2,
                  "init.u": ["point", 0, 1.0], "init.v": ["point", 1, 2.0],
                  "opts.t_grid": [5.0, 20.0, 50.0], "opts.eps_frac": 0.05,
                  "replicas": 1000},
        runner=run_extinction_trend,
    ),
    "duality-functional": RegistryEntry(
        claim="the pairing gap between the min field and an independent "
              "flat-start field is bounded by theta times the compensator "
              "increment past t_star",
        defaults={"geometry.d": 1, "geometry.L": 32, "model.b": 1.0,
                  "model.dt": 5e-3,
                  "init.u": ["point", 0, 2.0],
                  "init.v": ["points", [[1, 1.0], [31, 2.0]]],
                  "opts.t_grid": [2.0, 5.0, 10.0], "opts.eps": 0.05,
                  "opts.theta": 1.0, "opts.q_step": 0.05, "replicas": 1500},
        runner=run_duality_functional,
    ),
    "particle-bridge": RegistryEntry(
        claim="rescaled particle total-mass moments approach the diffusion "
              "estimates as the density scale grows",
        defaults={"geometry.d": 1, "geometry.L": 8, "model.b": 1.0,
                  "model.rho": 1.0, "model.dt": 1e-3, "model.T": 1.0,
                  "init.u": ["flat", 0.13], "init.v": ["flat", 0.055],
                  "opts.n_values": [10, 50, 250],
                  "opts.particle_replicas": 6000, "opts.sde_replicas": 24000},
        runner=run_particle_bridge,
    ),
}


def list_experiments() -> str:
    width = max(len(name) for name in REGISTRY)
    return "\n".join(f"{name:{width}}  {entry.claim}"
                     for name, entry in REGISTRY.items())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_dir = resolve_output_dir(cfg)
    manifest, outcome = run_experiment(cfg, out_dir)
    status = "PASS" if outcome.passed else "FAIL"
    print(f"{cfg.experiment}: {status} ({out_dir})")
    for c in outcome.checks:
        flag = "ok" if c.passed else "FAIL"
        print(f"  [{flag}] {c.name} = {c.observed:.6g} (need {c.requirement})")
    return 0 if outcome.passed else 1


def _numeric_outputs(run_dir: Path) -> dict:
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and p.suffix in (".csv", ".json"):
            out[str(p.relative_to(run_dir))] = p.read_bytes()
    return out


def _cmd_seed_check(args) -> int:
    cfg = load_config(args.config)
    base = resolve_output_dir(cfg)
    outputs = []
    for tag in ("a", "b"):
        run_experiment(cfg, base / f"seedcheck-{tag}")
        outputs.append(_numeric_outputs(base / f"seedcheck-{tag}"))
    first, second = outputs
    names = sorted(set(first) | set(second))
    mismatched = [n for n in names if first.get(n) != second.get(n)]
    for n in names:
        print(f"  [{'ok' if n not in mismatched else 'DIFF'}] {n}")
    if mismatched:
        print(f"{cfg.experiment}: outputs differ between identical runs")
        return 1
    print(f"{cfg.experiment}: {len(names)} numeric outputs byte-identical")
    return 0


def _cmd_list(_args) -> int:
    print(list_experiments())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symbranch",
        description="Run registered lattice simulation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config")
    p_run.set_defaults(func=_cmd_run)
    p_list = sub.add_parser("list", help="list registered experiments")
    p_list.set_defaults(func=_cmd_list)
    p_seed = sub.add_parser(
        "seed-check", help="run twice and compare numeric outputs"
    )
    p_seed.add_argument("config")
    p_seed.set_defaults(func=_cmd_seed_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalBlowupError as exc:
        print(f"numerical blowup: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
