"""Deterministic lattice heat flow and the positive-part compensator.

The signed heat flow ``zeta(t) = P_t f`` is smooth in time, but its
positive part is only piecewise smooth: every site where the solution
changes sign puts a kink into ``max(zeta, 0)``.  The compensator

    q(t, i) = zeta_plus(0, i) - zeta_plus(t, i)
              + integral_0^t  Laplacian(zeta_plus)(s, i) ds

measures exactly the mass annihilated between the positive and negative
parts; it is nonnegative, nondecreasing, starts at zero, and its total
mass converges to the initial negative mass when the field's net mass is
nonnegative.

Numerics: snapshots are propagated by the Poisson series of the walk
semigroup (exact up to a truncation tolerance), and the time integral of
``Laplacian(zeta_plus)`` uses adaptive Simpson quadrature with a per-site
error estimate, which automatically piles nodes onto sign-change kinks.
The smooth companion integral of ``Laplacian(zeta)`` is accumulated on
the same nodes and compared against the exact identity
``integral = zeta(t) - f``; that residual is the achieved-accuracy
certificate, and exceeding the budget raises :class:`QuadratureError`.

Total-mass paths need no quadrature at all: the Laplacian conserves mass,
so ``<q(t), 1> = <f_plus, 1> - <zeta_plus(t), 1>`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, QuadratureError
from .lattice import Field, Geometry, _series_propagate, laplacian_values

_PROP_TOL = 1e-14  # series truncation tolerance per propagation step


@dataclass(frozen=True, eq=False)
class HeatSolution:
    """Heat-flow snapshots on a time grid (grid[0] may be > 0; the
    initial field is kept separately)."""

    geometry: Geometry
    initial: Field
    time_grid: np.ndarray
    snapshots: np.ndarray  # (len(time_grid), site_count)
    method: str

    def total_mass(self) -> np.ndarray:
        return self.snapshots.sum(axis=1)


@dataclass(frozen=True, eq=False)
class QTrajectory:
    """Compensator path q(t, i) on a time grid starting at 0.

    ``total_path`` is computed from the exact mass identity (no
    quadrature); ``min_increment`` is the most negative per-site grid
    increment observed (monotonicity metadata, ~0 up to quadrature
    error); ``error_estimate`` accumulates the quadrature error
    indicators; ``residual`` is the worst smooth-identity residual.
    """

    geometry: Geometry
    initial: Field
    time_grid: np.ndarray
    q_values: np.ndarray  # (len(time_grid), site_count)
    total_path: np.ndarray
    zeta_snapshots: np.ndarray = field(repr=False)
    min_increment: float = 0.0
    error_estimate: float = 0.0
    residual: float = 0.0

    def limit_total(self) -> float:
        """Limiting total mass <f_minus, 1> of the compensator."""
        return float(np.maximum(-self.initial.values, 0.0).sum())


def _check_grid(time_grid, require_zero_start=False) -> np.ndarray:
    grid = np.asarray(time_grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ConfigurationError("time grid is empty")
    if grid[0] < 0.0 or np.any(np.diff(grid) <= 0.0):
        raise ConfigurationError("time grid must be strictly increasing and >= 0")
    if require_zero_start and grid[0] != 0.0:
        raise ConfigurationError("time grid must start at t = 0")
    return grid


def sign_decompose(z: Field) -> tuple[Field, Field]:
    """Split into nonnegative parts (z_plus, z_minus) with
    z = z_plus - z_minus and pointwise disjoint support."""
    pos = np.maximum(z.values, 0.0)
    neg = np.maximum(-z.values, 0.0)
    return Field(z.geometry, pos, nonneg=True), Field(z.geometry, neg, nonneg=True)


def solve_heat(
    f: Field,
    time_grid,
    method: str = "series",
    tol: float = 1e-12,
    dt: float | None = None,
) -> HeatSolution:
    """Solve d/dt zeta = Laplacian zeta, zeta(0) = f, on a time grid.

    ``series`` propagates between grid times with the Poisson series of
    the semigroup (the oracle path); ``euler`` uses explicit stepping
    ``zeta += dt * Laplacian(zeta)`` with 0 < dt <= 1 and snaps grid
    times to the nearest step, reproducing the arithmetic of the
    stochastic engines with the noise term removed.
    """
    grid = _check_grid(time_grid)
    geom = f.geometry
    if method == "series":
        if tol <= 0:
            raise ConfigurationError("tol must be > 0")
        snaps = np.empty((grid.size, geom.site_count))
        current = f.values
        t_now = 0.0
        for k, t in enumerate(grid):
            current = _series_propagate(current, t - t_now, tol, geom)
            t_now = t
            snaps[k] = current
        return HeatSolution(geom, f, grid, snaps, method)
    if method == "euler":
        if dt is None or not (0.0 < dt <= 1.0):
            raise ConfigurationError("euler method needs a step 0 < dt <= 1")
        target_steps = np.rint(grid / dt).astype(np.int64)
        if np.any(np.diff(np.concatenate([[0], target_steps])) < 0):
            raise ConfigurationError("time grid is finer than dt")
        snaps = np.empty((grid.size, geom.site_count))
        vals = f.values.astype(np.float64, copy=True)
        step = 0
        for k, n in enumerate(target_steps):
            while step < n:
                vals += dt * laplacian_values(vals, geom)
                step += 1
            snaps[k] = vals
        return HeatSolution(geom, f, grid, snaps, method)
    raise ConfigurationError(f"unknown method {method!r}")


def negative_mass_path(f: Field, time_grid, tol: float = 1e-12) -> np.ndarray:
    """Total negative mass <zeta_minus(t), 1> along a time grid."""
    sol = solve_heat(f, time_grid, method="series", tol=tol)
    return np.maximum(-sol.snapshots, 0.0).sum(axis=1)


def l1_distance_to_point_source(f: Field, t: float, tol: float = 1e-12) -> float:
    """l1 distance at time t between the flow of f and the flow of the
    same net mass concentrated at the origin.  Decays to zero, which is
    the sense in which only the net mass survives diffusively."""
    if t < 0:
        raise ConfigurationError("t must be >= 0")
    geom = f.geometry
    point = np.zeros(geom.site_count)
    point[0] = f.total()
    a = _series_propagate(f.values, t, tol, geom)
    b = _series_propagate(point, t, tol, geom)
    return float(np.abs(a - b).sum())


# ---------------------------------------------------------------------------
# Compensator quadrature.
# ---------------------------------------------------------------------------


class _Node:
    """Quadrature node: time, solution values, and the two integrands."""

    __slots__ = ("t", "z", "gp", "g")

    def __init__(self, t, z, geom):
        self.t = t
        self.z = z
        self.gp = laplacian_values(np.maximum(z, 0.0), geom)
        self.g = laplacian_values(z, geom)


def _advance(node: _Node, t: float, geom) -> _Node:
    return _Node(t, _series_propagate(node.z, t - node.t, _PROP_TOL, geom), geom)


def _simpson(a: _Node, m: _Node, b: _Node):
    h6 = (b.t - a.t) / 6.0
    return h6 * (a.gp + 4.0 * m.gp + b.gp), h6 * (a.g + 4.0 * m.g + b.g)


def _adaptive(a, m, b, budget, depth, geom, allow_accept, err_box):
    """Adaptive Simpson over [a.t, b.t] with midpoint m already known.

    Returns (integral of Laplacian(zeta_plus), integral of
    Laplacian(zeta)) as site vectors.  ``budget`` is an absolute
    per-site bound for this interval; halves inherit half of it.
    """
    whole_p, whole_s = _simpson(a, m, b)
    q1 = _advance(a, 0.5 * (a.t + m.t), geom)
    q3 = _advance(m, 0.5 * (m.t + b.t), geom)
    left_p, left_s = _simpson(a, q1, m)
    right_p, right_s = _simpson(m, q3, b)
    err_p = (left_p + right_p - whole_p) / 15.0
    err_s = (left_s + right_s - whole_s) / 15.0
    worst = max(np.max(np.abs(err_p)), np.max(np.abs(err_s)))
    if (allow_accept and worst <= budget) or depth <= 0:
        err_box[0] += worst
        return left_p + right_p + err_p, left_s + right_s + err_s
    ip1, is1 = _adaptive(a, q1, m, 0.5 * budget, depth - 1, geom, True, err_box)
    ip2, is2 = _adaptive(m, q3, b, 0.5 * budget, depth - 1, geom, True, err_box)
    return ip1 + ip2, is1 + is2


def q_compensator(
    f: Field,
    time_grid,
    quad_tol: float = 1e-9,
    max_depth: int = 40,
) -> QTrajectory:
    """Compensator trajectory of the positive part of the heat flow.

    ``quad_tol`` is the per-output-interval quadrature budget (per site),
    so each grid increment of q is accurate to ~quad_tol and the
    monotonicity of the true compensator is preserved to that level.
    Raises :class:`QuadratureError` when the accumulated smooth-identity
    residual exceeds its certificate bound.
    """
    grid = _check_grid(time_grid, require_zero_start=True)
    if quad_tol <= 0:
        raise ConfigurationError("quad_tol must be > 0")
    geom = f.geometry
    n_sites = geom.site_count
    zeta_plus_0 = np.maximum(f.values, 0.0)

    q = np.zeros((grid.size, n_sites))
    zeta = np.empty((grid.size, n_sites))
    zeta[0] = f.values
    int_smooth = np.zeros(n_sites)  # running integral of Laplacian(zeta)
    err_box = [0.0]
    worst_resid, worst_site, worst_time = 0.0, 0, 0.0

    left = _Node(0.0, f.values.astype(np.float64, copy=True), geom)
    int_plus = np.zeros(n_sites)
    for k in range(1, grid.size):
        right = _advance(left, grid[k], geom)
        mid = _advance(left, 0.5 * (left.t + right.t), geom)
        inc_p, inc_s = _adaptive(
            left, mid, right, quad_tol, max_depth, geom, False, err_box
        )
        int_plus += inc_p
        int_smooth += inc_s
        zeta[k] = right.z
        q[k] = zeta_plus_0 - np.maximum(right.z, 0.0) + int_plus
        resid = np.abs(int_smooth - (right.z - f.values))
        site = int(np.argmax(resid))
        if resid[site] > worst_resid:
            worst_resid, worst_site, worst_time = float(resid[site]), site, float(grid[k])
        left = right

    resid_limit = 4.0 * quad_tol * grid.size
    if worst_resid > resid_limit:
        raise QuadratureError(
            f"quadrature residual {worst_resid:.3e} exceeds {resid_limit:.3e} "
            f"at site {worst_site}, t={worst_time}",
            site=worst_site,
            time=worst_time,
            residual=worst_resid,
        )

    total = zeta_plus_0.sum() - np.maximum(zeta, 0.0).sum(axis=1)
    min_inc = float(np.diff(q, axis=0).min()) if grid.size > 1 else 0.0
    return QTrajectory(
        geometry=geom,
        initial=f,
        time_grid=grid,
        q_values=q,
        total_path=total,
        zeta_snapshots=zeta,
        min_increment=min_inc,
        error_estimate=err_box[0],
        residual=worst_resid,
    )
