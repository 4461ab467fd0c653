"""Monte Carlo verification layer for the lattice pair SDE and its relatives.

Every function here turns a structural identity of the models into a
statistical (or exact, where the identity is pathwise) check:

* total masses of the pair are martingales whose realized quadratic
  variation matches ``b * integral of <u_s, v_s> ds``;
* the single multiplicative-noise field started flat at ``theta`` and
  started from a summable profile ``phi`` satisfies the Laplace-pairing
  identity ``<w~_t, theta 1> =law= <phi, w_t>``;
* totals of the perfectly correlated pair are convexly dominated by the
  single field started from ``u0 + v0``;
* the sitewise minimum ``w = min(u, v)`` of a perfectly correlated pair
  satisfies ``u = w + (u - v)^+`` and ``w^2 <= u v`` pointwise, and the
  duality-functional inequality built from the heat compensator of
  ``v0 - u0``;
* coexistence/extinction and uniform-integrability trends.

Estimates are reported as :class:`McEstimate` values whose pooling is
exact, so replica batches may be merged in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from statistics import NormalDist

import numpy as np

from .errors import ConfigurationError
from .heat import q_compensator
from .lattice import Field, Geometry
from .sde import SbmParams, SbmTrajectory, pam_ensemble, sbm_ensemble

__all__ = [
    "McEstimate",
    "TotalMassPath",
    "total_mass_path",
    "MartingaleReport",
    "martingale_test",
    "SelfDualityReport",
    "self_duality_test",
    "ComparisonReport",
    "comparison_test",
    "MinDecompositionReport",
    "min_decomposition_check",
    "DualityFunctionalReport",
    "duality_functional_experiment",
    "CoexistenceReport",
    "coexistence_estimator",
    "UniformIntegrabilityReport",
    "uniform_integrability_probe",
    "origin_second_moment_trend",
]


# ---------------------------------------------------------------------------
# Estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo mean with exact-pooling merge support.

    ``variance`` is the unbiased sample variance of the underlying
    observations; the reported interval is the normal approximation at
    ``level``.  Merging two estimates reproduces the single-batch mean
    and variance exactly (up to rounding), so batches can be combined
    associatively in any order.
    """

    mean: float
    variance: float
    n_replicas: int
    level: float = 0.95

    def __post_init__(self) -> None:
        if self.n_replicas < 1:
            raise ConfigurationError("an estimate needs at least one replica")
        if not 0.0 < self.level < 1.0:
            raise ConfigurationError(f"confidence level must be in (0,1), got {self.level}")
        if self.variance < 0.0 or not math.isfinite(self.mean):
            raise ConfigurationError("estimate moments must be finite, variance >= 0")

    @classmethod
    def from_samples(cls, samples, level: float = 0.95) -> "McEstimate":
        arr = np.asarray(samples, dtype=float).reshape(-1)
        if arr.size < 1:
            raise ConfigurationError("an estimate needs at least one replica")
        var = float(arr.var(ddof=1)) if arr.size > 1 else 0.0
        return cls(mean=float(arr.mean()), variance=var, n_replicas=arr.size, level=level)

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.n_replicas)

    @property
    def ci(self) -> tuple[float, float]:
        half = NormalDist().inv_cdf(0.5 + self.level / 2.0) * self.std_error
        return (self.mean - half, self.mean + half)

    @property
    def ci_low(self) -> float:
        return self.ci[0]

    @property
    def ci_high(self) -> float:
        return self.ci[1]

    def merge(self, other: "McEstimate") -> "McEstimate":
        """Exact pooled estimate of the concatenated replica sets."""
        if other.level != self.level:
            raise ConfigurationError("cannot merge estimates at different levels")
        na, nb = self.n_replicas, other.n_replicas
        n = na + nb
        delta = other.mean - self.mean
        mean = self.mean + delta * nb / n
        m2 = (
            self.variance * (na - 1)
            + other.variance * (nb - 1)
            + delta * delta * na * nb / n
        )
        var = m2 / (n - 1) if n > 1 else 0.0
        return McEstimate(mean=mean, variance=var, n_replicas=n, level=self.level)

    def as_dict(self, name: str) -> dict:
        return {
            "name": name,
            "mean": self.mean,
            "se": self.std_error,
            "ci": list(self.ci),
            "n": self.n_replicas,
        }


def _bernoulli(hits: np.ndarray, level: float = 0.95) -> McEstimate:
    return McEstimate.from_samples(np.asarray(hits, dtype=float), level=level)


def _z_score(lhs: McEstimate, rhs: McEstimate) -> float:
    """Normalized mean difference.  When both estimates are degenerate
    (deterministic observables, SE = 0) the means must agree up to
    rounding; a genuine mismatch comes back as +-inf, never masked."""
    comb = math.hypot(lhs.std_error, rhs.std_error)
    if comb > 0.0:
        return (lhs.mean - rhs.mean) / comb
    if math.isclose(lhs.mean, rhs.mean, rel_tol=1e-12, abs_tol=1e-300):
        return 0.0
    return math.copysign(math.inf, lhs.mean - rhs.mean)


# ---------------------------------------------------------------------------
# Total-mass paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TotalMassPath:
    """Summaries of one recorded pair trajectory.

    ``realized_qv[k]`` is the running sum of squared increments of the
    ``u`` total over the recording grid; ``bracket_integral[k]`` is the
    running left-Riemann sum of ``b * <u_s, v_s>`` on the same grid.
    Both start at zero and are nondecreasing.
    """

    time_grid: np.ndarray
    u_bar: np.ndarray
    v_bar: np.ndarray
    realized_qv: np.ndarray
    bracket_integral: np.ndarray


def total_mass_path(traj: SbmTrajectory) -> TotalMassPath:
    if traj.times.size < 2:
        raise ConfigurationError("need at least two snapshots for a mass path")
    u_bar = traj.u_path.sum(axis=1)
    v_bar = traj.v_path.sum(axis=1)
    qv = np.concatenate([[0.0], np.cumsum(np.diff(u_bar) ** 2)])
    inner = (traj.u_path * traj.v_path).sum(axis=1)
    bracket = np.concatenate(
        [[0.0], np.cumsum(traj.params.b * inner[:-1] * np.diff(traj.times))]
    )
    return TotalMassPath(
        time_grid=traj.times.copy(), u_bar=u_bar, v_bar=v_bar,
        realized_qv=qv, bracket_integral=bracket,
    )


# ---------------------------------------------------------------------------
# Martingale / covariation test
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MartingaleReport:
    u0_total: float
    v0_total: float
    mean_u: McEstimate
    mean_v: McEstimate
    qv: McEstimate
    bracket: McEstimate
    z_u: float
    z_v: float
    relative_gap: float
    z_tol: float
    gap_tol: float

    @property
    def passed(self) -> bool:
        return (
            abs(self.z_u) <= self.z_tol
            and abs(self.z_v) <= self.z_tol
            and self.relative_gap <= self.gap_tol
        )


def _record_grid(t: float, dt: float, n_record: int) -> np.ndarray:
    """Recording times 0 = t_0 < ... < t_K = t on the step grid."""
    steps_total = int(round(t / dt))
    ks = np.unique(np.rint(np.linspace(0.0, steps_total, n_record + 1)).astype(int))
    return ks * dt


def martingale_test(
    params: SbmParams,
    u0: Field,
    v0: Field,
    t: float,
    replicas: int,
    seed: int,
    n_record: int = 50,
    z_tol: float = 3.0,
    gap_tol: float = 0.1,
    salt: int = 0,
) -> MartingaleReport:
    """Check that pair totals are driftless and that the realized QV of
    the ``u`` total matches the bracket ``b * integral <u_s, v_s> ds``.

    Both the realized QV and the bracket are computed on the recording
    grid (``n_record`` intervals), so the tolerance budget contains the
    recording-resolution discretisation on top of the stepping error.
    """
    if replicas < 2:
        raise ConfigurationError("martingale test needs at least 2 replicas")
    grid = _record_grid(t, params.dt, n_record)
    if grid.size < 2:
        raise ConfigurationError("horizon shorter than one time step")

    prev_u = np.empty(replicas)
    prev_inner = np.empty(replicas)
    prev_t = np.zeros(replicas)
    qv_acc = np.zeros(replicas)
    br_acc = np.zeros(replicas)
    final_u = np.empty(replicas)
    final_v = np.empty(replicas)

    def collect(rec, step, fields, rep_slice):
        u, v = fields
        ub = u.sum(axis=1)
        inner = (u * v).sum(axis=1)
        tk = grid[rec]
        if rec > 0:
            qv_acc[rep_slice] += (ub - prev_u[rep_slice]) ** 2
            br_acc[rep_slice] += (
                params.b * prev_inner[rep_slice] * (tk - prev_t[rep_slice])
            )
        prev_u[rep_slice] = ub
        prev_inner[rep_slice] = inner
        prev_t[rep_slice] = tk
        if rec == grid.size - 1:
            final_u[rep_slice] = ub
            final_v[rep_slice] = v.sum(axis=1)

    run_params = replace(params, T=max(params.T, t))
    sbm_ensemble(u0, v0, run_params, seed, replicas, grid, collect, salt=salt)

    mean_u = McEstimate.from_samples(final_u)
    mean_v = McEstimate.from_samples(final_v)
    qv = McEstimate.from_samples(qv_acc)
    bracket = McEstimate.from_samples(br_acc)
    z_u = (mean_u.mean - u0.total()) / mean_u.std_error if mean_u.std_error else 0.0
    z_v = (mean_v.mean - v0.total()) / mean_v.std_error if mean_v.std_error else 0.0
    denom = bracket.mean if bracket.mean > 0 else 1.0
    gap = abs(qv.mean - bracket.mean) / denom
    return MartingaleReport(
        u0_total=u0.total(), v0_total=v0.total(),
        mean_u=mean_u, mean_v=mean_v, qv=qv, bracket=bracket,
        z_u=z_u, z_v=z_v, relative_gap=gap, z_tol=z_tol, gap_tol=gap_tol,
    )


# ---------------------------------------------------------------------------
# Laplace-pairing (flat vs summable start) test
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SelfDualityReport:
    theta: float
    t: float
    entries: tuple  # (lam, lhs McEstimate, rhs McEstimate, z) per lambda
    z_tol: float

    @property
    def passed(self) -> bool:
        return all(abs(z) <= self.z_tol for *_, z in self.entries)


def self_duality_test(
    b: float,
    theta: float,
    phi: Field,
    t: float,
    lambdas,
    replicas: int,
    seed: int,
    dt: float = 1e-3,
    z_tol: float = 3.0,
    salt: int = 0,
) -> SelfDualityReport:
    """Compare ``E[exp(-lambda <w~_t, theta 1>)]`` (field started from
    ``phi``) with ``E[exp(-lambda <phi, w_t>)]`` (field started flat at
    ``theta``) for every requested ``lambda``; the two are equal in law.
    """
    if theta <= 0:
        raise ConfigurationError(f"flat level theta must be > 0, got {theta}")
    geom = phi.geometry
    params = SbmParams(b=b, dt=dt, T=max(t, dt))  # t = 0 records the start
    tilde_total = np.empty(replicas)
    phi_pairing = np.empty(replicas)

    def collect_tilde(rec, step, fields, rep_slice):
        tilde_total[rep_slice] = fields[0].sum(axis=1)

    def collect_flat(rec, step, fields, rep_slice):
        phi_pairing[rep_slice] = fields[0] @ phi.values

    pam_ensemble(phi, params, seed, replicas, [t], collect_tilde, salt=salt)
    flat0 = Field.constant(geom, theta, nonneg=True)
    pam_ensemble(flat0, params, seed, replicas, [t], collect_flat, salt=salt + 1)

    entries = []
    for lam in np.atleast_1d(np.asarray(lambdas, dtype=float)):
        lhs = McEstimate.from_samples(np.exp(-lam * theta * tilde_total))
        rhs = McEstimate.from_samples(np.exp(-lam * phi_pairing))
        entries.append((float(lam), lhs, rhs, _z_score(lhs, rhs)))
    return SelfDualityReport(theta=theta, t=t, entries=tuple(entries), z_tol=z_tol)


# ---------------------------------------------------------------------------
# Convex comparison test
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    entries: tuple  # (phi_name, t, lhs McEstimate, rhs McEstimate, slack)
    se_tol: float

    @property
    def passed(self) -> bool:
        return all(slack >= 0.0 for *_, slack in self.entries)


def _convex_menu(total_mass_scale: float) -> dict:
    # Nonnegative, nondecreasing, convex on [0, inf); the exponential is
    # scaled by the initial total mass to keep moments finite-sample sane.
    scale = max(total_mass_scale, 1.0)
    return {
        "square": lambda x: x**2,
        "exp_scaled": lambda x: np.exp(x / scale),
    }


def comparison_test(
    u0: Field,
    v0: Field,
    b: float,
    phi_fn,
    t,
    replicas: int,
    seed: int,
    dt: float = 1e-3,
    se_tol: float = 2.0,
    salt: int = 0,
) -> ComparisonReport:
    """One-sided domination check: convex functions of the pair's summed
    total mass are bounded by the same functions of the single field
    started from ``u0 + v0``.

    ``phi_fn`` is an id (or list of ids) from the fixed convex menu
    {"square", "exp_scaled"}.  Both systems use the same truncated Euler
    stepping so the discretisation bias largely cancels from the
    comparison.  Passing means lhs <= rhs + ``se_tol`` combined SE.
    """
    names = [phi_fn] if isinstance(phi_fn, str) else list(phi_fn)
    menu = _convex_menu(u0.total() + v0.total())
    unknown = [n for n in names if n not in menu]
    if unknown:
        raise ConfigurationError(f"unknown convex test ids {unknown}; menu {sorted(menu)}")
    ts = np.unique(np.atleast_1d(np.asarray(t, dtype=float)))
    geom = u0.geometry

    sbm_params = SbmParams(b=b, rho=1.0, dt=dt, T=float(ts.max()))
    pam_params = SbmParams(b=b, dt=dt, T=float(ts.max()), scheme="truncated-euler")
    pair_sum = np.empty((ts.size, replicas))
    single_sum = np.empty((ts.size, replicas))

    def collect_pair(rec, step, fields, rep_slice):
        pair_sum[rec, rep_slice] = fields[0].sum(axis=1) + fields[1].sum(axis=1)

    def collect_single(rec, step, fields, rep_slice):
        single_sum[rec, rep_slice] = fields[0].sum(axis=1)

    times = sbm_ensemble(u0, v0, sbm_params, seed, replicas, ts, collect_pair, salt=salt)
    w0 = Field(geom, u0.values + v0.values, nonneg=True)
    pam_ensemble(w0, pam_params, seed, replicas, ts, collect_single, salt=salt + 1)

    entries = []
    for name in names:
        fn = menu[name]
        for k, tk in enumerate(times):
            lhs = McEstimate.from_samples(fn(pair_sum[k]))
            rhs = McEstimate.from_samples(fn(single_sum[k]))
            comb = math.hypot(lhs.std_error, rhs.std_error)
            slack = rhs.mean + se_tol * comb - lhs.mean
            entries.append((name, float(tk), lhs, rhs, slack))
    return ComparisonReport(entries=tuple(entries), se_tol=se_tol)


# ---------------------------------------------------------------------------
# Minimum-process decomposition (exact pointwise algebra)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MinDecompositionReport:
    n_snapshots: int
    max_decomposition_violation: float
    max_product_violation: float

    @property
    def passed(self) -> bool:
        return self.max_decomposition_violation == 0.0 and self.max_product_violation == 0.0


def min_decomposition_check(traj: SbmTrajectory) -> MinDecompositionReport:
    """Exact checks of the minimum-process algebra on every snapshot of a
    perfectly correlated pair: ``u - min(u,v)`` equals ``max(u-v, 0)``
    bitwise (the floating-point-safe statement of ``u = w + (v-u)^-``),
    and ``min(u,v)^2 <= u v`` pointwise (rounding is monotone, so the
    real-number inequality survives fp evaluation).
    """
    if traj.params.rho != 1.0:
        raise ConfigurationError("minimum decomposition needs a rho = 1 trajectory")
    u, v = traj.u_path, traj.v_path
    w = np.minimum(u, v)
    decomp = np.max(np.abs((u - w) - np.maximum(u - v, 0.0)))
    product = np.max(np.maximum(w * w - u * v, 0.0))
    return MinDecompositionReport(
        n_snapshots=int(traj.times.size),
        max_decomposition_violation=float(decomp),
        max_product_violation=float(product),
    )


# ---------------------------------------------------------------------------
# Duality-functional experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DualityFunctionalReport:
    theta: float
    eps: float
    t_star: float
    q_limit: float
    entries: tuple  # (T, lhs, rhs, bound, margin) with margin >= 0 passing
    skipped: tuple  # horizon values below t_star

    @property
    def passed(self) -> bool:
        return all(margin >= 0.0 for *_, margin in self.entries)


def duality_functional_experiment(
    u0: Field,
    v0: Field,
    b: float,
    theta: float,
    T_grid,
    eps: float,
    replicas: int,
    seed: int,
    dt: float = 5e-3,
    q_step: float = 0.05,
    z_tol: float = 3.0,
    quad_tol: float = 1e-9,
    salt: int = 0,
) -> DualityFunctionalReport:
    """Test the compensator bound from the non-coexistence argument.

    With ``w = min(u, v)`` of a perfectly correlated pair and an
    independent flat-start field ``w~``, the pairing difference
    ``E[exp(-<w_{T*}, w~_{T-T*}>)] - E[exp(-theta w-bar_T)]`` is bounded
    by ``theta (q-bar(T) - q-bar(T*))``, where ``q`` is the heat
    compensator of ``v0 - u0`` and ``T*`` is the first time its total is
    within ``eps`` of its limit ``<(v0-u0)^-, 1>``.  Horizons below
    ``T*`` are reported as skipped.
    """
    if u0.total() > v0.total():
        raise ConfigurationError(
            "the u population must start with no more mass than v (swap populations)"
        )
    if eps <= 0:
        raise ConfigurationError(f"eps must be > 0, got {eps}")
    if theta <= 0:
        raise ConfigurationError(f"theta must be > 0, got {theta}")
    geom = u0.geometry
    ts = np.atleast_1d(np.asarray(T_grid, dtype=float))
    if np.any(np.diff(ts) <= 0) or ts.size == 0 or ts.min() < 0:
        raise ConfigurationError("T_grid must be strictly increasing and nonnegative")

    # Compensator grid: multiples of dt at roughly q_step resolution,
    # always containing the requested horizons.
    t_max = float(ts.max())
    m = max(1, int(round(q_step / dt)))
    grid = np.arange(0, int(round(t_max / dt)) + 1, m) * dt
    t_snap = np.rint(ts / dt) * dt
    grid = np.unique(np.concatenate([grid, t_snap, [0.0]]))

    f = Field(geom, v0.values - u0.values)
    q_traj = q_compensator(f, grid, quad_tol=quad_tol)
    q_bar = q_traj.total_path
    q_inf = q_traj.limit_total()
    gap = q_inf - q_bar
    ok = np.flatnonzero((gap <= eps) & (gap >= -1e-9))
    if ok.size == 0:
        raise ConfigurationError(
            f"compensator total never reaches eps={eps} of its limit by t={t_max};"
            " extend the horizon"
        )
    t_star = float(grid[ok[0]])
    q_at = dict(zip(np.round(grid / dt).astype(int), q_bar))

    live = [float(t) for t in t_snap if t >= t_star]
    skipped = tuple(float(t) for t in t_snap if t < t_star)
    if not live:
        return DualityFunctionalReport(
            theta=theta, eps=eps, t_star=t_star, q_limit=q_inf,
            entries=(), skipped=skipped,
        )

    sbm_params = SbmParams(b=b, rho=1.0, dt=dt, T=max(t_max, t_star, dt))
    w_star = np.empty((replicas, geom.site_count))
    w_bar = np.empty((len(live), replicas))
    rec_times = sorted({t_star, *live})
    star_step = round(t_star / dt)
    live_by_step = {round(t / dt): j for j, t in enumerate(live)}

    def collect_pair(rec, step, fields, rep_slice):
        w = np.minimum(fields[0], fields[1])
        if step == star_step:
            w_star[rep_slice] = w
        j = live_by_step.get(step)
        if j is not None:
            w_bar[j, rep_slice] = w.sum(axis=1)

    sbm_ensemble(u0, v0, sbm_params, seed, replicas, rec_times, collect_pair, salt=salt)

    # Independent flat-start field sampled at the lags T - T*.
    lags = sorted({round((t - t_star) / dt) for t in live})
    tilde = np.empty((len(lags), replicas, geom.site_count))
    lag_pos = {k: j for j, k in enumerate(lags)}

    def collect_tilde(rec, step, fields, rep_slice):
        tilde[rec, rep_slice] = fields[0]

    if max(lags) > 0:
        lag_times = [k * dt for k in lags]
        pam_params = SbmParams(b=b, dt=dt, T=lag_times[-1])
        flat0 = Field.constant(geom, theta, nonneg=True)
        pam_ensemble(flat0, pam_params, seed, replicas, lag_times, collect_tilde,
                     salt=salt + 1)
    else:
        tilde[:] = theta  # zero lag pairs against the flat start itself

    entries = []
    for j, t_val in enumerate(live):
        wt = tilde[lag_pos[round((t_val - t_star) / dt)]]
        lhs = McEstimate.from_samples(np.exp(-(w_star * wt).sum(axis=1)))
        rhs = McEstimate.from_samples(np.exp(-theta * w_bar[j]))
        bound = theta * (q_at[round(t_val / dt)] - q_at[star_step])
        comb = math.hypot(lhs.std_error, rhs.std_error)
        diff = lhs.mean - rhs.mean
        if comb == 0.0 and math.isclose(lhs.mean, rhs.mean, rel_tol=1e-12):
            diff = 0.0  # deterministic case: ignore last-ulp rounding
        margin = bound + z_tol * comb - diff
        entries.append((t_val, lhs, rhs, float(bound), float(margin)))
    return DualityFunctionalReport(
        theta=theta, eps=eps, t_star=t_star, q_limit=q_inf,
        entries=tuple(entries), skipped=skipped,
    )


# ---------------------------------------------------------------------------
# Coexistence / extinction trends
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoexistenceReport:
    eps_mass: float
    times: np.ndarray
    prob: tuple  # McEstimate per time: P{both totals above eps_mass}
    mean_u: tuple
    mean_v: tuple
    max_mass_gap_error: float  # per-replica |(v-bar - u-bar) - (v0 - u0)| max

    def prob_values(self) -> np.ndarray:
        return np.array([p.mean for p in self.prob])


def coexistence_estimator(
    params: SbmParams,
    u0: Field,
    v0: Field,
    T_grid,
    eps_mass: float,
    replicas: int,
    seed: int,
    window: Field | None = None,
    salt: int = 0,
) -> CoexistenceReport:
    """Finite-horizon coexistence proxy.

    For each horizon estimates ``P{u-bar_T > eps_mass and v-bar_T >
    eps_mass}`` (or, when a window function is given, ``P{<u_T, window> >
    eps_mass}``), along with the mean totals.  Also reports the largest
    per-replica deviation of ``v-bar - u-bar`` from its initial value,
    which the perfectly correlated pair preserves pathwise.
    """
    if eps_mass <= 0:
        raise ConfigurationError(f"eps_mass must be > 0, got {eps_mass}")
    if window is not None and window.geometry != u0.geometry:
        raise ConfigurationError("window must live on the pair's geometry")
    ts = np.atleast_1d(np.asarray(T_grid, dtype=float))
    u_tot = np.empty((ts.size, replicas))
    v_tot = np.empty((ts.size, replicas))
    win_pair = np.empty((ts.size, replicas)) if window is not None else None

    def collect(rec, step, fields, rep_slice):
        u, v = fields
        u_tot[rec, rep_slice] = u.sum(axis=1)
        v_tot[rec, rep_slice] = v.sum(axis=1)
        if win_pair is not None:
            win_pair[rec, rep_slice] = u @ window.values

    run_params = replace(params, T=max(params.T, float(ts.max())))
    sbm_ensemble(u0, v0, run_params, seed, replicas, ts, collect, salt=salt)

    prob, mean_u, mean_v = [], [], []
    for k in range(ts.size):
        if win_pair is not None:
            hits = win_pair[k] > eps_mass
        else:
            hits = (u_tot[k] > eps_mass) & (v_tot[k] > eps_mass)
        prob.append(_bernoulli(hits))
        mean_u.append(McEstimate.from_samples(u_tot[k]))
        mean_v.append(McEstimate.from_samples(v_tot[k]))
    gap0 = v0.total() - u0.total()
    gap_err = float(np.max(np.abs((v_tot - u_tot) - gap0)))
    return CoexistenceReport(
        eps_mass=eps_mass, times=ts, prob=tuple(prob),
        mean_u=tuple(mean_u), mean_v=tuple(mean_v),
        max_mass_gap_error=gap_err,
    )


# ---------------------------------------------------------------------------
# Uniform-integrability diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class UniformIntegrabilityReport:
    times: np.ndarray
    cutoffs: np.ndarray
    tail_mean: tuple  # tuple of tuples of McEstimate, indexed [time][cutoff]

    def tail_matrix(self) -> np.ndarray:
        return np.array([[e.mean for e in row] for row in self.tail_mean])


def uniform_integrability_probe(
    params: SbmParams,
    u0: Field,
    v0: Field,
    T_grid,
    cutoffs,
    replicas: int,
    seed: int,
    salt: int = 0,
) -> UniformIntegrabilityReport:
    """Estimate the tail contributions ``E[u-bar_T ; u-bar_T > K]`` over a
    grid of horizons and cutoffs (nonincreasing in K by construction)."""
    ts = np.atleast_1d(np.asarray(T_grid, dtype=float))
    ks = np.atleast_1d(np.asarray(cutoffs, dtype=float))
    if np.any(np.diff(ks) <= 0):
        raise ConfigurationError("cutoffs must be strictly increasing")
    u_tot = np.empty((ts.size, replicas))

    def collect(rec, step, fields, rep_slice):
        u_tot[rec, rep_slice] = fields[0].sum(axis=1)

    run_params = replace(params, T=max(params.T, float(ts.max())))
    sbm_ensemble(u0, v0, run_params, seed, replicas, ts, collect, salt=salt)
    rows = []
    for k in range(ts.size):
        rows.append(tuple(
            McEstimate.from_samples(u_tot[k] * (u_tot[k] > cutoff))
            for cutoff in ks
        ))
    return UniformIntegrabilityReport(times=ts, cutoffs=ks, tail_mean=tuple(rows))


def origin_second_moment_trend(
    b: float,
    theta: float,
    geometry: Geometry,
    T_grid,
    replicas: int,
    seed: int,
    dt: float = 1e-2,
    salt: int = 0,
) -> tuple[np.ndarray, tuple]:
    """Track ``E[w_T(0)^2]`` of the flat-start multiplicative-noise field.

    The second moment stays bounded in time iff the branching rate is
    below the transience threshold ``2/g(0,0)``; this probe reports the
    MC trend so the two regimes can be eyeballed/compared.
    """
    ts = np.atleast_1d(np.asarray(T_grid, dtype=float))
    w0_sq = np.empty((ts.size, replicas))

    def collect(rec, step, fields, rep_slice):
        w0_sq[rec, rep_slice] = fields[0][:, 0] ** 2

    params = SbmParams(b=b, dt=dt, T=float(ts.max()))
    flat0 = Field.constant(geometry, theta, nonneg=True)
    pam_ensemble(flat0, params, seed, replicas, ts, collect, salt=salt)
    return ts, tuple(McEstimate.from_samples(w0_sq[k]) for k in range(ts.size))
