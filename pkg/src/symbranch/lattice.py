"""Periodic lattices, fields, and random-walk primitives.

Everything in the package lives on a d-dimensional torus of side L whose
sites are indexed in row-major (C) order.  This module owns that geometry
plus the operators built directly on it:

* the discrete Laplacian ``(1/2d) * sum_{j~i} (phi(j) - phi(i))``,
* the rate-1 random-walk semigroup ``P_t`` (Poisson-weighted power series
  of the one-step averaging operator, or explicit Euler stepping),
* the infinite-lattice Green's function at the origin for d >= 3 and the
  branching-rate threshold ``b2 = 2 / g(0,0)`` derived from it,
* a Monte Carlo occupation-time estimator used as an independent
  cross-check on the Green's function series.

Design notes: neighbor tables are precomputed once per geometry; all
field-valued operators accept arrays shaped ``(..., site_count)`` so the
stochastic engines can batch replicas along leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, zeta

from .errors import ConfigurationError, RecurrentWalkError

MAX_DIMENSION = 4

# Empirical bounds K_d on  |p_n(0,0) - clt_n| * n^(d/2+1)  over even n,
# calibrated against exactly-computed return probabilities (n <= 8192)
# and doubled for safety.  Used for the rigorous tail bound in
# green_origin; see _green_tail_error_bound.
_CLT_REMAINDER_CONST = {3: 1.0, 4: 2.0}


@dataclass(frozen=True)
class Geometry:
    """A d-dimensional periodic box with side L and row-major site order."""

    d: int
    L: int
    site_count: int
    # neighbors[k] is the site index one step along axis k//2 in direction
    # (-1)^(k%2); shape (2d, site_count).  Derived from (d, L), so it is
    # excluded from equality/hash.
    neighbors: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        self.neighbors.setflags(write=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.L,) * self.d

    def index_of(self, coords) -> int:
        """Row-major site index of integer coordinates (wrapped mod L)."""
        coords = np.asarray(coords, dtype=int) % self.L
        if coords.shape != (self.d,):
            raise ConfigurationError(
                f"expected {self.d} coordinates, got {coords.shape}"
            )
        return int(np.ravel_multi_index(tuple(coords), self.shape))

    def coords_of(self, index: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(index, self.shape))


def make_geometry(d: int, L: int) -> Geometry:
    """Build the torus geometry and its neighbor table."""
    if not (1 <= int(d) <= MAX_DIMENSION):
        raise ConfigurationError(f"dimension must be in [1, {MAX_DIMENSION}], got {d}")
    if int(L) < 1:
        raise ConfigurationError(f"side length must be >= 1, got {L}")
    d, L = int(d), int(L)
    n = L**d
    idx = np.arange(n)
    coords = np.array(np.unravel_index(idx, (L,) * d))  # (d, n)
    nbrs = np.empty((2 * d, n), dtype=np.int64)
    for axis in range(d):
        for k, step in enumerate((1, -1)):
            shifted = coords.copy()
            shifted[axis] = (shifted[axis] + step) % L
            nbrs[2 * axis + k] = np.ravel_multi_index(tuple(shifted), (L,) * d)
    return Geometry(d=d, L=L, site_count=n, neighbors=nbrs)


@dataclass(frozen=True, eq=False)
class Field:
    """A real-valued function on the sites of a geometry.

    Values are copied on construction and frozen; set ``nonneg=True`` to
    additionally enforce pointwise nonnegativity.  Fields compare by
    identity; compare ``.values`` explicitly when you mean the numbers.
    """

    geometry: Geometry
    values: np.ndarray
    nonneg: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if vals.shape != (self.geometry.site_count,):
            raise ConfigurationError(
                f"field has {vals.size} values for {self.geometry.site_count} sites"
            )
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("field values must be finite")
        if self.nonneg and np.any(vals < 0.0):
            raise ConfigurationError("field declared nonnegative has negative entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, geometry: Geometry, nonneg: bool = False) -> "Field":
        return cls(geometry, np.zeros(geometry.site_count), nonneg)

    @classmethod
    def constant(cls, geometry: Geometry, value: float, nonneg: bool = False) -> "Field":
        return cls(geometry, np.full(geometry.site_count, float(value)), nonneg)

    @classmethod
    def point_masses(cls, geometry: Geometry, masses: dict, nonneg: bool = False) -> "Field":
        """Field supported on finitely many sites; keys are coordinate
        tuples (or plain ints in d=1), values are the masses."""
        vals = np.zeros(geometry.site_count)
        for where, mass in masses.items():
            if np.isscalar(where):
                where = (where,)
            vals[geometry.index_of(where)] += float(mass)
        return cls(geometry, vals, nonneg)

    def total(self) -> float:
        return float(self.values.sum())


def walk_operator_apply(values: np.ndarray, geometry: Geometry) -> np.ndarray:
    """One application of the walk's averaging operator P (mean over the
    2d neighbors).  Works on arrays shaped (..., site_count)."""
    nbrs = geometry.neighbors
    acc = values.take(nbrs[0], axis=-1).astype(np.float64, copy=True)
    for k in range(1, nbrs.shape[0]):
        acc += values.take(nbrs[k], axis=-1)
    acc /= nbrs.shape[0]
    return acc


def laplacian_values(values: np.ndarray, geometry: Geometry) -> np.ndarray:
    """Discrete Laplacian on raw arrays shaped (..., site_count).

    Accumulated as a mean of neighbor increments rather than P*phi - phi,
    so constant fields map to exactly zero in floating point.
    """
    nbrs = geometry.neighbors
    acc = values.take(nbrs[0], axis=-1) - values
    for k in range(1, nbrs.shape[0]):
        acc += values.take(nbrs[k], axis=-1) - values
    acc /= nbrs.shape[0]
    return acc


def laplacian(phi: Field) -> Field:
    """Discrete Laplacian  (1/2d) * sum over neighbors of the increment."""
    return Field(phi.geometry, laplacian_values(phi.values, phi.geometry))


def heat_semigroup_apply(
    phi: Field,
    t: float,
    tol: float = 1e-12,
    method: str = "series",
    dt: float | None = None,
) -> Field:
    """Apply the walk semigroup P_t to a field.

    ``method="series"`` evaluates the Poisson-weighted power series
    ``exp(-t) * sum_n t^n/n! P^n phi`` truncated once the remaining Poisson
    mass drops below ``tol`` (truncation error <= tol * max|phi|).
    ``method="euler"`` repeatedly applies ``I + dt*Laplacian`` (requires
    0 < dt <= 1 and t an integer multiple of dt up to rounding); it exists
    as the fast cross-check path and must agree with the series up to the
    usual first-order stepping error.
    """
    if t < 0:
        raise ConfigurationError(f"time must be >= 0, got {t}")
    if tol <= 0:
        raise ConfigurationError(f"tolerance must be > 0, got {tol}")
    if method == "series":
        return Field(phi.geometry, _series_propagate(phi.values, t, tol, phi.geometry))
    if method == "euler":
        if dt is None or not (0.0 < dt <= 1.0):
            raise ConfigurationError("euler method needs a step 0 < dt <= 1")
        n_steps = int(round(t / dt))
        if abs(n_steps * dt - t) > 1e-9 * max(1.0, t):
            raise ConfigurationError(f"t={t} is not a multiple of dt={dt}")
        vals = phi.values.astype(np.float64, copy=True)
        for _ in range(n_steps):
            vals = vals + dt * laplacian_values(vals, phi.geometry)
        return Field(phi.geometry, vals)
    raise ConfigurationError(f"unknown method {method!r}")


def _series_propagate(values, t, tol, geometry):
    """Poisson-series evaluation of P_t on a raw value array."""
    if t == 0.0:
        return values.astype(np.float64, copy=True)
    term_weight = np.exp(-t)  # Poisson pmf at n=0
    acc = term_weight * values
    power = values
    covered = term_weight
    n = 0
    # Poisson mass beyond n_max(t) is far below any sensible tol.
    n_cap = int(t + 12.0 * np.sqrt(t + 1.0) + 60.0)
    while covered < 1.0 - tol and n < n_cap:
        n += 1
        power = walk_operator_apply(power, geometry)
        term_weight *= t / n
        acc = acc + term_weight * power
        covered += term_weight
    return acc


# ---------------------------------------------------------------------------
# Return probabilities and the Green's function at the origin.
# ---------------------------------------------------------------------------


def _log_binom(n, k):
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


@lru_cache(maxsize=8)
def _return_probs_1d(n_max: int) -> np.ndarray:
    """p_n(0,0) for the 1-d simple random walk, n = 0..n_max."""
    p = np.zeros(n_max + 1)
    m = np.arange(0, n_max + 1, 2)
    p[m] = np.exp(_log_binom(m, m / 2) - m * np.log(2.0))
    return p


@lru_cache(maxsize=8)
def _return_probs_2d(n_max: int) -> np.ndarray:
    # Rotating the 2-d walk 45 degrees splits it into two independent 1-d
    # walks, so the return probability is the square of the 1-d one.
    return _return_probs_1d(n_max) ** 2


@lru_cache(maxsize=8)
def return_probabilities(d: int, n_max: int) -> np.ndarray:
    """Exact return probabilities p_n(0,0), n = 0..n_max, for the
    d-dimensional simple random walk (d <= 4).

    Dimensions 3 and 4 are reduced to lower-dimensional walks by
    conditioning on how many steps fall in a fixed coordinate block
    (binomial split), which keeps the computation O(n_max^2).
    """
    if d == 1:
        return _return_probs_1d(n_max).copy()
    if d == 2:
        return _return_probs_2d(n_max).copy()
    if d == 3:
        p_lo, lo_prob = _return_probs_1d(n_max), 1.0 / 3.0
    elif d == 4:
        p_lo, lo_prob = _return_probs_2d(n_max), 1.0 / 2.0
    else:
        raise ConfigurationError(f"unsupported dimension {d}")
    p_hi = _return_probs_2d(n_max)
    out = np.zeros(n_max + 1)
    out[0] = 1.0
    log_lo, log_hi = np.log(lo_prob), np.log1p(-lo_prob)
    for n in range(2, n_max + 1, 2):
        j = np.arange(0, n + 1, 2)
        weights = np.exp(_log_binom(float(n), j) + j * log_lo + (n - j) * log_hi)
        out[n] = float(np.dot(weights, p_lo[j] * p_hi[n - j]))
    return out


def _clt_return_estimate(d: int, n: np.ndarray) -> np.ndarray:
    """Local-CLT estimate 2*(d/(2*pi*n))^(d/2) of p_n(0,0) for even n."""
    return 2.0 * (d / (2.0 * np.pi * n)) ** (d / 2.0)


def _green_tail_estimate(d: int, n_trunc: int) -> float:
    """CLT estimate of sum of p_n(0,0) over even n > n_trunc."""
    # sum over even n>N of n^(-d/2) = 2^(-d/2) * hurwitz_zeta(d/2, N/2+1)
    return float(
        2.0 * (d / (4.0 * np.pi)) ** (d / 2.0) * zeta(d / 2.0, n_trunc / 2.0 + 1.0)
    )


def _green_tail_error_bound(d: int, n_trunc: int) -> float:
    """Rigorous bound on the error of the CLT tail estimate."""
    k = _CLT_REMAINDER_CONST[d]
    s = d / 2.0 + 1.0
    return float(k * 2.0**-s * zeta(s, n_trunc / 2.0 + 1.0))


@lru_cache(maxsize=32)
def green_origin(d: int, tail_tol: float = 1e-6) -> float:
    """Green's function g(0,0) of the rate-1 walk on the infinite lattice.

    Computed as the sum of return probabilities over step counts (the
    continuous-time occupation integral equals this sum because holding
    times have mean one): an exact partial sum up to a truncation point
    plus a local-CLT tail estimate whose error is rigorously below
    ``tail_tol``.  Partial sums are monotone nondecreasing in the
    truncation level, so the exact component only ever grows.

    Raises :class:`RecurrentWalkError` for d <= 2, where the walk is
    recurrent and the sum diverges.
    """
    if not (1 <= int(d) <= MAX_DIMENSION):
        raise ConfigurationError(f"dimension must be in [1, {MAX_DIMENSION}], got {d}")
    if int(d) <= 2:
        raise RecurrentWalkError(
            f"g(0,0) diverges in d={d}: the simple random walk is recurrent"
        )
    if tail_tol <= 0:
        raise ConfigurationError(f"tail_tol must be > 0, got {tail_tol}")
    d = int(d)
    n_trunc = 256
    while _green_tail_error_bound(d, n_trunc) > tail_tol:
        n_trunc *= 2
        if n_trunc > 1 << 20:
            raise ConfigurationError(f"tail_tol={tail_tol} is unreachably small")
    partial = float(return_probabilities(d, n_trunc).sum())
    return partial + _green_tail_estimate(d, n_trunc)


def b2(d: int, tail_tol: float = 1e-6) -> float:
    """Branching-rate threshold 2/g(0,0): single-site second moments of
    the flat multiplicative-noise flow stay bounded strictly below it and
    grow strictly above it (transient dimensions only)."""
    return 2.0 / green_origin(d, tail_tol)


def mc_occupation_time(
    d: int,
    n_steps: int,
    walkers: int,
    seed: int,
    chunk: int = 250_000,
) -> tuple[float, float]:
    """Monte Carlo estimate of the expected number of visits to the origin
    in steps 0..n_steps of the d-dimensional simple random walk.

    Returns (mean, standard error).  This is the independent cross-check
    for the Green's-function series: its expectation equals the partial
    sum of return probabilities up to ``n_steps``.
    """
    if walkers < 1 or n_steps < 0:
        raise ConfigurationError("need walkers >= 1 and n_steps >= 0")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < walkers:
        m = min(chunk, walkers - done)
        pos = np.zeros((m, d), dtype=np.int64)
        visits = np.ones(m, dtype=np.int64)  # step 0 counts
        rows = np.arange(m)
        for _ in range(n_steps):
            move = rng.integers(0, 2 * d, size=m)
            pos[rows, move >> 1] += (move & 1) * 2 - 1
            visits += ~pos.any(axis=1)
        total += float(visits.sum())
        total_sq += float((visits.astype(np.float64) ** 2).sum())
        done += m
    mean = total / walkers
    var = max(total_sq / walkers - mean**2, 0.0) * walkers / max(walkers - 1, 1)
    return mean, float(np.sqrt(var / walkers))
