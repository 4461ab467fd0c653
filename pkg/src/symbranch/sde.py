"""Lattice SDE engines: correlated branching pair and multiplicative-noise field.

Two interacting-field models on a periodic lattice, both driven by
site-indexed Brownian noises:

* the correlated branching pair ``(u, v)``: each field diffuses under the
  discrete Laplacian and carries noise intensity ``sqrt(b * u * v)``, with
  correlation ``rho`` between the two driving noises at the same site
  (``rho = 1`` means one shared noise, ``rho = -1`` exactly opposite ones);
* the single multiplicative-noise field ``w``: Laplacian drift plus noise
  intensity ``sqrt(b) * w``, which is the ``u = v`` specialisation.

The pair is integrated with a truncated Euler-Maruyama scheme.  The raw
Gaussian increment is *jointly* truncated so that the exact structural
identities of the continuum model survive discretisation:

* ``rho = +1``: both fields receive one shared increment, truncated from
  below so neither field goes negative.  Because the truncation is shared,
  ``v - u`` evolves by the plain Euler heat step, exactly.
* ``rho = -1``: the fields receive opposite increments, truncated so both
  stay nonnegative.  Opposite truncated increments cancel in ``u + v``,
  so the site-wise sum evolves by the plain Euler heat step and the total
  mass ``<u + v, 1>`` is conserved to rounding error.
* ``|rho| < 1``: the fields get correlated increments and are clamped to
  zero independently.

An optional ceiling ``bound`` multiplies the noise intensity by
``(1 - u/bound)(1 - v/bound)`` under the square root and truncates
increments so fields stay in ``[0, bound]``.

The single field supports two schemes: the same truncated Euler step, and
a splitting scheme whose noise substep is the exact lognormal flow of
``dw = sqrt(b) w dW`` followed by an Euler heat substep.  On a single
site the splitting scheme is exact in distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalBlowupError
from .lattice import Field, Geometry, laplacian_values
from .rng import replica_stream

SCHEMES = ("truncated-euler", "split-step")

# Sizing knobs for batched noise generation: total elements per pre-drawn
# noise block, and the step-block length we aim for when choosing how many
# replicas to advance simultaneously.
_NOISE_BUDGET = 8_000_000
_TARGET_STEP_BLOCK = 64


@dataclass(frozen=True)
class SbmParams:
    """Parameters shared by the pair and single-field engines.

    ``scheme=None`` selects each engine's default: truncated Euler for the
    pair (the splitting scheme needs a multiplicative coefficient, which
    ``sqrt(b u v)`` is not), split-step for the single field.
    """

    b: float
    rho: float = 0.0
    dt: float = 1e-3
    T: float = 1.0
    scheme: str | None = None
    bound: float | None = None

    def __post_init__(self) -> None:
        if not (self.b >= 0.0 and math.isfinite(self.b)):
            raise ConfigurationError(f"branching rate must be finite and >= 0, got {self.b}")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"noise correlation must lie in [-1, 1], got {self.rho}")
        if not (0.0 < self.dt <= 1.0):
            raise ConfigurationError(
                f"time step must lie in (0, 1] so the Euler heat step is positivity"
                f" preserving, got {self.dt}"
            )
        if not (self.T >= 0.0 and math.isfinite(self.T)):
            raise ConfigurationError(f"horizon must be finite and >= 0, got {self.T}")
        if self.scheme is not None and self.scheme not in SCHEMES:
            raise ConfigurationError(
                f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}"
            )
        if self.bound is not None and not (self.bound > 0.0 and math.isfinite(self.bound)):
            raise ConfigurationError(f"bound must be finite and > 0, got {self.bound}")

    @property
    def n_noise(self) -> int:
        """Independent Gaussian components drawn per site per step."""
        return 1 if abs(self.rho) == 1.0 else 2


@dataclass(frozen=True, eq=False)
class SbmState:
    """Pair state at a fixed time; fields share one geometry."""

    t: float
    u: Field
    v: Field

    def __post_init__(self) -> None:
        if self.u.geometry != self.v.geometry:
            raise ConfigurationError("u and v must live on the same geometry")


@dataclass(frozen=True, eq=False)
class PamState:
    t: float
    w: Field


@dataclass(frozen=True, eq=False)
class SbmTrajectory:
    """Recorded pair snapshots for one replica.

    ``u_path``/``v_path`` have shape ``(len(times), site_count)``.
    """

    geometry: Geometry
    params: SbmParams
    seed: int
    replica: int
    times: np.ndarray
    u_path: np.ndarray
    v_path: np.ndarray

    def state(self, k: int) -> SbmState:
        return SbmState(
            t=float(self.times[k]),
            u=Field(self.geometry, self.u_path[k]),
            v=Field(self.geometry, self.v_path[k]),
        )

    def total_mass(self) -> tuple[np.ndarray, np.ndarray]:
        """Site-summed ``u`` and ``v`` along the recording grid."""
        return self.u_path.sum(axis=1), self.v_path.sum(axis=1)


@dataclass(frozen=True, eq=False)
class PamTrajectory:
    geometry: Geometry
    params: SbmParams
    seed: int
    replica: int
    times: np.ndarray
    w_path: np.ndarray

    def state(self, k: int) -> PamState:
        return PamState(t=float(self.times[k]), w=Field(self.geometry, self.w_path[k]))

    def total_mass(self) -> np.ndarray:
        return self.w_path.sum(axis=1)


def _snap_record_times(record_times, params: SbmParams) -> tuple[np.ndarray, np.ndarray]:
    """Map requested times onto the step grid.

    Returns ``(step_indices, snapped_times)``; indices are strictly
    increasing.  Times must be distinct after snapping and must not exceed
    the horizon by more than half a step.
    """
    req = np.atleast_1d(np.asarray(record_times, dtype=float))
    if req.ndim != 1 or req.size == 0:
        raise ConfigurationError("need at least one recording time")
    if np.any(req < 0.0) or not np.all(np.isfinite(req)):
        raise ConfigurationError("recording times must be finite and >= 0")
    steps = np.rint(req / params.dt).astype(np.int64)
    horizon_steps = int(np.rint(params.T / params.dt))
    if np.any(steps > horizon_steps):
        raise ConfigurationError(
            f"recording times {req[steps > horizon_steps]} exceed the horizon T={params.T}"
        )
    if np.any(np.diff(steps) <= 0):
        raise ConfigurationError(
            "recording times must be strictly increasing and distinct on the step grid"
        )
    return steps, steps * params.dt


def _bounded_intensity_factor(u: np.ndarray, v: np.ndarray, bound: float) -> np.ndarray:
    fu = np.clip(1.0 - u / bound, 0.0, 1.0)
    fv = np.clip(1.0 - v / bound, 0.0, 1.0)
    return fu * fv


def _sbm_step_arrays(
    u: np.ndarray,
    v: np.ndarray,
    noise: np.ndarray,
    geometry: Geometry,
    params: SbmParams,
) -> tuple[np.ndarray, np.ndarray]:
    """One truncated Euler step on raw arrays of shape ``(..., site_count)``.

    ``noise`` has shape ``(..., n_noise, site_count)`` of standard normals.
    """
    dt = params.dt
    ut = u + dt * laplacian_values(u, geometry)
    vt = v + dt * laplacian_values(v, geometry)

    intensity = params.b * np.maximum(u, 0.0) * np.maximum(v, 0.0)
    if params.bound is not None:
        intensity *= _bounded_intensity_factor(u, v, params.bound)
    sigma = np.sqrt(intensity) * math.sqrt(dt)

    rho = params.rho
    if rho == 1.0:
        # One shared increment; truncation keeps both fields >= 0 (and
        # below the ceiling when bounded) while staying shared, so v - u
        # still performs the exact Euler heat step.
        incr = sigma * noise[..., 0, :]
        lo = -np.minimum(ut, vt)
        hi = params.bound - np.maximum(ut, vt) if params.bound is not None else np.inf
        incr = np.clip(incr, lo, hi)
        return ut + incr, vt + incr
    if rho == -1.0:
        # Opposite increments; the truncated increment is still applied
        # with opposite signs, so u + v performs the exact Euler heat step.
        incr = sigma * noise[..., 0, :]
        if params.bound is None:
            incr = np.clip(incr, -ut, vt)
        else:
            incr = np.clip(
                incr,
                np.maximum(-ut, vt - params.bound),
                np.minimum(vt, params.bound - ut),
            )
        return ut + incr, vt - incr
    # Correlated but distinct noises: clamp the fields independently.
    xi = noise[..., 0, :]
    eta = rho * xi + math.sqrt(1.0 - rho * rho) * noise[..., 1, :]
    hi = params.bound if params.bound is not None else np.inf
    un = np.clip(ut + sigma * xi, 0.0, hi)
    vn = np.clip(vt + sigma * eta, 0.0, hi)
    return un, vn


def _pam_step_arrays(
    w: np.ndarray,
    noise: np.ndarray,
    geometry: Geometry,
    params: SbmParams,
    scheme: str,
) -> np.ndarray:
    dt = params.dt
    xi = noise[..., 0, :]
    if scheme == "split-step":
        # Exact lognormal noise flow, then an Euler heat substep.
        w = w * np.exp(math.sqrt(params.b * dt) * xi - 0.5 * params.b * dt)
        return w + dt * laplacian_values(w, geometry)
    wt = w + dt * laplacian_values(w, geometry)
    sigma = math.sqrt(params.b) * np.maximum(w, 0.0) * math.sqrt(dt)
    return np.maximum(wt + sigma * xi, 0.0)


def _resolve_scheme(params: SbmParams, model: str) -> str:
    if model == "sbm":
        scheme = params.scheme or "truncated-euler"
        if scheme != "truncated-euler":
            raise ConfigurationError(
                "the splitting scheme needs a multiplicative noise coefficient;"
                " the pair model must use 'truncated-euler'"
            )
        return scheme
    return params.scheme or "split-step"


def step_sbm(state: SbmState, params: SbmParams, rng: np.random.Generator) -> SbmState:
    """Advance the pair by one step, drawing this step's noise from ``rng``."""
    _resolve_scheme(params, "sbm")
    geom = state.u.geometry
    noise = rng.standard_normal((params.n_noise, geom.site_count))
    with np.errstate(over="ignore", invalid="ignore"):
        un, vn = _sbm_step_arrays(state.u.values, state.v.values, noise, geom, params)
    step = int(round(state.t / params.dt)) + 1
    _check_finite((un, vn), step, 0)
    return SbmState(
        t=state.t + params.dt,
        u=Field(geom, un, nonneg=True),
        v=Field(geom, vn, nonneg=True),
    )


def step_pam(state: PamState, params: SbmParams, rng: np.random.Generator) -> PamState:
    scheme = _resolve_scheme(params, "pam")
    geom = state.w.geometry
    noise = rng.standard_normal((1, geom.site_count))
    with np.errstate(over="ignore", invalid="ignore"):
        wn = _pam_step_arrays(state.w.values, noise, geom, params, scheme)
    step = int(round(state.t / params.dt)) + 1
    _check_finite((wn,), step, 0)
    return PamState(t=state.t + params.dt, w=Field(geom, wn, nonneg=True))


def _check_finite(arrays, step: int, base_replica: int) -> None:
    for arr in arrays:
        finite = np.isfinite(arr)
        if finite.all():
            continue
        flat_bad = np.argwhere(~finite)
        first = flat_bad[0]
        site = int(first[-1])
        replica = base_replica + (int(first[0]) if arr.ndim > 1 else 0)
        raise NumericalBlowupError(
            f"non-finite field value at step {step}, site {site}, replica {replica};"
            " reduce dt or the branching rate",
            step=step,
            site=site,
            replica=replica,
        )


def _chunk_sizes(replicas: int, n_steps: int, n_noise: int, site_count: int) -> tuple[int, int]:
    per_rep_step = max(1, n_noise * site_count)
    r_chunk = min(replicas, max(32, _NOISE_BUDGET // (per_rep_step * _TARGET_STEP_BLOCK)))
    s_block = max(8, _NOISE_BUDGET // max(1, r_chunk * per_rep_step))
    if n_steps > 0:
        s_block = min(s_block, n_steps)
    return r_chunk, s_block


def _run_ensemble(
    model: str,
    fields0: tuple[np.ndarray, ...],
    geometry: Geometry,
    params: SbmParams,
    seed: int,
    replicas: int,
    record_steps: np.ndarray,
    collect,
    salt: int,
    scheme: str,
    first_replica: int = 0,
) -> None:
    """Advance ``replicas`` independent copies, invoking ``collect`` at each
    recording step.

    ``collect(rec_idx, step, fields, rep_slice)`` receives read-only views
    of shape ``(chunk, site_count)`` per field; it must copy anything it
    keeps.  Noise is pre-drawn per replica in step blocks; because each
    replica owns a counter-based stream and draws are consumed in (step,
    component, site) order, results are bitwise independent of the
    chunking, so one replica run alone reproduces itself inside any batch.
    """
    if replicas <= 0:
        raise ConfigurationError(f"replica count must be positive, got {replicas}")
    n_steps = int(record_steps[-1])
    n_noise = params.n_noise if model == "sbm" else 1
    r_chunk, s_block = _chunk_sizes(replicas, n_steps, n_noise, geometry.site_count)

    for lo in range(0, replicas, r_chunk):
        hi = min(lo + r_chunk, replicas)
        gens = [replica_stream(seed, first_replica + r, salt) for r in range(lo, hi)]
        cur = [np.broadcast_to(f, (hi - lo, geometry.site_count)).copy() for f in fields0]
        rec_idx = 0
        while rec_idx < record_steps.size and record_steps[rec_idx] == 0:
            collect(rec_idx, 0, tuple(cur), slice(lo, hi))
            rec_idx += 1
        step = 0
        noise_block = np.empty((hi - lo, s_block, n_noise, geometry.site_count))
        # Overflow/invalid are legitimate here: they signal a blowup that
        # _check_finite converts into a structured error.
        with np.errstate(over="ignore", invalid="ignore"):
            while step < n_steps:
                block = min(s_block, n_steps - step)
                for i, gen in enumerate(gens):
                    noise_block[i, :block] = gen.standard_normal(
                        (block, n_noise, geometry.site_count)
                    )
                for j in range(block):
                    noise = noise_block[:, j]
                    if model == "sbm":
                        u, v = _sbm_step_arrays(cur[0], cur[1], noise, geometry, params)
                        cur = [u, v]
                    else:
                        cur = [_pam_step_arrays(cur[0], noise, geometry, params, scheme)]
                    step += 1
                    _check_finite(cur, step, first_replica + lo)
                    while rec_idx < record_steps.size and record_steps[rec_idx] == step:
                        collect(rec_idx, step, tuple(cur), slice(lo, hi))
                        rec_idx += 1


def _check_pair_initial(u0: Field, v0: Field) -> None:
    if u0.geometry != v0.geometry:
        raise ConfigurationError("u0 and v0 must live on the same geometry")
    if not (u0.nonneg and v0.nonneg):
        raise ConfigurationError("initial pair fields must be nonnegative")


def simulate_sbm(
    u0: Field,
    v0: Field,
    params: SbmParams,
    seed: int,
    record_times,
    replica: int = 0,
    salt: int = 0,
) -> SbmTrajectory:
    """Simulate one pair replica, recording snapshots at the given times.

    Recording times are snapped to the step grid ``k * dt``.
    """
    scheme = _resolve_scheme(params, "sbm")
    _check_pair_initial(u0, v0)
    geom = u0.geometry
    steps, times = _snap_record_times(record_times, params)
    u_path = np.empty((steps.size, geom.site_count))
    v_path = np.empty((steps.size, geom.site_count))

    def collect(rec_idx, step, fields, rep_slice):
        u_path[rec_idx] = fields[0][0]
        v_path[rec_idx] = fields[1][0]

    _run_ensemble(
        "sbm", (u0.values, v0.values), geom, params,
        seed, 1, steps, collect, salt, scheme, first_replica=replica,
    )
    return SbmTrajectory(
        geometry=geom, params=params, seed=seed, replica=replica,
        times=times, u_path=u_path, v_path=v_path,
    )


def simulate_pam(
    w0: Field,
    params: SbmParams,
    seed: int,
    record_times,
    replica: int = 0,
    salt: int = 0,
) -> PamTrajectory:
    scheme = _resolve_scheme(params, "pam")
    geom = w0.geometry
    if not w0.nonneg:
        raise ConfigurationError("initial field must be nonnegative")
    steps, times = _snap_record_times(record_times, params)
    w_path = np.empty((steps.size, geom.site_count))

    def collect(rec_idx, step, fields, rep_slice):
        w_path[rec_idx] = fields[0][0]

    _run_ensemble(
        "pam", (w0.values,), geom, params, seed, 1, steps, collect, salt, scheme,
        first_replica=replica,
    )
    return PamTrajectory(
        geometry=geom, params=params, seed=seed, replica=replica,
        times=times, w_path=w_path,
    )


def sbm_ensemble(
    u0: Field,
    v0: Field,
    params: SbmParams,
    seed: int,
    replicas: int,
    record_times,
    collect,
    salt: int = 0,
) -> np.ndarray:
    """Run many pair replicas, streaming snapshots through ``collect``.

    ``collect(rec_idx, step, (u, v), rep_slice)`` sees each recording time
    once per replica chunk, with ``(chunk, site_count)`` arrays; replica
    ``r`` of the batch is bitwise identical to ``simulate_sbm`` run with
    the same seed/salt and that replica index.  Returns the snapped
    recording times.
    """
    scheme = _resolve_scheme(params, "sbm")
    _check_pair_initial(u0, v0)
    geom = u0.geometry
    steps, times = _snap_record_times(record_times, params)
    _run_ensemble(
        "sbm", (u0.values, v0.values), geom, params,
        seed, replicas, steps, collect, salt, scheme,
    )
    return times


def pam_ensemble(
    w0: Field,
    params: SbmParams,
    seed: int,
    replicas: int,
    record_times,
    collect,
    salt: int = 0,
) -> np.ndarray:
    scheme = _resolve_scheme(params, "pam")
    geom = w0.geometry
    if not w0.nonneg:
        raise ConfigurationError("initial field must be nonnegative")
    steps, times = _snap_record_times(record_times, params)
    _run_ensemble("pam", (w0.values,), geom, params, seed, replicas, steps, collect, salt, scheme)
    return times
