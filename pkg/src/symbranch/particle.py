"""Correlated two-species branching particle systems and the scaling bridge.

Integer counts ``X(i), Y(i)`` of two particle species live on the lattice
sites.  Each particle performs an independent rate-1 random walk; on top
of that, every site runs correlated critical branching driven by the
local pair intensity ``b * X(i) * Y(i)``:

* at rate ``|rho| * b * X(i) * Y(i)`` a *pair event* changes both counts
  at once — for ``rho > 0`` both go up or both go down (probability 1/2
  each), for ``rho < 0`` one goes up and the other down;
* at rate ``(1 - |rho|) * b * X(i) * Y(i)`` each species separately
  performs a critical birth/death (up or down with probability 1/2).

All branching channels vanish when either local count is zero, so counts
never go negative.  Means follow the discrete heat flow, and the
cross-species moments ``E[X(i) Y(j)]`` solve the same linear equation as
the pair-SDE moments ``n^2 E[u(i) v(j)]`` with ``u ~ X/n``: migration
never moves an X and a Y together, so it contributes no cross-species
covariation at any scale ``n``.

Two simulators are provided: an exact event-by-event Gillespie loop for a
single replica (a Fenwick tree over per-site rates gives O(log n) site
selection, then the channel is resolved within the chosen site), and a
batch version that advances each replica start-to-finish through
pre-drawn blocks of noise inside a compiled kernel (numba when
available).  The solo simulator is deterministic per ``(seed, replica,
salt)``; the batch simulator draws from one dedicated stream and matches
the solo one statistically, not bitwise.

``scaling_bridge`` compares rescaled particle total-mass moments at
increasing density scale ``n`` against direct SDE estimates of the same
functionals, reporting per-scale discrepancies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalBlowupError
from .lattice import Field, Geometry
from .rng import replica_stream
from .sde import SbmParams, sbm_ensemble

# Batch runs draw from a stream keyed outside the per-replica salt space
# used by the solo simulator, so the two never share noise.
_BATCH_SALT_OFFSET = 1 << 32

# Event channels, in the fixed order used for selection within a site.
MIG_X, MIG_Y, PAIR, IND_X, IND_Y = range(5)
CHANNEL_NAMES = ("mig_x", "mig_y", "pair", "ind_x", "ind_y")


@dataclass(frozen=True)
class ParticleParams:
    """Branching rate, correlation, horizon and the mass scale ``n``.

    Each particle carries mass ``1/mass_scale`` when counts are compared
    with continuum densities; the event rates themselves are count-based
    and do not depend on it.
    """

    b: float
    rho: float = 0.0
    T: float = 1.0
    mass_scale: int = 1

    def __post_init__(self) -> None:
        if not (self.b >= 0.0 and math.isfinite(self.b)):
            raise ConfigurationError(f"branching rate must be finite and >= 0, got {self.b}")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"correlation must lie in [-1, 1], got {self.rho}")
        if not (self.T >= 0.0 and math.isfinite(self.T)):
            raise ConfigurationError(f"horizon must be finite and >= 0, got {self.T}")
        if not (isinstance(self.mass_scale, int) and self.mass_scale >= 1):
            raise ConfigurationError(
                f"mass scale must be a positive integer, got {self.mass_scale}"
            )


@dataclass(frozen=True, eq=False)
class ParticleTrajectory:
    """Snapshots of one replica along the recording grid.

    ``x_path``/``y_path`` have shape ``(len(times), site_count)`` with
    integer dtype.  ``event_log`` is None unless logging was requested;
    when present it maps ``times``/``channel``/``site``/``aux`` to flat
    arrays, where ``aux`` is the migration target site or, for branching
    events, +1/-1 for the X-side (pair events move Y by ``aux`` too for
    rho > 0 and by ``-aux`` for rho < 0).
    """

    geometry: Geometry
    params: ParticleParams
    seed: int
    replica: int
    times: np.ndarray
    x_path: np.ndarray
    y_path: np.ndarray
    n_events: int
    event_log: dict | None = None

    def total_mass(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_path.sum(axis=1), self.y_path.sum(axis=1)


def counts_from_density(density: Field, n: int) -> np.ndarray:
    """Integer counts ``round(n * density)`` (ties to even), the standard
    way to seed the particle system at density scale ``n``."""
    if n < 1:
        raise ConfigurationError(f"density scale must be >= 1, got {n}")
    return np.rint(n * density.values).astype(np.int64)


def _check_counts(counts, geometry: Geometry, name: str) -> np.ndarray:
    arr = np.asarray(counts)
    if arr.shape != (geometry.site_count,):
        raise ConfigurationError(
            f"{name} must have shape ({geometry.site_count},), got {arr.shape}"
        )
    if not np.issubdtype(arr.dtype, np.integer):
        raise ConfigurationError(f"{name} must be integer counts, got dtype {arr.dtype}")
    if arr.min(initial=0) < 0:
        raise ConfigurationError(f"{name} must be nonnegative")
    return arr.astype(np.int64)


def _site_rates(x, y, params: ParticleParams):
    """Per-site channel rates, stacked in CHANNEL order along axis -2.

    Accepts ``(..., site_count)`` count arrays (float64 is fine); returns
    ``(..., 5, site_count)``.
    """
    pair_intensity = params.b * x * y
    amp = abs(params.rho)
    return np.stack(
        [
            np.asarray(x, dtype=np.float64),
            np.asarray(y, dtype=np.float64),
            amp * pair_intensity,
            (1.0 - amp) * pair_intensity,
            (1.0 - amp) * pair_intensity,
        ],
        axis=-2,
    )


def total_event_rate(x, y, params: ParticleParams) -> float:
    """Total jump rate of the configuration: migration ``sum X + sum Y``
    plus ``(2 - |rho|) * b * sum_i X(i) Y(i)`` of branching."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(x.sum() + y.sum() + (2.0 - abs(params.rho)) * params.b * (x * y).sum())


def _check_record_times(record_times, T: float) -> np.ndarray:
    req = np.atleast_1d(np.asarray(record_times, dtype=float))
    if req.size == 0:
        raise ConfigurationError("need at least one recording time")
    if not np.all(np.isfinite(req)) or np.any(req < 0.0):
        raise ConfigurationError("recording times must be finite and >= 0")
    if np.any(req > T):
        raise ConfigurationError(f"recording times {req[req > T]} exceed the horizon T={T}")
    if np.any(np.diff(req) <= 0.0):
        raise ConfigurationError("recording times must be strictly increasing")
    return req


class _Fenwick:
    """Prefix-sum tree over per-site total rates.

    Supports point updates and sampling the smallest index whose prefix
    sum exceeds a target.  Incremental float updates drift by rounding,
    so callers should rebuild periodically; sampling correctness only
    needs the tree to be a consistent set of partial sums, which it is.
    """

    __slots__ = ("n", "tree")

    def __init__(self, values: np.ndarray):
        self.n = len(values)
        tree = np.zeros(self.n + 1)
        tree[1:] = values
        for i in range(1, self.n):
            parent = i + (i & -i)
            if parent <= self.n:
                tree[parent] += tree[i]
        self.tree = tree

    def update(self, i: int, delta: float) -> None:
        i += 1
        while i <= self.n:
            self.tree[i] += delta
            i += i & -i

    def total(self) -> float:
        i, s = self.n, 0.0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return s

    def find(self, target: float) -> int:
        """Smallest index with prefix sum strictly greater than target."""
        idx = 0
        bit = 1 << (self.n.bit_length())
        while bit:
            nxt = idx + bit
            if nxt <= self.n and self.tree[nxt] <= target:
                target -= self.tree[nxt]
                idx = nxt
            bit >>= 1
        return min(idx, self.n - 1)


def _apply_event(x, y, channel, site, aux, rho):
    if channel == MIG_X:
        x[site] -= 1
        x[aux] += 1
    elif channel == MIG_Y:
        y[site] -= 1
        y[aux] += 1
    elif channel == PAIR:
        x[site] += aux
        y[site] += aux if rho > 0 else -aux
    elif channel == IND_X:
        x[site] += aux
    else:
        y[site] += aux


def simulate_particles(
    x0,
    y0,
    geometry: Geometry,
    params: ParticleParams,
    seed: int,
    record_times,
    replica: int = 0,
    salt: int = 0,
    log_events: bool = False,
    max_events: int = 5_000_000,
) -> ParticleTrajectory:
    """Exact event-driven simulation of one replica.

    Site selection walks a Fenwick tree over per-site total rates; the
    channel is then resolved inside the chosen site from freshly computed
    exact rates.  A waiting time that overshoots the horizon ends the run
    without applying its event.  The run also ends as soon as the last
    recording time has been snapshot (append ``T`` to ``record_times`` if
    the event log should extend to the horizon).  The path is a
    deterministic function of ``(seed, replica, salt)``.
    """
    x = _check_counts(x0, geometry, "x0").copy()
    y = _check_counts(y0, geometry, "y0").copy()
    recs = _check_record_times(record_times, params.T)
    gen = replica_stream(seed, replica, salt)
    nbrs = geometry.neighbors
    n_dirs = nbrs.shape[0]

    site_rate = _site_rates(x, y, params).sum(axis=0)
    fw = _Fenwick(site_rate)
    t = 0.0
    rec_idx = 0
    x_path = np.empty((recs.size, geometry.site_count), dtype=np.int64)
    y_path = np.empty_like(x_path)
    log = {"times": [], "channel": [], "site": [], "aux": []} if log_events else None

    n_events = 0
    while True:
        total = fw.total()
        t_next = t + gen.exponential() / total if total > 0.0 else np.inf
        # Snapshot every recording time passed before the next event.
        while rec_idx < recs.size and recs[rec_idx] < t_next:
            x_path[rec_idx] = x
            y_path[rec_idx] = y
            rec_idx += 1
        if t_next > params.T or rec_idx == recs.size:
            break
        t = t_next
        n_events += 1
        if n_events > max_events:
            raise NumericalBlowupError(
                f"event budget {max_events} exhausted at t={t:.6g}; the branching"
                " intensity has likely exploded",
                step=n_events, site=-1, replica=replica,
            )

        site = fw.find(gen.random() * total)
        rates = _site_rates(x[site : site + 1], y[site : site + 1], params)[:, 0]
        pick = gen.random() * rates.sum()
        channel = 0
        acc = rates[0]
        while channel < 4 and pick >= acc:
            channel += 1
            acc += rates[channel]
        if channel in (MIG_X, MIG_Y):
            aux = int(nbrs[gen.integers(n_dirs), site])
        else:
            aux = 1 if gen.random() < 0.5 else -1
        _apply_event(x, y, channel, site, aux, params.rho)

        for s in {site, aux} if channel in (MIG_X, MIG_Y) else {site}:
            new_rate = float(_site_rates(x[s : s + 1], y[s : s + 1], params).sum())
            fw.update(s, new_rate - site_rate[s])
            site_rate[s] = new_rate
        if n_events % 4096 == 0:
            # Rebuild to shed accumulated float drift in the tree.
            fw = _Fenwick(site_rate)
        if log is not None:
            log["times"].append(t)
            log["channel"].append(channel)
            log["site"].append(site)
            log["aux"].append(aux)

    if log is not None:
        log = {k: np.asarray(v) for k, v in log.items()}
    return ParticleTrajectory(
        geometry=geometry, params=params, seed=seed, replica=replica,
        times=recs, x_path=x_path, y_path=y_path, n_events=n_events,
        event_log=log,
    )


def _advance_replicas(x, y, t, rec_idx, events, done, xs, ys,
                      waits, targets, dirs, signs, rec_times, horizon,
                      b, rho, nbrs):
    """Advance each replica through one pre-drawn noise block.

    Plain loops over ``(replica, event)`` so the function can be compiled
    with numba; it also runs (slowly) as ordinary Python.  ``waits`` are
    unit exponentials, ``targets``/``signs`` uniforms on [0,1) and
    ``dirs`` uniform direction indices, all of shape ``(p, budget)``;
    replica ``r`` consumes row ``r`` until it finishes or the row runs
    out, in which case the caller re-enters with a fresh block.  Channel
    selection scans sites in the fixed CHANNEL-major order.  ``rec_times``
    strictly before the next event time are snapshotted from the
    pre-event state; an event past ``horizon`` freezes the replica
    without being applied.
    """
    p, budget = waits.shape
    m = rec_times.shape[0]
    n = x.shape[1]
    amp = abs(rho)
    c_pair = amp * b
    c_ind = (1.0 - amp) * b
    for r in range(p):
        if done[r]:
            continue
        k = rec_idx[r]
        tr = t[r]
        sx = 0
        sy = 0
        sxy = 0
        for i in range(n):
            sx += x[r, i]
            sy += y[r, i]
            sxy += x[r, i] * y[r, i]
        for j in range(budget):
            total = float(sx + sy) + (c_pair + 2.0 * c_ind) * float(sxy)
            if total <= 0.0:
                # absorbed: the state never changes again
                while k < m:
                    for i in range(n):
                        xs[k, r, i] = x[r, i]
                        ys[k, r, i] = y[r, i]
                    k += 1
                done[r] = True
                break
            t_next = tr + waits[r, j] / total
            while k < m and rec_times[k] < t_next:
                for i in range(n):
                    xs[k, r, i] = x[r, i]
                    ys[k, r, i] = y[r, i]
                k += 1
            if t_next > horizon:
                done[r] = True
                break
            events[r] += 1
            target = targets[r, j] * total
            # cumulative channel blocks in CHANNEL order
            b1 = float(sx)
            b2 = b1 + float(sy)
            b3 = b2 + c_pair * float(sxy)
            b4 = b3 + c_ind * float(sxy)
            site = -1
            acc = 0.0
            if target < b1:
                ch = MIG_X
                for i in range(n):
                    if x[r, i] > 0:
                        site = i
                        acc += float(x[r, i])
                        if target < acc:
                            break
            elif target < b2:
                ch = MIG_Y
                target -= b1
                for i in range(n):
                    if y[r, i] > 0:
                        site = i
                        acc += float(y[r, i])
                        if target < acc:
                            break
            else:
                if target < b3:
                    ch = PAIR
                    target -= b2
                    scale = c_pair
                elif target < b4:
                    ch = IND_X
                    target -= b3
                    scale = c_ind
                else:
                    ch = IND_Y
                    target -= b4
                    scale = c_ind
                for i in range(n):
                    w = x[r, i] * y[r, i]
                    if w > 0:
                        site = i
                        acc += scale * float(w)
                        if target < acc:
                            break
            if site < 0:
                # all mass in the drawn channel sits below float resolution
                tr = t_next
                continue
            if ch == MIG_X:
                tgt = nbrs[dirs[r, j], site]
                sxy += y[r, tgt] - y[r, site]
                x[r, site] -= 1
                x[r, tgt] += 1
            elif ch == MIG_Y:
                tgt = nbrs[dirs[r, j], site]
                sxy += x[r, tgt] - x[r, site]
                y[r, site] -= 1
                y[r, tgt] += 1
            else:
                sgn = 1 if signs[r, j] < 0.5 else -1
                old = x[r, site] * y[r, site]
                if ch == PAIR:
                    dy = sgn if rho > 0.0 else -sgn
                    x[r, site] += sgn
                    y[r, site] += dy
                    sx += sgn
                    sy += dy
                elif ch == IND_X:
                    x[r, site] += sgn
                    sx += sgn
                else:
                    y[r, site] += sgn
                    sy += sgn
                sxy += x[r, site] * y[r, site] - old
            tr = t_next
        t[r] = tr
        rec_idx[r] = k


_compiled_advance = None


def _get_advance():
    """The replica-advance kernel, numba-compiled when available."""
    global _compiled_advance
    if _compiled_advance is None:
        try:
            from numba import njit

            _compiled_advance = njit(cache=True)(_advance_replicas)
        except ImportError:  # pragma: no cover - exercised only without numba
            _compiled_advance = _advance_replicas
    return _compiled_advance


def particle_ensemble(
    x0,
    y0,
    geometry: Geometry,
    params: ParticleParams,
    seed: int,
    replicas: int,
    record_times,
    salt: int = 0,
    max_iterations: int = 50_000_000,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replica-vectorised exact simulation.

    Each replica is advanced independently through pre-drawn blocks of
    noise (one shared generator, so results are deterministic per
    ``(seed, salt)``); replicas whose block runs out before they reach
    the horizon get fresh, geometrically larger blocks.  Event counts per
    replica are capped by ``max_iterations``.  Returns ``(times,
    x_snaps, y_snaps)`` with snapshot arrays of shape ``(len(times),
    replicas, site_count)``.
    """
    if replicas <= 0:
        raise ConfigurationError(f"replica count must be positive, got {replicas}")
    x0 = _check_counts(x0, geometry, "x0")
    y0 = _check_counts(y0, geometry, "y0")
    recs = _check_record_times(record_times, params.T)
    gen = replica_stream(seed, 0, salt + _BATCH_SALT_OFFSET)
    nbrs = geometry.neighbors.astype(np.int64)
    n = geometry.site_count
    advance = _get_advance()

    x = np.broadcast_to(x0, (replicas, n)).copy()
    y = np.broadcast_to(y0, (replicas, n)).copy()
    t = np.zeros(replicas)
    rec_idx = np.zeros(replicas, dtype=np.int64)
    events = np.zeros(replicas, dtype=np.int64)
    done = np.zeros(replicas, dtype=bool)
    x_snaps = np.zeros((recs.size, replicas, n), dtype=np.int64)
    y_snaps = np.zeros_like(x_snaps)

    # First block sized to cover a typical replica in one pass; stragglers
    # (event counts are heavy-tailed under branching) get doubled blocks.
    expected = total_event_rate(x0, y0, params) * params.T
    budget = int(np.clip(1.5 * expected + 64.0, 256, 16384))
    pending = np.arange(replicas)
    while pending.size:
        slab = max(1, 2_000_000 // budget)
        still = []
        for lo in range(0, pending.size, slab):
            idx = pending[lo:lo + slab]
            p = idx.size
            waits = gen.exponential(size=(p, budget))
            targets = gen.random(size=(p, budget))
            dirs = gen.integers(0, nbrs.shape[0], size=(p, budget))
            signs = gen.random(size=(p, budget))
            xb, yb, tb = x[idx], y[idx], t[idx]
            kb, eb, db = rec_idx[idx], events[idx], done[idx]
            xsb, ysb = x_snaps[:, idx], y_snaps[:, idx]
            advance(xb, yb, tb, kb, eb, db, xsb, ysb,
                    waits, targets, dirs, signs, recs, params.T,
                    params.b, params.rho, nbrs)
            x[idx], y[idx], t[idx] = xb, yb, tb
            rec_idx[idx], events[idx], done[idx] = kb, eb, db
            x_snaps[:, idx], y_snaps[:, idx] = xsb, ysb
            blown = ~db & (eb >= max_iterations)
            if blown.any():
                raise NumericalBlowupError(
                    f"event budget {max_iterations} exhausted with"
                    f" {int(blown.sum())} replicas still running",
                    step=int(eb.max()), site=-1, replica=int(idx[blown][0]),
                )
            still.append(idx[~db])
        pending = np.concatenate(still) if still else np.empty(0, dtype=np.int64)
        budget = min(2 * budget, 65536)
    return recs, x_snaps, y_snaps


# ---------------------------------------------------------------------------
# Scaling bridge: rescaled particle moments against the SDE limit
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BridgeLevel:
    """Rescaled particle total-mass moments at one density scale."""

    n: int
    estimates: dict  # name -> (mean, se) for X/n, Y/n, (X/n)^2, (Y/n)^2
    discrepancy: float


@dataclass(frozen=True, eq=False)
class BridgeReport:
    sde_estimates: dict
    levels: tuple

    @property
    def discrepancies(self) -> np.ndarray:
        return np.array([lv.discrepancy for lv in self.levels])

    def is_decreasing(self) -> bool:
        d = self.discrepancies
        return bool(np.all(np.diff(d) < 0.0))


_MOMENT_NAMES = ("mass_u", "mass_v", "mass_u_sq", "mass_v_sq")


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    m = float(samples.mean())
    if samples.size < 2:
        return m, float("inf")
    return m, float(samples.std(ddof=1) / math.sqrt(samples.size))


def scaling_bridge(
    u0: Field,
    v0: Field,
    b: float,
    rho: float,
    T: float,
    n_values,
    seed: int,
    particle_replicas: int = 4000,
    sde_replicas: int = 20_000,
    sde_dt: float = 1e-3,
    salt: int = 0,
) -> BridgeReport:
    """Compare rescaled particle total-mass moments with SDE estimates.

    For each scale ``n`` the particle system starts from counts
    ``round(n * density)`` and reports means/standard errors of
    ``sum X / n``, ``sum Y / n`` and their squares at time ``T``; the SDE
    ensemble estimates the same four functionals of ``(u, v)``.  The
    per-scale discrepancy is the largest absolute difference of means
    over the four functionals.
    """
    geom = u0.geometry
    n_values = [int(n) for n in n_values]
    if any(n < 1 for n in n_values) or len(n_values) < 2:
        raise ConfigurationError("need at least two density scales, all >= 1")

    sde_params = SbmParams(b=b, rho=rho, dt=sde_dt, T=T)
    sums = np.zeros((4,))
    sums_sq = np.zeros((4,))
    count = [0]

    def collect(rec, step, fields, rep_slice):
        mu = fields[0].sum(axis=1)
        mv = fields[1].sum(axis=1)
        vals = np.stack([mu, mv, mu**2, mv**2])
        sums.__iadd__(vals.sum(axis=1))
        sums_sq.__iadd__((vals**2).sum(axis=1))
        count[0] += mu.size

    sbm_ensemble(u0, v0, sde_params, seed, sde_replicas, [T], collect, salt=salt)
    r = count[0]
    sde_mean = sums / r
    sde_se = np.sqrt(np.maximum(sums_sq / r - sde_mean**2, 0.0) / r)
    sde_estimates = {
        name: (float(m), float(s))
        for name, m, s in zip(_MOMENT_NAMES, sde_mean, sde_se)
    }

    levels = []
    for j, n in enumerate(n_values):
        pp = ParticleParams(b=b, rho=rho, T=T, mass_scale=n)
        x0 = counts_from_density(u0, n)
        y0 = counts_from_density(v0, n)
        _, xs, ys = particle_ensemble(
            x0, y0, geom, pp, seed, particle_replicas, [T], salt=salt + 1 + j,
        )
        mx = xs[0].sum(axis=1) / pp.mass_scale
        my = ys[0].sum(axis=1) / pp.mass_scale
        est = {}
        for name, samples in zip(_MOMENT_NAMES, (mx, my, mx**2, my**2)):
            est[name] = _mean_se(samples)
        disc = max(
            abs(est[name][0] - sde_estimates[name][0]) for name in _MOMENT_NAMES
        )
        levels.append(BridgeLevel(n=n, estimates=est, discrepancy=disc))
    return BridgeReport(sde_estimates=sde_estimates, levels=tuple(levels))
