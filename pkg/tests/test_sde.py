"""Tests for the lattice SDE engines.

The deterministic skeleton (b = 0) must reproduce Euler heat stepping
bitwise; the structural identities of the perfectly correlated and
anti-correlated pairs must survive truncation up to rounding; ensemble
moments are checked against an exact linear recursion for the
pre-truncation scheme (an independent oracle that never touches the
stochastic code path).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from symbranch.errors import ConfigurationError, NumericalBlowupError
from symbranch.lattice import Field, laplacian_values, make_geometry
from symbranch.rng import replica_stream
from symbranch.sde import (
    PamState,
    SbmParams,
    SbmState,
    pam_ensemble,
    sbm_ensemble,
    simulate_pam,
    simulate_sbm,
    step_pam,
    step_sbm,
)

RING = make_geometry(1, 8)
TORUS = make_geometry(2, 4)


def euler_heat(values, geometry, dt, n_steps):
    out = np.array(values, dtype=float, copy=True)
    for _ in range(n_steps):
        out = out + dt * laplacian_values(out, geometry)
    return out


def bump(geometry, seed, lo=0.2, hi=2.0):
    rng = np.random.default_rng(seed)
    return Field(geometry, rng.uniform(lo, hi, geometry.site_count), nonneg=True)


# ---------------------------------------------------------------------------
# Deterministic skeleton and structural identities
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("rho", [1.0, -1.0, 0.0, 0.37])
def test_zero_rate_reduces_to_euler_heat_bitwise(rho):
    params = SbmParams(b=0.0, rho=rho, dt=0.05, T=1.0)
    u0, v0 = bump(RING, 1), bump(RING, 2)
    traj = simulate_sbm(u0, v0, params, seed=7, record_times=[0.5, 1.0])
    assert_array_equal(traj.u_path[0], euler_heat(u0.values, RING, 0.05, 10))
    assert_array_equal(traj.u_path[1], euler_heat(u0.values, RING, 0.05, 20))
    assert_array_equal(traj.v_path[1], euler_heat(v0.values, RING, 0.05, 20))


def test_shared_noise_difference_is_euler_heat():
    # With one shared, jointly truncated increment, v - u must follow the
    # deterministic Euler heat flow of v0 - u0 (exactly, modulo rounding).
    params = SbmParams(b=2.0, rho=1.0, dt=0.01, T=1.0)
    u0, v0 = bump(TORUS, 3), bump(TORUS, 4)
    traj = simulate_sbm(u0, v0, params, seed=11, record_times=[0.25, 1.0])
    for k, n in [(0, 25), (1, 100)]:
        eta = euler_heat(v0.values - u0.values, TORUS, 0.01, n)
        assert np.max(np.abs((traj.v_path[k] - traj.u_path[k]) - eta)) < 1e-13


def test_opposite_noise_sum_is_euler_heat_and_mass_constant():
    params = SbmParams(b=3.0, rho=-1.0, dt=0.02, T=2.0)
    u0, v0 = bump(RING, 5), bump(RING, 6)
    traj = simulate_sbm(u0, v0, params, seed=13, record_times=[0.5, 1.0, 2.0])
    mass0 = u0.total() + v0.total()
    for k, n in [(0, 25), (1, 50), (2, 100)]:
        s = euler_heat(u0.values + v0.values, RING, 0.02, n)
        assert np.max(np.abs((traj.u_path[k] + traj.v_path[k]) - s)) < 1e-13
        assert abs((traj.u_path[k] + traj.v_path[k]).sum() - mass0) < 1e-12


def test_opposite_noise_flat_sum_stays_flat():
    params = SbmParams(b=1.0, rho=-1.0, dt=0.05, T=3.0)
    u0 = Field.constant(RING, 0.3, nonneg=True)
    v0 = Field.constant(RING, 0.7, nonneg=True)
    traj = simulate_sbm(u0, v0, params, seed=17, record_times=[3.0])
    assert np.max(np.abs(traj.u_path[0] + traj.v_path[0] - 1.0)) < 1e-14


def test_fields_stay_nonnegative_and_below_bound():
    params = SbmParams(b=5.0, rho=0.0, dt=0.05, T=2.0, bound=2.0)
    u0 = Field.constant(TORUS, 1.5, nonneg=True)
    v0 = Field.constant(TORUS, 0.5, nonneg=True)
    traj = simulate_sbm(u0, v0, params, seed=19, record_times=[0.5, 1.0, 2.0])
    for arr in (traj.u_path, traj.v_path):
        assert arr.min() >= 0.0
        assert arr.max() <= 2.0 + 1e-12


@settings(max_examples=20, deadline=None)
@given(
    rho=st.sampled_from([1.0, -1.0, -0.5, 0.8]),
    b=st.floats(0.0, 8.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_truncation_keeps_pair_nonnegative(rho, b, seed):
    params = SbmParams(b=b, rho=rho, dt=0.1, T=1.0)
    u0 = Field.point_masses(RING, {0: 1.0, 3: 0.2}, nonneg=True)
    v0 = Field.point_masses(RING, {1: 2.0}, nonneg=True)
    traj = simulate_sbm(u0, v0, params, seed=seed, record_times=[0.5, 1.0])
    assert traj.u_path.min() >= 0.0
    assert traj.v_path.min() >= 0.0
    if rho == -1.0:
        assert abs(traj.u_path[1].sum() + traj.v_path[1].sum() - 3.2) < 1e-12


def test_perfect_correlation_with_equal_start_keeps_fields_identical():
    params = SbmParams(b=1.5, rho=1.0, dt=0.02, T=1.0)
    w0 = bump(RING, 8)
    traj = simulate_sbm(w0, w0, params, seed=23, record_times=[1.0])
    assert_array_equal(traj.u_path, traj.v_path)


def test_perfect_correlation_matches_truncated_single_field():
    # rho = +1 with u0 = v0 is the single multiplicative-noise field; the
    # two engines consume identical draws, so paths agree to rounding.
    params = SbmParams(b=1.5, rho=1.0, dt=0.02, T=1.0)
    w0 = bump(RING, 9)
    pair = simulate_sbm(w0, w0, params, seed=29, record_times=[0.5, 1.0])
    single = simulate_pam(
        w0,
        SbmParams(b=1.5, rho=1.0, dt=0.02, T=1.0, scheme="truncated-euler"),
        seed=29,
        record_times=[0.5, 1.0],
    )
    assert_allclose(pair.u_path, single.w_path, rtol=1e-10, atol=1e-13)


# ---------------------------------------------------------------------------
# Reproducibility
# ---------------------------------------------------------------------------


def test_same_seed_same_path():
    params = SbmParams(b=1.0, rho=0.3, dt=0.05, T=1.0)
    u0, v0 = bump(RING, 10), bump(RING, 11)
    a = simulate_sbm(u0, v0, params, seed=101, record_times=[1.0])
    b = simulate_sbm(u0, v0, params, seed=101, record_times=[1.0])
    c = simulate_sbm(u0, v0, params, seed=102, record_times=[1.0])
    assert_array_equal(a.u_path, b.u_path)
    assert_array_equal(a.v_path, b.v_path)
    assert not np.array_equal(a.u_path, c.u_path)


def test_replicas_and_salts_give_distinct_noise():
    params = SbmParams(b=1.0, rho=1.0, dt=0.1, T=0.5)
    u0, v0 = bump(RING, 12), bump(RING, 13)
    base = simulate_sbm(u0, v0, params, seed=5, record_times=[0.5])
    other_rep = simulate_sbm(u0, v0, params, seed=5, record_times=[0.5], replica=1)
    other_salt = simulate_sbm(u0, v0, params, seed=5, record_times=[0.5], salt=1)
    assert not np.array_equal(base.u_path, other_rep.u_path)
    assert not np.array_equal(base.u_path, other_salt.u_path)


def test_batch_replica_matches_solo_bitwise(monkeypatch):
    # Shrink the noise budget so the batch is forced through several
    # replica chunks and short step blocks; every replica must still
    # reproduce its solo trajectory bit for bit.
    import symbranch.sde as sde

    monkeypatch.setattr(sde, "_NOISE_BUDGET", 2_000)
    params = SbmParams(b=2.0, rho=-0.4, dt=0.05, T=1.0)
    u0, v0 = bump(RING, 14), bump(RING, 15)
    replicas = 40
    got_u = np.empty((2, replicas, RING.site_count))
    got_v = np.empty_like(got_u)

    def collect(rec, step, fields, rep_slice):
        got_u[rec, rep_slice] = fields[0]
        got_v[rec, rep_slice] = fields[1]

    sbm_ensemble(u0, v0, params, seed=77, replicas=replicas,
                 record_times=[0.5, 1.0], collect=collect)
    for r in (0, 31, 32, 39):
        solo = simulate_sbm(u0, v0, params, seed=77, record_times=[0.5, 1.0], replica=r)
        assert_array_equal(got_u[:, r], solo.u_path)
        assert_array_equal(got_v[:, r], solo.v_path)


def test_manual_stepping_matches_engine():
    params = SbmParams(b=1.0, rho=0.6, dt=0.1, T=0.5)
    u0, v0 = bump(RING, 16), bump(RING, 17)
    traj = simulate_sbm(u0, v0, params, seed=42, record_times=[0.5], replica=3)
    gen = replica_stream(42, replica=3)
    state = SbmState(0.0, u0, v0)
    for _ in range(5):
        state = step_sbm(state, params, gen)
    assert_array_equal(state.u.values, traj.u_path[0])
    assert_array_equal(state.v.values, traj.v_path[0])


def test_single_site_splitting_is_exact_lognormal_flow():
    # On one site the Laplacian vanishes identically, so the splitting
    # scheme is a pure product of exact lognormal factors; rebuild it
    # from the raw stream and demand bitwise agreement.
    geom = make_geometry(1, 1)
    params = SbmParams(b=0.8, dt=0.25, T=1.0)
    w0 = Field(geom, [1.7], nonneg=True)
    traj = simulate_pam(w0, params, seed=55, record_times=[1.0])
    xs = replica_stream(55).standard_normal((4, 1, 1))[:, 0, 0]
    w = 1.7
    for x in xs:
        w = w * np.exp(np.sqrt(0.8 * 0.25) * x - 0.5 * 0.8 * 0.25)
    assert_array_equal(traj.w_path[0], [w])


# ---------------------------------------------------------------------------
# Moment oracles (exact linear recursions for the pre-truncation scheme)
# ---------------------------------------------------------------------------


def dense_heat_matrix(geometry, dt):
    eye = np.eye(geometry.site_count)
    return eye + dt * np.array([laplacian_values(col, geometry) for col in eye]).T


def pair_moment_recursion(u0, v0, E, dt, b, rho, n_steps):
    """Exact E[u(i) v(j)] for the scheme without truncation events."""
    M = np.outer(u0, v0)
    for _ in range(n_steps):
        M = E @ M @ E.T + dt * b * rho * np.diag(np.diag(M))
    return M


def test_pair_cross_moments_match_exact_recursion():
    geom = make_geometry(1, 4)
    b, rho, dt, T = 1.2, 0.6, 0.01, 0.5
    n_steps = 50
    params = SbmParams(b=b, rho=rho, dt=dt, T=T)
    u0 = Field.constant(geom, 1.0, nonneg=True)
    v0 = Field(geom, [0.5, 1.0, 1.5, 1.0], nonneg=True)

    replicas = 30_000
    s_uv = np.zeros((4, 4))
    s_uv2 = np.zeros((4, 4))
    s_u = np.zeros(4)

    def collect(rec, step, fields, rep_slice):
        u, v = fields
        s_uv.__iadd__(np.einsum("ri,rj->ij", u, v))
        s_uv2.__iadd__(np.einsum("ri,rj->ij", u**2, v**2))
        s_u.__iadd__(u.sum(axis=0))

    sbm_ensemble(u0, v0, params, seed=314, replicas=replicas,
                 record_times=[T], collect=collect)

    E = dense_heat_matrix(geom, dt)
    M = pair_moment_recursion(u0.values, v0.values, E, dt, b, rho, n_steps)
    mean_uv = s_uv / replicas
    se_uv = np.sqrt(np.maximum(s_uv2 / replicas - mean_uv**2, 0.0) / replicas)
    z = (mean_uv - M) / se_uv
    assert np.max(np.abs(z)) < 4.5

    # First moments are driftless: E[u_t] = E^n u_0 (here u_0 is flat, so
    # the heat step fixes it exactly).
    mean_u = s_u / replicas
    assert np.max(np.abs(mean_u - 1.0)) < 0.02


def test_single_field_mean_follows_heat_flow():
    b, dt, T = 1.0, 0.02, 1.0
    params = SbmParams(b=b, dt=dt, T=T)
    w0 = Field.point_masses(RING, {2: 3.0}, nonneg=True)
    replicas = 40_000
    s_w = np.zeros(RING.site_count)
    s_w2 = np.zeros(RING.site_count)

    def collect(rec, step, fields, rep_slice):
        s_w.__iadd__(fields[0].sum(axis=0))
        s_w2.__iadd__((fields[0] ** 2).sum(axis=0))

    pam_ensemble(w0, params, seed=271, replicas=replicas,
                 record_times=[T], collect=collect)
    mean_w = s_w / replicas
    se = np.sqrt(np.maximum(s_w2 / replicas - mean_w**2, 0.0) / replicas)
    target = euler_heat(w0.values, RING, dt, 50)
    assert np.max(np.abs(mean_w - target) / se) < 4.5


def test_single_site_second_moment_exact_growth():
    # One site, splitting scheme: E[w_T^2] = w0^2 * exp(b T) exactly.
    geom = make_geometry(1, 1)
    b, T, dt = 1.0, 1.0, 0.05
    params = SbmParams(b=b, dt=dt, T=T)
    w0 = Field(geom, [1.0], nonneg=True)
    replicas = 60_000
    acc = np.zeros(3)  # sum w^2, sum w^4, count

    def collect(rec, step, fields, rep_slice):
        w = fields[0][:, 0]
        acc.__iadd__([np.sum(w**2), np.sum(w**4), w.size])

    pam_ensemble(w0, params, seed=99, replicas=replicas, record_times=[T], collect=collect)
    m2 = acc[0] / acc[2]
    se = np.sqrt(max(acc[1] / acc[2] - m2**2, 0.0) / acc[2])
    assert abs(m2 - np.exp(b * T)) < 4.0 * se


# ---------------------------------------------------------------------------
# Validation and failure modes
# ---------------------------------------------------------------------------


def test_params_validation():
    with pytest.raises(ConfigurationError):
        SbmParams(b=-1.0)
    with pytest.raises(ConfigurationError):
        SbmParams(b=1.0, rho=1.5)
    with pytest.raises(ConfigurationError):
        SbmParams(b=1.0, dt=0.0)
    with pytest.raises(ConfigurationError):
        SbmParams(b=1.0, dt=1.5)
    with pytest.raises(ConfigurationError):
        SbmParams(b=1.0, scheme="implicit")
    with pytest.raises(ConfigurationError):
        SbmParams(b=1.0, bound=0.0)


def test_pair_rejects_splitting_scheme():
    params = SbmParams(b=1.0, scheme="split-step")
    u0, v0 = bump(RING, 20), bump(RING, 21)
    with pytest.raises(ConfigurationError, match="multiplicative"):
        simulate_sbm(u0, v0, params, seed=1, record_times=[0.1])
    with pytest.raises(ConfigurationError):
        step_sbm(SbmState(0.0, u0, v0), params, replica_stream(1))


def test_record_time_validation():
    params = SbmParams(b=1.0, dt=0.1, T=1.0)
    u0, v0 = bump(RING, 22), bump(RING, 23)
    with pytest.raises(ConfigurationError, match="horizon"):
        simulate_sbm(u0, v0, params, seed=1, record_times=[2.0])
    with pytest.raises(ConfigurationError, match="strictly increasing"):
        simulate_sbm(u0, v0, params, seed=1, record_times=[0.5, 0.5])
    with pytest.raises(ConfigurationError):
        simulate_sbm(u0, v0, params, seed=1, record_times=[-0.1])


def test_record_times_snap_to_step_grid():
    params = SbmParams(b=0.0, dt=0.1, T=1.0)
    u0, v0 = bump(RING, 24), bump(RING, 25)
    traj = simulate_sbm(u0, v0, params, seed=1, record_times=[0.0, 0.3000000004, 1.0])
    assert_allclose(traj.times, [0.0, 0.3, 1.0], rtol=0, atol=1e-12)
    assert_array_equal(traj.u_path[0], u0.values)


def test_blowup_raises_structured_error():
    # The noise intensity b*u*v overflows on the first step, so some site
    # receives an infinite increment (any positive draw among 128).
    geom = make_geometry(2, 8)
    params = SbmParams(b=1e8, rho=0.0, dt=0.5, T=2.0)
    big = Field.constant(geom, 1e200, nonneg=True)
    with pytest.raises(NumericalBlowupError) as exc:
        simulate_sbm(big, big, params, seed=2, record_times=[2.0])
    assert exc.value.step == 1
    assert exc.value.replica == 0


def test_initial_fields_must_be_nonnegative():
    params = SbmParams(b=1.0)
    plain = Field(RING, np.linspace(-1, 1, RING.site_count))  # not declared nonneg
    with pytest.raises(ConfigurationError, match="nonnegative"):
        simulate_sbm(plain, plain, params, seed=1, record_times=[0.1])
