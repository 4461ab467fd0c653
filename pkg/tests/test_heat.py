"""Heat-flow and compensator tests.

The compensator identities are checked against exact structure (mass
identities, nonnegativity, superposition of the linear flow) plus frozen
values derived from the series solver itself at tolerances far below the
assertion thresholds.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symbranch import heat
from symbranch.errors import ConfigurationError, QuadratureError
from symbranch.lattice import Field, heat_semigroup_apply, make_geometry


@pytest.fixture(scope="module")
def line_geom():
    return make_geometry(1, 64)


def dipole(geom):
    return Field.point_masses(geom, {0: 2.0, 1: -1.0})


# --- solve_heat -------------------------------------------------------------


def test_solve_heat_matches_semigroup(line_geom):
    f = dipole(line_geom)
    sol = heat.solve_heat(f, [0.5, 1.0, 3.0])
    for k, t in enumerate(sol.time_grid):
        ref = heat_semigroup_apply(f, t, tol=1e-13)
        np.testing.assert_allclose(sol.snapshots[k], ref.values, atol=1e-11)


def test_solve_heat_conserves_mass(line_geom):
    sol = heat.solve_heat(dipole(line_geom), [1.0, 10.0, 50.0])
    np.testing.assert_allclose(sol.total_mass(), 1.0, atol=1e-11)


def test_solve_heat_euler_agrees_with_series(line_geom):
    f = dipole(line_geom)
    series = heat.solve_heat(f, [2.0], method="series")
    euler = heat.solve_heat(f, [2.0], method="euler", dt=1.0 / 256)
    assert np.max(np.abs(series.snapshots - euler.snapshots)) < 5e-3


def test_solve_heat_is_linear(line_geom):
    rng = np.random.default_rng(3)
    a = rng.normal(size=line_geom.site_count)
    b = rng.normal(size=line_geom.site_count)
    grid = [0.7, 2.3]
    sum_sol = heat.solve_heat(Field(line_geom, a + 2.0 * b), grid).snapshots
    parts = (
        heat.solve_heat(Field(line_geom, a), grid).snapshots
        + 2.0 * heat.solve_heat(Field(line_geom, b), grid).snapshots
    )
    np.testing.assert_allclose(sum_sol, parts, atol=1e-10)


def test_solve_heat_grid_validation(line_geom):
    f = dipole(line_geom)
    with pytest.raises(ConfigurationError):
        heat.solve_heat(f, [])
    with pytest.raises(ConfigurationError):
        heat.solve_heat(f, [1.0, 1.0])
    with pytest.raises(ConfigurationError):
        heat.solve_heat(f, [-1.0, 1.0])
    with pytest.raises(ConfigurationError):
        heat.solve_heat(f, [1.0], method="euler", dt=1.5)


# --- sign_decompose ---------------------------------------------------------


def test_sign_decompose_parts(line_geom):
    f = dipole(line_geom)
    pos, neg = heat.sign_decompose(f)
    np.testing.assert_array_equal(pos.values - neg.values, f.values)
    assert np.all(pos.values >= 0) and np.all(neg.values >= 0)
    assert np.all(pos.values * neg.values == 0.0)  # disjoint supports
    assert pos.total() == 2.0 and neg.total() == 1.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_sign_decompose_random(seed):
    geom = make_geometry(1, 16)
    vals = np.random.default_rng(seed).normal(size=16)
    pos, neg = heat.sign_decompose(Field(geom, vals))
    np.testing.assert_array_equal(pos.values, np.maximum(vals, 0.0))
    np.testing.assert_array_equal(neg.values, np.maximum(-vals, 0.0))


# --- compensator ------------------------------------------------------------


def test_q_zero_for_nonnegative_initial(line_geom):
    f = Field.point_masses(line_geom, {0: 1.0, 5: 2.0}, nonneg=True)
    q = heat.q_compensator(f, [0.0, 1.0, 5.0])
    assert np.max(np.abs(q.q_values)) < 1e-9
    assert np.max(np.abs(q.total_path)) < 1e-12


def test_q_starts_at_zero_and_is_monotone(line_geom):
    q = heat.q_compensator(dipole(line_geom), np.linspace(0.0, 30.0, 40))
    assert np.all(q.q_values[0] == 0.0)
    assert q.q_values.min() > -1e-9
    assert q.min_increment > -1e-9


def test_q_total_matches_per_site_sum(line_geom):
    q = heat.q_compensator(dipole(line_geom), np.linspace(0.0, 20.0, 25))
    np.testing.assert_allclose(q.q_values.sum(axis=1), q.total_path, atol=1e-7)


def test_q_total_converges_to_negative_mass(line_geom):
    # net mass 1 >= 0, so the compensator's total mass sweeps up exactly
    # the initial negative mass
    f = dipole(line_geom)
    q = heat.q_compensator(f, [0.0, 1.0, 5.0, 60.0])
    assert q.limit_total() == 1.0
    assert abs(q.total_path[-1] - 1.0) < 1e-3
    assert np.all(np.diff(q.total_path) > -1e-12)


def test_q_semimartingale_identity(line_geom):
    # zeta_minus(t) = f_minus + int Laplacian(zeta_minus) - q(t), which
    # is equivalent to the residual certificate tracked internally
    q = heat.q_compensator(dipole(line_geom), np.linspace(0.0, 10.0, 12))
    assert q.residual < 1e-9


def test_q_grid_must_start_at_zero(line_geom):
    with pytest.raises(ConfigurationError):
        heat.q_compensator(dipole(line_geom), [1.0, 2.0])
    with pytest.raises(ConfigurationError):
        heat.q_compensator(dipole(line_geom), [0.0, 1.0], quad_tol=0.0)


def test_q_quadrature_error_on_impossible_budget(line_geom):
    # starving the recursion (depth 0) with a tiny budget must trip the
    # residual certificate rather than silently returning garbage
    with pytest.raises(QuadratureError) as err:
        heat.q_compensator(
            dipole(line_geom), np.linspace(0.0, 8.0, 3), quad_tol=1e-16, max_depth=0
        )
    assert err.value.residual is not None


def test_negative_mass_path_decays(line_geom):
    path = heat.negative_mass_path(dipole(line_geom), [0.5, 2.0, 10.0, 40.0])
    assert np.all(np.diff(path) < 0.0) or path[-1] < 1e-12
    assert path[-1] < 1e-6


# --- l1 distance to the point source ---------------------------------------


def test_l1_distance_zero_for_point_source_itself():
    geom = make_geometry(1, 32)
    f = Field.point_masses(geom, {0: 1.5})
    assert heat.l1_distance_to_point_source(f, 3.0) < 1e-12


def test_l1_distance_at_time_zero_is_twice_displaced_mass():
    geom = make_geometry(1, 32)
    f = Field.point_masses(geom, {1: 1.0})
    assert heat.l1_distance_to_point_source(f, 0.0) == pytest.approx(2.0)


def test_l1_distance_decreasing_for_shifted_mass():
    geom = make_geometry(1, 128)
    f = Field.point_masses(geom, {1: 1.0})
    d = [heat.l1_distance_to_point_source(f, t) for t in (1.0, 10.0, 100.0)]
    assert d[0] > d[1] > d[2]
    # frozen series values (same solver at much tighter tolerance)
    np.testing.assert_allclose(d, [0.931519, 0.255667, 0.079889], atol=2e-5)


def test_l1_distance_respects_net_mass_only():
    # two fields with equal net mass flow to the same profile
    geom = make_geometry(1, 64)
    f = Field.point_masses(geom, {2: 2.0, -3: -1.0})
    g = Field.point_masses(geom, {0: 1.0})
    t = 150.0
    da = heat.l1_distance_to_point_source(f, t)
    db = heat.l1_distance_to_point_source(g, t)
    assert da < 0.5 and db == pytest.approx(0.0, abs=1e-12)
