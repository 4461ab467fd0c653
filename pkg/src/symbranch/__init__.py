"""Lattice simulation and statistical verification of two-type symbiotic
branching, the multiplicative-noise heat equation, and their particle
approximation on periodic boxes.

The public surface re-exports the main entry points of each layer:
geometry and walk analytics (:mod:`.lattice`), the deterministic heat
flow and its compensator (:mod:`.heat`), the stochastic steppers
(:mod:`.sde`), the event-driven particle system (:mod:`.particle`), the
Monte Carlo verification suite (:mod:`.analysis`), and the experiment
runner (:mod:`.cli`).
"""

from .errors import (
    ConfigurationError,
    NumericalBlowupError,
    QuadratureError,
    RecurrentWalkError,
)
from .lattice import (
    Field,
    Geometry,
    b2,
    green_origin,
    heat_semigroup_apply,
    laplacian,
    make_geometry,
    mc_occupation_time,
    return_probabilities,
)
from .heat import (
    HeatSolution,
    QTrajectory,
    l1_distance_to_point_source,
    negative_mass_path,
    q_compensator,
    sign_decompose,
    solve_heat,
)
from .sde import (
    PamTrajectory,
    SbmParams,
    SbmTrajectory,
    pam_ensemble,
    sbm_ensemble,
    simulate_pam,
    simulate_sbm,
)
from .particle import (
    BridgeReport,
    ParticleParams,
    ParticleTrajectory,
    counts_from_density,
    particle_ensemble,
    scaling_bridge,
    simulate_particles,
    total_event_rate,
)
from .analysis import (
    McEstimate,
    coexistence_estimator,
    comparison_test,
    duality_functional_experiment,
    martingale_test,
    min_decomposition_check,
    self_duality_test,
    total_mass_path,
    uniform_integrability_probe,
)
from .rng import replica_stream

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "ConfigurationError",
    "NumericalBlowupError",
    "QuadratureError",
    "RecurrentWalkError",
    "Field",
    "Geometry",
    "b2",
    "green_origin",
    "heat_semigroup_apply",
    "laplacian",
    "make_geometry",
    "mc_occupation_time",
    "return_probabilities",
    "HeatSolution",
    "QTrajectory",
    "l1_distance_to_point_source",
    "negative_mass_path",
    "q_compensator",
    "sign_decompose",
    "solve_heat",
    "PamTrajectory",
    "SbmParams",
    "SbmTrajectory",
    "pam_ensemble",
    "sbm_ensemble",
    "simulate_pam",
    "simulate_sbm",
    "BridgeReport",
    "ParticleParams",
    "ParticleTrajectory",
    "counts_from_density",
    "particle_ensemble",
    "scaling_bridge",
    "simulate_particles",
    "total_event_rate",
    "McEstimate",
    "coexistence_estimator",
    "comparison_test",
    "duality_functional_experiment",
    "martingale_test",
    "min_decomposition_check",
    "self_duality_test",
    "total_mass_path",
    "uniform_integrability_probe",
    "replica_stream",
]
