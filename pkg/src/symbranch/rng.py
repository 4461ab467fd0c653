"""Reproducible random streams for ensemble simulation.

Every replica of every stochastic process gets its own counter-based
Philox stream keyed by ``(seed, salt, replica)``, so a replica's noise is
a pure function of those integers: trajectories are bit-reproducible, a
replica simulated alone matches the same replica inside a batch, and
replicas never share draws.  ``salt`` separates independent process
groups inside one experiment (e.g. the forward system and an independent
dual system driven from the same top-level seed).

Within a trajectory the engines consume draws in a fixed order — step by
step, noise component by component, site by site — which is what makes
block-drawn batched noise identical to one-step-at-a-time noise.
"""

from __future__ import annotations

import numpy as np


def replica_stream(seed: int, replica: int = 0, salt: int = 0) -> np.random.Generator:
    """Philox generator for one replica of one process group."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(salt), int(replica)))
    return np.random.Generator(np.random.Philox(ss))
