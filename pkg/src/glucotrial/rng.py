"""Counter-based random number streams for reproducible parallel runs.

Every stochastic component draws from its own stream, keyed by
``(root seed, patient id, role)``. Streams are built on numpy's Philox
counter-based generator seeded through ``SeedSequence`` spawn keys, so

* a stream's output depends only on its key, never on execution order,
  worker count, or how many other streams exist, and
* adding patients to a trial never perturbs the draws of existing ones.
"""

from __future__ import annotations

import numpy as np

# Stream roles. Values are part of the on-disk reproducibility contract:
# changing them changes every sampled population/trial.
ROLE_DEMOGRAPHICS = 1
ROLE_PARAMETERS = 2
ROLE_PROTOCOL = 3
ROLE_ANNOUNCEMENT = 4
ROLE_PROCESS_NOISE = 5
ROLE_MEASUREMENT_NOISE = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for stream ``key`` under ``seed``.

    ``key`` is typically ``(patient_id, role)``; any tuple of nonnegative
    ints below 2**32 works. Calls with equal arguments always return a
    generator producing the identical sequence.
    """
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    for k in key:
        if not 0 <= k < 2**32:
            raise ValueError(f"stream key component out of range: {k}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    """Derive a 64-bit child seed for a component that wants a seed of its
    own (e.g. per-patient protocol composition). Same keying rules as
    :func:`stream`."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    lo, hi = ss.generate_state(2)
    return int(lo) | (int(hi) << 32)
