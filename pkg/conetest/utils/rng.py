"""
Reproducible random streams

Monte Carlo draws use a counter-based generator: draw i of a run keyed by
seed gets its own Philox stream whose counter starts at (0, i, 0, 0), so the
value of draw i never depends on which worker produced it or in what order.
Simulation and bootstrap replicates get generators derived from
SeedSequence([seed, tag, index]).
"""

import numpy as np

# Tags keep the derived streams of different consumers apart
SIMULATION_TAG = 1
BOOTSTRAP_TAG = 2
COVERAGE_TAG = 3
RESTART_TAG = 4


def _key(seed):
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.array([seed & 0xFFFFFFFFFFFFFFFF, (seed >> 64) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)


def draw_stream(seed, index):
    """Generator for Monte Carlo draw `index` of the run keyed by `seed`"""
    counter = np.array([0, int(index), 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_key(seed), counter=counter))


def derived_stream(seed, *path):
    """Generator for a named sub-stream, e.g. derived_stream(seed, BOOTSTRAP_TAG, b)"""
    entropy = [int(seed)] + [int(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_generator(seed):
    """Accept an int seed, a tuple key, or an existing Generator"""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return derived_stream(seed[0], *seed[1:])
    return derived_stream(0 if seed is None else seed)
