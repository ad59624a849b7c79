"""Named, collision-free random streams.

Every random decision in a run is drawn from a stream addressed by
(master_seed, round, client_id, purpose). Streams never get shared between
purposes, which makes results independent of client scheduling order.
"""

from __future__ import annotations

import numpy as np

# Fixed purpose codes; never reuse or renumber, they feed the seed derivation.
PURPOSES = {
    "init": 0,
    "sampling": 1,
    "shuffle": 2,
    "gates": 3,
    "partition": 4,
    "split": 5,
    "synth": 6,
    "feddrop": 7,
    "mog_init": 8,
}


def stream(master_seed: int, round_idx: int, client_id: int, purpose: str) -> np.random.Generator:
    """Return a fresh PCG64 generator for one (round, client, purpose) slot."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown rng purpose {purpose!r}")
    seq = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(int(round_idx), int(client_id), PURPOSES[purpose]),
    )
    return np.random.Generator(np.random.PCG64(seq))


def open_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws clipped into the open interval (0, 1).

    rng.random() can return exactly 0.0, which the logistic reparameterization
    cannot accept; the clip maps it to the smallest representable draw.
    """
    u = rng.random(n)
    tiny = 2.0**-53
    return np.clip(u, tiny, 1.0 - tiny)
