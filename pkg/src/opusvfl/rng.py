"""Named counter-based random streams for reproducible simulation.

Every random draw in a run comes from a stream addressed by
(master seed, namespace, client, round). Streams are backed by the
Philox counter-based generator keyed with a 128-bit hash of that
address, so the same address always replays the same draws and
distinct addresses give statistically independent streams, regardless
of the order in which they are created or consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def rng_stream(
    master_seed: int,
    namespace: str,
    client: int = -1,
    round_index: int = -1,
) -> np.random.Generator:
    """Return the deterministic stream for (seed, namespace, client, round).

    Args:
        master_seed: the run's master seed.
        namespace: what the stream is for, e.g. "client-init" or "noise".
        client: client id, or -1 when the stream is not client-specific.
        round_index: round index, or -1 when the stream is not per-round.

    Returns:
        A numpy Generator. Calling this twice with equal arguments yields
        generators that produce identical sequences.
    """
    tag = f"{master_seed}|{namespace}|{client}|{round_index}".encode()
    key = int.from_bytes(hashlib.blake2b(tag, digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))
