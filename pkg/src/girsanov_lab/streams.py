"""Counter-based random streams.

Every path owns an independent stream, so results never depend on how paths
are grouped into chunks or spread across workers.

Stream derivation (Philox4x64-10, numpy implementation):

* key     = (master_seed mod 2**64, 0)
* counter = (0, 0, stream_id mod 2**64, substream mod 2**64)

Numpy advances the low counter word while drawing, so distinct
``(stream_id, substream)`` pairs address disjoint blocks of the Philox
sequence as long as a single stream consumes fewer than 2**64 blocks.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# substream tags used by the experiment runners
REFERENCE = 0
DIRECT = 1
DIRECT_REPLICA = 2
AUXILIARY = 3


def stream_generator(master_seed: int, stream_id: int, substream: int = 0) -> np.random.Generator:
    """Return the generator for one ``(master_seed, stream_id, substream)`` triple."""
    bitgen = np.random.Philox(
        key=[int(master_seed) & _MASK64, 0],
        counter=[0, 0, int(stream_id) & _MASK64, int(substream) & _MASK64],
    )
    return np.random.Generator(bitgen)


def standard_normals(master_seed, stream_ids, shape, substream=0):
    """Stack standard normal blocks of ``shape``, one per stream id.

    Returns an array of shape ``(len(stream_ids), *shape)``.
    """
    stream_ids = list(stream_ids)
    out = np.empty((len(stream_ids),) + tuple(shape))
    for row, sid in enumerate(stream_ids):
        out[row] = stream_generator(master_seed, sid, substream).standard_normal(shape)
    return out
