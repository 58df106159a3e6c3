"""Named deterministic random streams derived from one master seed.

Every source of randomness in an experiment asks for a stream by name
("env/ue3", "agent/noise", ...).  Streams are independent PCG64 generators
whose seeding depends only on (master seed, name), never on creation order,
so adding a consumer cannot perturb anyone else's draws.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Independent generator for `name` under `master_seed`."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=_name_key(name))
    return np.random.Generator(np.random.PCG64(seq))


class StreamFactory:
    """Callable bound to one master seed: `streams("env/ue3")`."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def __call__(self, name: str) -> np.random.Generator:
        return stream(self.master_seed, name)
