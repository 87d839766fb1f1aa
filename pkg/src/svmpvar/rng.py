"""Keyed random substreams.

Every random draw in the package comes from a generator that is a pure
function of ``(seed, purpose, *indices)``. Results therefore do not depend on
how work is scheduled across workers, and a resumed chain reproduces the
uninterrupted one.
"""

from __future__ import annotations

import zlib

import numpy as np

_PURPOSES: dict[str, int] = {}


def _purpose_id(purpose: str) -> int:
    if purpose not in _PURPOSES:
        _PURPOSES[purpose] = zlib.crc32(purpose.encode()) & 0x7FFFFFFF
    return _PURPOSES[purpose]


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Generator for ``purpose`` at integer coordinates ``indices``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_purpose_id(purpose), *map(int, indices)))
    return np.random.Generator(np.random.PCG64(ss))


def country_streams(seed: int, purpose: str, iteration: int, countries) -> list[np.random.Generator]:
    return [stream(seed, purpose, iteration, int(i)) for i in countries]


def as_generator(rng: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
