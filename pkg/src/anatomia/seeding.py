"""Deterministic RNG derivation and the single-threaded bitwise mode.

Every random decision in the package draws from a stream derived from
(root seed, purpose key, optional indices). Streams never alias, so adding
or removing one consumer (e.g. a strategy that draws latent noise) leaves
all other streams untouched.
"""
from __future__ import annotations

import os
import zlib

import numpy as np
import torch

DETERMINISTIC_ENV = "ANATOMIA_DETERMINISTIC"


def _key_ints(keys: tuple[str | int, ...]) -> tuple[int, ...]:
    out = []
    for k in keys:
        if isinstance(k, int):
            out.append(k & 0xFFFFFFFF)
        else:
            # crc32 is stable across platforms and Python versions.
            out.append(zlib.crc32(k.encode("utf-8")))
    return tuple(out)


def spawn_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Numpy generator for stream (seed, *keys); same inputs, same stream."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=_key_ints(keys))
    return np.random.default_rng(seq)


def spawn_torch_rng(seed: int, *keys: str | int) -> torch.Generator:
    """Torch CPU generator derived from the same keyed stream space."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=_key_ints(keys))
    gen = torch.Generator()
    gen.manual_seed(int(seq.generate_state(1, dtype=np.uint64)[0]))
    return gen


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


def enable_deterministic() -> None:
    """Force single-threaded torch execution for bitwise reproducibility."""
    torch.set_num_threads(1)
    try:
        if torch.get_num_interop_threads() != 1:
            torch.set_num_interop_threads(1)
    except RuntimeError:
        # Interop pool already started; intra-op threads=1 is what matters
        # for bitwise-stable reductions.
        pass


def apply_determinism_from_env() -> bool:
    """Honor ANATOMIA_DETERMINISTIC=1; returns whether the mode is active."""
    if deterministic_requested():
        enable_deterministic()
        return True
    return False
