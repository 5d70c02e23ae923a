"""
Named random substreams.

All randomness in a run flows from one integer seed. Each consumer asks for a
generator by name plus integer ids (epoch, example index, ...), so the draws of
one consumer never depend on how many draws another consumer made.
"""

import zlib

import numpy as np

# Stream names used across the code base
INIT = "init"
TRAIN = "train"
AUGMENT = "augment"
UNCERTAINTY = "uncertainty"
EVAL = "eval"
SILENCE = "silence"
SYNTHETIC = "synthetic"


def stream_id(name: str) -> int:
    """Stable 32-bit id for a stream name (independent of PYTHONHASHSEED)"""
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *ids: int) -> np.random.Generator:
    """Return the generator for (seed, name, ids...)"""
    key = (stream_id(name),) + tuple(int(i) & 0xFFFFFFFF for i in ids)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def condition_id(*parts) -> int:
    """Fold an evaluation condition (noise kind, snr, shift flag, ...) into an id"""
    text = "|".join(str(p) for p in parts)
    return zlib.crc32(text.encode("utf-8"))
