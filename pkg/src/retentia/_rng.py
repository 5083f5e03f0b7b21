"""Counter-based random streams keyed by integer tuples.

Every draw is a pure function of ``(seed, stream, *keys)``, so results do not
depend on evaluation order or on how work is split across workers.
"""
from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri
from scipy.stats import poisson

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def stream_id(name: str) -> int:
    """Stable 63-bit integer for a stream name (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(name.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFFFFFF


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def keyed_bits(seed: int, stream: str, *keys) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = _mix(np.asarray(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN, dtype=np.uint64))
        h = _mix(h ^ np.uint64(stream_id(stream)))
        for key in keys:
            k = np.asarray(key).astype(np.int64).astype(np.uint64)
            h = _mix(h ^ (k * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))
    return h


def keyed_uniform(seed: int, stream: str, *keys) -> np.ndarray:
    """Uniform draws on the open interval (0, 1), broadcast over ``keys``."""
    bits = keyed_bits(seed, stream, *keys)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def keyed_normal(seed: int, stream: str, *keys) -> np.ndarray:
    return ndtri(keyed_uniform(seed, stream, *keys))


def keyed_poisson(seed: int, stream: str, lam, *keys) -> np.ndarray:
    """Poisson draws by inverse CDF; ``lam`` broadcasts against the keys."""
    u = keyed_uniform(seed, stream, *keys)
    return poisson.ppf(u, np.asarray(lam, dtype=float)).astype(np.int64)


def derive_seed(seed: int, *names) -> int:
    """Fan a global seed out to a named stage or component."""
    text = "/".join(str(n) for n in (seed, *names))
    return stream_id(text)
