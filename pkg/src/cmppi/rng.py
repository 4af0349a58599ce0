"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, counter)``, so a rollout's
noise depends only on its own index and never on evaluation order or how the
batch is split across workers. The mixer is the SplitMix64 finalizer applied
to a Weyl sequence, vectorized over numpy ``uint64`` arrays.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *ids: int) -> int:
    """Fold integer ids into a 64-bit seed, e.g. ``derive_seed(episode, step)``."""
    z = np.array([int(seed) & _MASK], dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(z + _GOLDEN)
        for i in ids:
            z = _mix(z ^ _mix(np.array([int(i) & _MASK], dtype=np.uint64) + _GOLDEN))
    return int(z[0])


def stream_keys(seed: int, streams) -> np.ndarray:
    s = np.asarray(streams, dtype=np.int64).astype(np.uint64)
    base = np.uint64(derive_seed(seed))
    with np.errstate(over="ignore"):
        return _mix(base ^ _mix(s * _GOLDEN + _GOLDEN))


def uniforms(seed: int, streams, n: int) -> np.ndarray:
    """``(len(streams), n)`` uniforms in the open interval (0, 1)."""
    keys = stream_keys(seed, streams)
    ctr = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _mix(keys[:, None] + ctr[None, :] * _GOLDEN)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(seed: int, streams, n: int) -> np.ndarray:
    """``(len(streams), n)`` standard normals via Box-Muller."""
    half = (n + 1) // 2
    u = uniforms(seed, streams, 2 * half)
    r = np.sqrt(-2.0 * np.log(u[:, :half]))
    phi = 2.0 * np.pi * u[:, half:]
    z = np.concatenate([r * np.cos(phi), r * np.sin(phi)], axis=1)
    return z[:, :n]
