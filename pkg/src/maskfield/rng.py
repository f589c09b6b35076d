"""Counter-based random numbers for per-ray sample jitter.

Stateless: the value at a counter is a pure function of the key words, so any
worker can evaluate any subset of rays and always get the same streams.  Uses
the splitmix64 finalizer, which is plenty for stratified jitter.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = np.float64(1.0 / (1 << 53))


def hash_u64(*words) -> np.ndarray:
    """splitmix64 over the running combination of the given counter words.

    Each word may be a scalar or an array; arrays broadcast together.
    """
    with np.errstate(over="ignore"):
        h = np.uint64(0x243F6A8885A308D3)
        for w in words:
            w = np.asarray(w, dtype=np.uint64)
            h = h ^ (w + _GOLDEN + (h << np.uint64(6)) + (h >> np.uint64(2)))
            z = h + _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            h = z ^ (z >> np.uint64(31))
    return h


def uniform01(*words) -> np.ndarray:
    """Uniform float64 in [0, 1) at the given counter, vectorized."""
    return (hash_u64(*words) >> np.uint64(11)).astype(np.float64) * _U53
