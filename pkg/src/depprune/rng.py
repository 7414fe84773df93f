"""Counter-based random numbers from named 64-bit seeds.

Algorithm (kept simple so other implementations can match bit-for-bit):

* stream key  = mix64(seed XOR fnv1a64(name))
* draw i      = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)   (mod 2**64)
* uniform     = (draw >> 11) * 2**-53                       in [0, 1)
* normal      = Box-Muller on uniforms (2j, 2j+1):
                sqrt(-2 ln(1 - u0)) * cos(2 pi u1)

``mix64`` is the splitmix64 finaliser.  Every call to a sampling method
advances the stream counter by the number of draws consumed, so a sequence of
calls is reproducible given the seed and the call order.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & _MASK
    return h


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Stream:
    """Deterministic stream of draws keyed by ``(seed, name)``."""

    def __init__(self, seed: int, name: str = ""):
        self.seed = int(seed) & _MASK
        self.name = name
        self.key = int(mix64(np.array([self.seed ^ fnv1a64(name)], dtype=np.uint64))[0])
        self.counter = 0

    def child(self, name: str) -> "Stream":
        return Stream(self.seed, f"{self.name}/{name}" if self.name else name)

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * _GAMMA
        return mix64(z)

    def uniform(self, size) -> np.ndarray:
        n = int(np.prod(size, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(size)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(size, dtype=np.int64))
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return (z * std).reshape(size)

    def integers(self, high: int, size) -> np.ndarray:
        """Integers in ``[0, high)`` via floor(u * high)."""
        return np.floor(self.uniform(size) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
