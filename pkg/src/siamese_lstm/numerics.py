"""Dense float64 arithmetic and the seeded RNG shared by every module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Shapes are
checked at operation boundaries rather than wrapped in a custom type.
"""

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def sigmoid(x):
    # Split by sign so exp never overflows.
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


class SeededRng:
    """Explicit random source. Never share one instance between threads."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size)

    def normal(self, scale, size):
        return self._gen.normal(0.0, scale, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def spawn(self, key):
        """Derive an independent generator from this seed and an integer key."""
        return SeededRng(np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)[0])


def init_bound(fan_in, fan_out):
    """Half-width of the uniform weight initialization, sqrt(1 / (d + n))."""
    return float(np.sqrt(1.0 / (fan_in + fan_out)))


def uniform_init(rng, rows, cols, bound):
    if not bound > 0:
        raise ValueError(f"bound must be positive, got {bound}")
    return rng.uniform(-bound, bound, (rows, cols)).astype(DTYPE)
