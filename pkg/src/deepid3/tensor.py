"""Dense tensors, a counter-based RNG, He initialization and a gradient oracle.

Tensors are plain ``numpy.ndarray`` objects in float64. Everything that needs
randomness takes an :class:`Rng`, which wraps numpy's Philox generator so that
a ``(seed, stream)`` pair fully determines the sequence of draws.
"""

from __future__ import annotations

import numpy as np

from .errors import GradientError, ShapeError

DTYPE = np.float64


def as_tensor(values, shape=None) -> np.ndarray:
    """Return ``values`` as a C-contiguous float64 array, optionally reshaped."""
    out = np.ascontiguousarray(values, dtype=DTYPE)
    if shape is not None:
        out = out.reshape(shape)
    return out


def check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"shape {shape} has a non-positive extent")
    return shape


class Rng:
    """Deterministic random stream keyed by ``(seed, stream)``.

    Philox is counter based: ``Rng(seed, k)`` for different ``k`` gives
    independent streams, so parallel workers can each take their own stream
    without sharing state.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        # a plain list key goes through float64 and loses low bits of large ints
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream: int) -> "Rng":
        """A child stream derived from this seed. Does not advance ``self``."""
        # mix the parent stream in so grandchildren differ from children
        child = (self.stream * 0x9E3779B97F4A7C15 + int(stream) + 1) & 0xFFFFFFFFFFFFFFFF
        return Rng(self.seed, child)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)


def init_he(shape, fan_in: int, rng: Rng) -> np.ndarray:
    """Gaussian weights with mean 0 and standard deviation ``sqrt(2 / fan_in)``."""
    shape = check_shape(shape)
    if fan_in < 1:
        raise ShapeError(f"fan_in must be >= 1, got {fan_in}")
    return as_tensor(rng.normal(shape, scale=np.sqrt(2.0 / fan_in)))


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` is restored in place after each probe; ``f`` must not keep a
    reference to it.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x).copy()
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            index = tuple(int(j) for j in np.unravel_index(i, x.shape))
            raise GradientError(f"f is not finite when perturbing index {index}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def max_relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """Largest absolute discrepancy divided by the larger gradient's magnitude.

    Scaling by the whole gradient rather than per component keeps components
    that are near zero from dominating through round-off.
    """
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)
