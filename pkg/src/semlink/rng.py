"""Counter-based random number streams.

Every source of randomness in the package is an `Rng` built from a
(master_seed, stream_id) pair.  The pair is used directly as the 128-bit
key of a Philox4x64 counter-based generator, so streams are independent
by construction and a worker can be handed a stream id instead of a
shared generator: same (seed, stream_id) always reproduces the same
sequence, on any platform, regardless of what other streams consumed.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalFailure

__all__ = ["Rng", "seeded_rng", "gaussian_sample"]

_MASK64 = (1 << 64) - 1


class Rng:
    """A seeded, splittable random stream.

    Attributes:
        seed: master seed (64-bit).
        stream_id: substream index (64-bit).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"

    def split(self, stream_id: int) -> "Rng":
        """Derive an independent stream keyed on this Rng's seed."""
        return Rng(self.seed, stream_id)

    def normal(self, shape) -> np.ndarray:
        """I.i.d. standard-normal values of the given shape."""
        return self._gen.standard_normal(size=tuple(shape), dtype=np.float64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def seeded_rng(master_seed: int, stream_id: int) -> Rng:
    """Create the stream `stream_id` of the family keyed by `master_seed`."""
    return Rng(master_seed, stream_id)


def gaussian_sample(rng: Rng, shape) -> np.ndarray:
    """Draw a tensor of i.i.d. N(0, 1) entries, advancing `rng`.

    Args:
        rng: stream to consume.
        shape: non-empty list of dimensions, all >= 1.

    Raises:
        ValueError: empty shape or non-positive dimension.
        NumericalFailure: generator produced non-finite values.
    """
    dims = [int(d) for d in shape]
    if len(dims) == 0:
        raise ValueError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dimensions must be >= 1, got {dims}")
    out = rng.normal(dims)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("gaussian_sample produced non-finite values")
    return out
