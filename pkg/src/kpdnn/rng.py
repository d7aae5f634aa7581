"""Counter-based SplitMix64 generator.

Every random draw in kpdnn goes through :class:`SeededRng`.  The generator
is the SplitMix64 output function applied to a 64-bit counter::

    z_i = mix64(seed + (counter + i + 1) * 0x9E3779B97F4A7C15)

so a draw of ``n`` values is a single vectorised numpy expression and the
whole state is the pair ``(seed, counter)``.  Results depend only on integer
arithmetic modulo 2**64 and IEEE division by 2**53, hence they are identical
on every platform and numpy version.

Derived distributions
---------------------
uniform   ``(z >> 11) * 2**-53`` in ``[0, 1)``
normal    Box-Muller on two uniforms (the first shifted into ``(0, 1]``)
shuffle   Fisher-Yates, swapping ``i`` with ``floor(u_i * (i + 1))``
"""
import numpy as np

from . import _kernels

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_TWO_M53 = 1.0 / (1 << 53)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Deterministic random source; single owner, never share across threads."""

    def __init__(self, seed=0):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, counter={self.counter})"

    # -- state -----------------------------------------------------------
    def get_state(self):
        return {"seed": self.seed, "counter": self.counter}

    def set_state(self, state):
        self.seed = int(state["seed"]) & _MASK64
        self.counter = int(state["counter"])

    @classmethod
    def from_state(cls, state):
        rng = cls(0)
        rng.set_state(state)
        return rng

    def spawn(self):
        """Return an independent child generator seeded from this stream."""
        return SeededRng(int(self.raw(1)[0]))

    # -- draws -----------------------------------------------------------
    def raw(self, n):
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        n = int(n)
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            return _mix64(z)

    def uniform(self, shape):
        """Uniform floats in ``[0, 1)``."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53
        return u.reshape(shape)

    def normal(self, shape):
        """Standard normal draws via Box-Muller."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = (self.raw(2 * m) >> np.uint64(11)).astype(np.float64)
        u1 = (u[0::2] + 1.0) * _TWO_M53
        u2 = u[1::2] * _TWO_M53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def permutation(self, n):
        """Fisher-Yates permutation of ``range(n)``."""
        n = int(n)
        perm = np.arange(n, dtype=np.int64)
        if n > 1:
            _kernels.fisher_yates(perm, self.uniform(n))
        return perm


def _as_shape(shape):
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
