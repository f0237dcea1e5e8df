"""Counter-based SplitMix64 random streams.

Every random draw in the package goes through :class:`SplitMix64` so that a
single integer seed fixes a run. The generator is the standard SplitMix64
(Steele, Lea & Flood): the i-th output is ``mix(seed + i * GAMMA)``, which makes
bulk generation a vectorised numpy expression.

Derived quantities:

* ``random``: top 53 bits scaled to ``[0, 1)``.
* ``integers``: ``low + floor(random * (high - low))``.
* ``normal``: Box-Muller on pairs of ``random`` draws.
* ``derive(seed, *labels)``: child seed, ``mix`` folded over the labels.
"""
from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Apply the SplitMix64 finaliser to one integer."""
    return int(_mix(np.array([value & _MASK], dtype=np.uint64))[0])


def derive(seed: int, *labels: int | str) -> int:
    """Deterministically derive a child seed from ``seed`` and labels."""
    state = mix64(seed)
    for label in labels:
        if isinstance(label, str):
            code = 0
            for ch in label.encode("utf-8"):
                code = (code * 131 + ch) & _MASK
            label = code
        state = mix64((state ^ mix64(int(label) + 0x632BE59BD9B4E019)) & _MASK)
    return state


class SplitMix64:
    """Stateful SplitMix64 stream."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * GAMMA
        self.state = (self.state + n * int(GAMMA)) & _MASK
        return _mix(z)

    def random(self, size=None) -> np.ndarray | float:
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if size is None:
            return float(u[0])
        return u.reshape(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.random(size)
        out = low + np.floor(u * (high - low)).astype(np.int64)
        if size is None:
            return int(out)
        return out

    def normal(self, loc=0.0, scale=1.0, size=None):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = self.random(m)
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        if size is None:
            return float(z[0])
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        return self.permutation(n)[:k]
