"""Dense numeric kernels and deterministic randomness.

Matrices are plain 2-D numpy arrays (row-major), vectors are 1-D arrays.
Storage convention across the engine: weights live in float32, every
computation and reduction runs in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = z.copy()
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based splitmix64 stream.

    The i-th draw (1-based) is ``mix64(seed + i * 0x9E3779B97F4A7C15)`` with
    the standard splitmix64 finalizer, identical on every platform.  Because
    the stream is a pure function of (seed, counter), a vector draw of n
    values equals n scalar draws.  Instances are single-owner: do not share
    one Rng between threads.
    """

    def __init__(self, seed: int):
        self._seed = seed & _MASK64
        self._count = 0

    @property
    def seed(self) -> int:
        return self._seed

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit draws as a uint64 array."""
        if n < 0:
            raise DomainError("draw count must be non-negative")
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            state = np.uint64(self._seed) + idx * np.uint64(_SPLITMIX_GAMMA)
        return _mix64(state)

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53-bit resolution."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int, scale: float = 1.0) -> np.ndarray:
        """n Box-Muller normal draws with standard deviation ``scale``."""
        m = (n + 1) // 2
        # open interval (0, 1] for the radius draw so log() stays finite
        u1 = ((self.u64(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return out[:n] * scale

    def below(self, bound: int) -> int:
        """One integer in [0, bound). Modulo reduction; the bias is ~bound/2^64."""
        if bound <= 0:
            raise DomainError("bound must be positive")
        return self.next_u64() % bound

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, pool_size: int, k: int) -> list[int]:
        """k distinct indices drawn without replacement from range(pool_size)."""
        if k > pool_size:
            raise DomainError(f"cannot draw {k} items from a pool of {pool_size}")
        idx = list(range(pool_size))
        for i in range(k):
            j = i + self.below(pool_size - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation.

    Raises ShapeError unless a is (m, k) and b is (k, n).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return check_finite(out, "matmul result")


def stable_softmax(row: np.ndarray) -> np.ndarray:
    """Softmax with max-subtraction; input must be finite and nonempty."""
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise DomainError("softmax of an empty row is undefined")
    check_finite(row, "softmax input")
    e = np.exp(row - np.max(row))
    return e / e.sum()


def masked_softmax(row: np.ndarray) -> tuple[np.ndarray, bool]:
    """Softmax that tolerates -inf entries (masked positions).

    A fully masked row returns a uniform distribution together with a
    degenerate flag instead of NaN; callers decide whether that is an error.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise DomainError("softmax of an empty row is undefined")
    hi = np.max(row)
    if hi == -np.inf:
        return np.full(row.shape, 1.0 / row.size), True
    e = np.exp(row - hi)
    return e / e.sum(), False


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise DomainError("layer_norm eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if gain.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise ShapeError(
            f"gain/shift of shape {gain.shape}/{shift.shape} do not match row length {x.shape[-1]}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + shift


def gelu(x):
    """tanh-approximation GELU."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))
