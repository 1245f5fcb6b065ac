"""Shared numeric plumbing: validated dense matrices, stable logsumexp,
a central-difference gradient checker, and a portable seeded RNG.

All numeric state in this package is float64. Matrices are plain 2-D
numpy arrays in row-major (C) order.
"""

import math

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


def as_matrix(data) -> np.ndarray:
    """Coerce to a float64 2-D array and verify every entry is finite."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def as_vector(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape validation.

    Accumulation is delegated to numpy's fixed row-major kernel, so
    repeated calls on identical inputs are bit-identical on a platform.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions differ: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ValueError("matmul produced non-finite entries")
    return out


def logsumexp(v) -> float:
    """log(sum(exp(v))) computed as max(v) + log(sum(exp(v - max(v)))).

    Exact for singletons; immune to overflow for large inputs.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("logsumexp requires a non-empty 1-D vector")
    m = v.max()
    if not np.isfinite(m):
        # all -inf collapses to -inf; +inf propagates
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


def logsumexp_last(m: np.ndarray) -> np.ndarray:
    """Row-stable logsumexp over the last axis of an array.

    Slices that are entirely -inf reduce to -inf instead of NaN, which
    lets callers carry zero-mass cells through log-space safely.
    """
    mx = np.max(m, axis=-1)
    safe = np.isfinite(mx)
    if safe.all():
        return mx + np.log(np.exp(m - mx[..., None]).sum(axis=-1))
    shifted = np.where(safe[..., None], m - np.where(safe, mx, 0.0)[..., None], -np.inf)
    s = np.exp(shifted).sum(axis=-1)
    out = np.where(safe, mx + np.log(np.where(s > 0, s, 1.0)), mx)
    return out


def check_gradient(f, grad, x, h: float = 1e-5) -> float:
    """Compare an analytic gradient against central finite differences.

    Parameters
    ----------
    f : callable
        Scalar function of a 1-D parameter vector.
    grad : callable
        Returns the analytic gradient of ``f`` at a point.
    x : array
        Evaluation point.
    h : float
        Central-difference step.

    Returns
    -------
    float
        max_i |g_analytic_i - g_central_i| / max(1, |g_central_i|), where
        g_central_i = (f(x + h e_i) - f(x - h e_i)) / (2 h).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = as_vector(x).copy()
    ga = np.asarray(grad(x), dtype=np.float64).ravel()
    if ga.shape != x.shape:
        raise ShapeError(f"gradient shape {ga.shape} != parameter shape {x.shape}")
    worst = 0.0
    for i in range(x.size):
        xi = x[i]
        x[i] = xi + h
        fp = float(f(x))
        x[i] = xi - h
        fm = float(f(x))
        x[i] = xi
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ArithmeticError(f"non-finite function value near coordinate {i}")
        gc = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(ga[i] - gc) / max(1.0, abs(gc)))
    return worst


_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic 64-bit generator (splitmix64).

    State update per draw::

        state += 0x9E3779B97F4A7C15                 (mod 2^64)
        z = state
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9    (mod 2^64)
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB    (mod 2^64)
        z ^= z >> 31

    The sequence depends only on the seed, not on platform or numpy
    version, so every example value in this repo is reproducible.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64
        self._spare_normal = None

    def next_u64(self) -> int:
        self.state = (self.state + _SM_GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _SM_MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _SM_MIX2) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform double in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def normal(self) -> float:
        """Standard normal via Box-Muller (pairs cached)."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] so log is finite
        u1 = 1.0 - self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi) by rejection-free modular mapping."""
        if hi <= lo:
            raise ValueError("empty integer range")
        span = hi - lo
        return lo + int(self.next_u64() % span)

    def uniform_array(self, shape, lo: float, hi: float) -> np.ndarray:
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(out.size):
            out[i] = self.uniform(lo, hi)
        return out.reshape(shape)

    def normal_array(self, shape) -> np.ndarray:
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(out.size):
            out[i] = self.normal()
        return out.reshape(shape)

    def derive(self, stream: int) -> "Rng":
        """Child generator with a deterministically offset seed."""
        return Rng((self.state ^ (0xD1B54A32D192ED03 * (stream + 1))) & _MASK64)
