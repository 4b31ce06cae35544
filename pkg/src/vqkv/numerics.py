"""Dense linear algebra and seeded randomness used across the package.

Everything runs in float64. Matrices are plain ``numpy.ndarray`` objects;
the helpers here only add shape validation, an explicit Cholesky failure
signal and reproducible random streams.

Summation order: ``matmul`` delegates to ``numpy.matmul`` (BLAS). For a fixed
input and machine the result is deterministic, but BLAS may reassociate the
inner sums, so agreement with a naive left-to-right loop is to within 1e-12
relative rather than bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

_ALGORITHMS = {
    "pcg64": np.random.PCG64,
    "philox": np.random.Philox,
    "sfc64": np.random.SFC64,
    "mt19937": np.random.MT19937,
}


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a matrix is not numerically positive definite."""

    def __init__(self, message: str, pivot_index: int, pivot_value: float):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value


@dataclass(frozen=True)
class SeededRng:
    """A reproducible random stream description.

    The object itself holds no state; call :meth:`generator` to obtain a
    fresh ``numpy.random.Generator`` positioned at the start of the stream.
    """

    seed: int
    algorithm: str = "pcg64"

    def __post_init__(self):
        if self.algorithm not in _ALGORITHMS:
            raise ValueError(f"unknown rng algorithm {self.algorithm!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        bitgen = _ALGORITHMS[self.algorithm](np.random.SeedSequence(int(self.seed)))
        return np.random.Generator(bitgen)

    def child(self, *keys: int) -> "SeededRng":
        """Derive an independent stream keyed by ``keys``."""
        ss = np.random.SeedSequence([int(self.seed), *map(int, keys)])
        return SeededRng(int(ss.generate_state(1, np.uint64)[0]), self.algorithm)


def as_matrix(a, name: str = "array") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def _check_symmetric(h: np.ndarray, rtol: float = 1e-9) -> None:
    if h.shape[0] != h.shape[1]:
        raise ValueError(f"matrix must be square, got {h.shape}")
    scale = max(np.abs(h).max(), np.finfo(float).tiny)
    if np.abs(h - h.T).max() > rtol * scale:
        raise ValueError("matrix is not symmetric")


def cholesky(h) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == h``.

    Column-by-column (Cholesky-Crout) factorisation. A pivot that is not
    strictly positive raises :class:`CholeskyError`; no jitter is added here.
    """
    h = as_matrix(h, "h")
    _check_symmetric(h)
    d = h.shape[0]
    lower = np.zeros_like(h)
    for j in range(d):
        row = lower[j, :j]
        pivot = h[j, j] - row @ row
        if not pivot > 0.0:
            raise CholeskyError(
                f"matrix is not positive definite (pivot {j} = {pivot:.3e})", j, float(pivot)
            )
        ljj = np.sqrt(pivot)
        lower[j, j] = ljj
        if j + 1 < d:
            lower[j + 1 :, j] = (h[j + 1 :, j] - lower[j + 1 :, :j] @ row) / ljj
    return lower


def solve_lower_triangular(lower, rhs, side: str = "left") -> np.ndarray:
    """Solve a system with a lower-triangular coefficient matrix.

    ``side="left"`` solves ``lower @ X = rhs``; ``side="right"`` solves
    ``X @ lower = rhs`` (the form needed to map codewords back out of the
    whitened space). ``rhs`` may be a vector or a matrix.
    """
    lower = as_matrix(lower, "lower")
    rhs_arr = np.asarray(rhs, dtype=np.float64)
    d = lower.shape[0]
    if lower.shape != (d, d):
        raise ValueError("triangular factor must be square")
    if np.any(np.diag(lower) == 0.0):
        raise np.linalg.LinAlgError("singular triangular factor (zero diagonal entry)")
    if side == "left":
        if rhs_arr.shape[0] != d:
            raise ValueError(f"rhs has {rhs_arr.shape[0]} rows, factor is {d}x{d}")
        return solve_triangular(lower, rhs_arr, lower=True, check_finite=True)
    if side == "right":
        if rhs_arr.shape[-1] != d:
            raise ValueError(f"rhs has {rhs_arr.shape[-1]} columns, factor is {d}x{d}")
        # X L = B  <=>  L^T X^T = B^T, an upper-triangular system.
        return solve_triangular(lower, rhs_arr.T, trans="T", lower=True).T
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def sample_gaussian(rng, rows: int, cols: int, mean=0.0, cov=1.0) -> np.ndarray:
    """Draw ``rows`` i.i.d. Gaussian vectors of length ``cols``.

    ``rng`` is a :class:`SeededRng` or an existing ``numpy.random.Generator``.
    ``cov`` is either a non-negative scalar (isotropic variance) or a
    ``cols x cols`` SPD matrix. ``mean`` is a scalar or a length-``cols`` vector.
    """
    gen = rng.generator() if isinstance(rng, SeededRng) else rng
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (cols,))
    cov_arr = np.asarray(cov, dtype=np.float64)
    if cov_arr.ndim == 0:
        if cov_arr < 0:
            raise ValueError("scalar variance must be non-negative")
        if cov_arr == 0:
            return np.tile(mean, (rows, 1))
        z = gen.standard_normal((rows, cols))
        return mean + np.sqrt(cov_arr) * z
    if cov_arr.shape != (cols, cols):
        raise ValueError(f"covariance shape {cov_arr.shape} does not match cols={cols}")
    factor = cholesky(cov_arr)
    z = gen.standard_normal((rows, cols))
    return mean + z @ factor.T
