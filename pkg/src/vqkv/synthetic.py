"""Synthetic per-head key/query generators.

Keys are drawn from a Gaussian mixture whose centres are fixed per head
("shared semantics": two samples from the same head model see the same
centres). Queries are zero-mean Gaussians whose covariance has a chosen
condition number and equicorrelation, optionally randomly rotated, which is
what makes the query second moment non-isotropic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng, cholesky


def query_covariance(d: int, condition: float = 1.0, correlation: float = 0.0, rotate: bool = False, rng=None):
    """SPD covariance with log-spaced variances in ``[1, condition]``.

    ``correlation`` blends in an equicorrelation structure before an
    optional random rotation (drawn from ``rng``).
    """
    if condition < 1:
        raise ValueError("condition must be >= 1")
    if not -1.0 / max(d - 1, 1) < correlation < 1.0:
        raise ValueError("correlation out of the positive-definite range")
    sd = np.sqrt(np.logspace(0.0, np.log10(condition), d))
    corr = np.full((d, d), correlation)
    np.fill_diagonal(corr, 1.0)
    cov = sd[:, None] * corr * sd[None, :]
    if rotate:
        gen = rng.generator() if isinstance(rng, SeededRng) else rng
        q, r = np.linalg.qr(gen.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        cov = q @ cov @ q.T
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True, eq=False)
class HeadModel:
    centers: np.ndarray
    key_noise: float
    query_cov: np.ndarray

    @property
    def head_dim(self) -> int:
        return self.centers.shape[1]

    def keys(self, gen: np.random.Generator, n: int, duplicate_fraction: float = 0.0, min_gap: int = 0):
        """``n`` mixture keys; optionally re-plant near-copies of early keys far later on.

        With ``duplicate_fraction > 0`` that share of tokens (chosen among
        positions ``>= min_gap``) is replaced by a slightly perturbed copy of a
        key at least ``min_gap`` positions earlier.
        """
        labels = gen.integers(len(self.centers), size=n)
        keys = self.centers[labels] + self.key_noise * gen.standard_normal((n, self.head_dim))
        m = int(round(duplicate_fraction * n))
        if m and n > min_gap:
            targets = gen.choice(np.arange(min_gap, n), size=min(m, n - min_gap), replace=False)
            for t in np.sort(targets):
                src = gen.integers(0, t - min_gap + 1)
                keys[t] = keys[src] + 0.01 * self.key_noise * gen.standard_normal(self.head_dim)
        return keys

    def queries(self, gen: np.random.Generator, n: int):
        return gen.standard_normal((n, self.head_dim)) @ cholesky(self.query_cov).T

    def values(self, gen: np.random.Generator, n: int):
        return gen.standard_normal((n, self.head_dim))


def make_head_model(
    rng: SeededRng,
    head_dim: int,
    clusters: int = 32,
    center_scale: float = 1.5,
    key_noise: float = 0.7,
    query_condition: float = 100.0,
    query_correlation: float = 0.0,
    query_rotate: bool = True,
) -> HeadModel:
    gen = rng.generator()
    centers = center_scale * gen.standard_normal((clusters, head_dim))
    cov = query_covariance(head_dim, query_condition, query_correlation, query_rotate, gen)
    return HeadModel(centers, key_noise, cov)


def spread_positions(gen: np.random.Generator, n: int, span: int) -> np.ndarray:
    """``n`` sorted distinct positions drawn from ``[0, span)``."""
    if span < n:
        raise ValueError(f"cannot place {n} tokens in {span} positions")
    if span == n:
        return np.arange(n)
    return np.sort(gen.choice(span, size=n, replace=False))
