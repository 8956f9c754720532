"""Stable numerical kernels shared across the package.

All reductions accumulate in float64 regardless of input dtype; 32-bit
accumulation visibly loses precision on vocabulary-sized (32k+) vectors.
Every function here is pure and safe to call concurrently.
"""

from __future__ import annotations

import math

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an input is valid in shape but statistically unusable."""


def _as_finite_1d(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} must contain only finite values")
    return arr


def logsumexp(values) -> float:
    """log(sum(exp(values))), computed with max-subtraction."""
    arr = _as_finite_1d(values, "logit vector")
    m = float(arr.max())
    return m + math.log(float(np.exp(arr - m).sum()))


def energy(values) -> float:
    """Energy score of a logit vector: the negated logsumexp.

    Lower energy marks a more in-distribution representation.
    """
    return -logsumexp(values)


def softmax(values) -> np.ndarray:
    """Stable softmax; output sums to 1 within 1e-9 for any finite input."""
    arr = _as_finite_1d(values, "logit vector")
    shifted = np.exp(arr - arr.max())
    return shifted / shifted.sum()


def argmin_tiebreak_high(values) -> int:
    """Index of the minimum; on exact ties, the largest index wins.

    The high-index rule keeps tied layer selections as close as possible
    to the final (directly supervised) layer.
    """
    arr = _as_finite_1d(values, "values")
    # np.argmin keeps the first minimum, so scan the reversed array.
    return int(arr.size - 1 - np.argmin(arr[::-1]))


def argmax_tiebreak_low(values) -> int:
    """Index of the maximum; on ties, the smallest index (np.argmax rule)."""
    arr = _as_finite_1d(values, "values")
    return int(np.argmax(arr))


def gaussian_kde(samples, grid) -> np.ndarray:
    """Gaussian kernel density estimate evaluated at each grid point.

    Bandwidth follows Silverman's rule, 1.06 * std * n^(-1/5). Needs at
    least two samples with nonzero spread.
    """
    xs = _as_finite_1d(samples, "samples")
    gs = _as_finite_1d(grid, "grid")
    if xs.size < 2:
        raise DegenerateInputError("KDE needs at least 2 samples")
    sigma = float(xs.std(ddof=1))
    if sigma == 0.0:
        raise DegenerateInputError("KDE needs samples with nonzero variance")
    bw = 1.06 * sigma * xs.size ** (-0.2)
    z = (gs[:, None] - xs[None, :]) / bw
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (xs.size * bw * math.sqrt(2.0 * math.pi))
    return dens


def histogram(values, bins: int, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Counts of values over `bins` equal-width bins spanning [lo, hi]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not lo < hi:
        raise ValueError("need lo < hi")
    arr = _as_finite_1d(values, "values")
    counts, edges = np.histogram(arr, bins=bins, range=(lo, hi))
    return counts, edges
