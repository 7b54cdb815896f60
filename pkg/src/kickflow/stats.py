"""Small shared statistics helpers."""

import numpy as np

__all__ = ["wilson_interval", "logmeanexp", "batch_means_stderr"]


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054):
    """Wilson score interval (lower, upper) for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    n = float(trials)
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2.0 * n)) / denom
    half = z * np.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def logmeanexp(a: np.ndarray, axis=None) -> np.ndarray:
    """log of the mean of exp(a), stable against overflow."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.mean(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def batch_means_stderr(x: np.ndarray, n_batches: int = 8) -> float:
    """Standard error of the mean of a correlated sequence via batch means.

    The sequence is cut into n_batches contiguous blocks; the spread of the
    block means absorbs short-range autocorrelation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("need a 1-d sequence of length >= 2")
    b = min(n_batches, len(x))
    blocks = np.array_split(x, b)
    means = np.array([blk.mean() for blk in blocks])
    if b < 2:
        return float(np.std(x, ddof=1) / np.sqrt(len(x)))
    return float(np.std(means, ddof=1) / np.sqrt(b))
