"""Permutation-based significance tests.

Nothing here assumes a sampling distribution: p-values come from
resampling under the null (label exchange for two independent samples,
sign flips for paired differences, pairing shuffles for correlation).
The add-one estimate p = (1 + hits) / (n + 1) never returns 0.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

N_RESAMPLES = 10_000


def _clean(name: str, xs, min_n: int = 2) -> np.ndarray:
    arr = np.asarray(xs, dtype=np.float64).ravel()
    if arr.size < min_n:
        raise ConfigurationError(
            f"{name} needs at least {min_n} values, got {arr.size}")
    return arr


def permutation_test(a, b, n_resamples: int = N_RESAMPLES,
                     paired: bool = False, seed: int = 0) -> float:
    """Two-sided permutation p-value for mean(a) != mean(b).

    Unpaired: group labels are reshuffled over the pooled sample.
    Paired: the signs of the per-pair differences are flipped.
    """
    a = _clean("sample a", a)
    b = _clean("sample b", b)
    rng = np.random.default_rng(seed)
    if paired:
        if a.size != b.size:
            raise ConfigurationError(
                f"paired test needs equal sizes, got {a.size} and {b.size}")
        diffs = a - b
        observed = abs(diffs.mean())
        signs = rng.choice([-1.0, 1.0], size=(n_resamples, diffs.size))
        stats = np.abs((signs * diffs).mean(axis=1))
    else:
        pooled = np.concatenate([a, b])
        observed = abs(a.mean() - b.mean())
        n_a = a.size
        stats = np.empty(n_resamples)
        for i in range(n_resamples):
            rng.shuffle(pooled)
            stats[i] = abs(pooled[:n_a].mean() - pooled[n_a:].mean())
    hits = int((stats >= observed - 1e-15).sum())
    return (1 + hits) / (n_resamples + 1)


def pearson_r(x, y, n_resamples: int = N_RESAMPLES, seed: int = 0):
    """Pearson correlation with a two-sided permutation p-value.

    The null resamples shuffle the pairing of y against x.
    """
    x = _clean("x", x)
    y = _clean("y", y)
    if x.size != y.size:
        raise ConfigurationError(
            f"pearson_r needs equal lengths, got {x.size} and {y.size}")
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        raise ConfigurationError("pearson_r is undefined for constant input")
    xc = (x - x.mean()) / sx
    yc = (y - y.mean()) / sy
    r = float((xc * yc).mean())
    rng = np.random.default_rng(seed)
    shuffled = yc.copy()
    hits = 0
    for _ in range(n_resamples):
        rng.shuffle(shuffled)
        if abs(float((xc * shuffled).mean())) >= abs(r) - 1e-15:
            hits += 1
    p = (1 + hits) / (n_resamples + 1)
    return r, p


def stderr(xs) -> float:
    """Standard error of the mean; 0 for a single value."""
    arr = np.asarray(xs, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ConfigurationError("stderr of an empty sample")
    if arr.size == 1:
        return 0.0
    return float(arr.std(ddof=1) / np.sqrt(arr.size))
