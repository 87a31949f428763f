"""Confidence intervals and the permutation test used by the probe and judge reports."""

from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np

from .errors import InputError

Z95 = 1.959963984540054


def normal_ci(values: Sequence[float], ddof: int = 1, z: float = Z95,
              bounds: Tuple[float, float] = (-math.inf, math.inf)) -> Tuple[float, float, float]:
    """``(mean, low, high)`` with ``mean ± z * sd / sqrt(n)``, clipped to ``bounds``.

    ``ddof=0`` on 0/1 outcomes gives the Wald interval for a proportion.
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise InputError("cannot compute an interval from zero values")
    mean = float(x.mean())
    if x.size - ddof <= 0:
        half = 0.0
    else:
        half = z * float(x.std(ddof=ddof)) / math.sqrt(x.size)
    lo, hi = bounds
    return mean, max(lo, mean - half), min(hi, mean + half)


def permutation_test(matched: Sequence[float], mismatched: Sequence[float],
                     iterations: int = 10_000, seed: int = 0,
                     chunk: int = 2_000) -> float:
    """One-sided two-sample permutation test on the difference of means.

    Tests ``mean(matched) > mean(mismatched)``; returns
    ``(1 + #{permuted diff >= observed}) / (1 + iterations)``.
    """
    a = np.asarray(matched, dtype=float)
    b = np.asarray(mismatched, dtype=float)
    if a.size == 0 or b.size == 0:
        raise InputError("both samples must be non-empty")
    if iterations < 100:
        raise InputError("iterations must be at least 100")
    pooled = np.concatenate([a, b])
    n_a, total = a.size, pooled.size
    observed = a.mean() - b.mean()
    # absorbs summation-order rounding so exact ties count as ties
    tol = 1e-12 * max(1.0, float(np.abs(pooled).max()))
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        perm = rng.permuted(np.broadcast_to(pooled, (m, total)), axis=1)
        diff = perm[:, :n_a].mean(axis=1) - perm[:, n_a:].mean(axis=1)
        hits += int(np.count_nonzero(diff >= observed - tol))
        done += m
    return (1 + hits) / (1 + iterations)
