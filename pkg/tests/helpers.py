"""Shared test oracles: brute-force references kept independent of the library."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product, the oracle for matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def central_diff_grads(f: Callable[[Sequence[np.ndarray]], float],
                       arrays: Sequence[np.ndarray],
                       step: float = 1e-5) -> list[np.ndarray]:
    """Central finite-difference gradient of a scalar function of arrays."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(arrays)
            flat[i] = orig - step
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(1, |a|, |b|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def empirical_cdf_integral_crps(samples: np.ndarray, y: float) -> float:
    """CRPS by exact piecewise integration of (F_hat(t) - 1{t >= y})^2 dt.

    F_hat is the standard empirical step CDF (jumps of 1/n at each sample).
    The integrand is piecewise constant between the breakpoints formed by the
    sorted samples and y, and zero outside their span, so the integral is a
    finite sum of rectangle areas.
    """
    xs = np.sort(np.asarray(samples, dtype=float))
    n = xs.size
    breaks = np.unique(np.concatenate([xs, [y]]))
    total = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        mid = 0.5 * (lo + hi)
        f_hat = np.searchsorted(xs, mid, side="right") / n
        ind = 1.0 if mid >= y else 0.0
        total += (f_hat - ind) ** 2 * (hi - lo)
    # Tails: below min(breaks) both terms are 0; above max both are 1.
    return total


def rotate_points(points: np.ndarray, angle: float, pivot: np.ndarray) -> np.ndarray:
    """Plain 2-D rotation oracle about a pivot."""
    c, s = math.cos(angle), math.sin(angle)
    rel = points - pivot
    return np.stack([pivot[0] + c * rel[..., 0] - s * rel[..., 1],
                     pivot[1] + s * rel[..., 0] + c * rel[..., 1]], axis=-1)
