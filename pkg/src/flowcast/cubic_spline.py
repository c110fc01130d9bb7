"""Natural cubic spline fitting and evaluation.

Each piece is a cubic in a local coordinate on [0, 1]; knot derivatives
come from the natural-boundary tridiagonal system

    [2 1      ]   [D_0]       [3(c_1 - c_0)    ]
    [1 4 1    ]   [D_1]       [3(c_2 - c_0)    ]
    [  ...    ] . [...]   =   [...             ]
    [    1 4 1]   [D_n-1]     [3(c_n - c_n-2)  ]
    [      1 2]   [D_n]       [3(c_n - c_n-1)  ]

solved channel-by-channel with the Thomas algorithm (the matrix does not
depend on the channel, so all channels share one elimination sweep).
Evaluation at arbitrary real coordinates maps the query into the piece's
local coordinate and applies the chain rule for derivatives, so unevenly
spaced knots evaluate consistently as long as the spacing is uniform
enough for the unit-spacing fit to be meaningful (trajectory frames are
uniformly sampled).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, RangeError


def _knot_slopes(values: np.ndarray) -> np.ndarray:
    """Solve the natural-boundary tridiagonal system for knot derivatives.

    ``values`` is (n+1, channels); returns D of the same shape.
    """
    c = values
    n1 = c.shape[0]
    rhs = np.empty_like(c)
    rhs[0] = 3.0 * (c[1] - c[0])
    rhs[-1] = 3.0 * (c[-1] - c[-2])
    if n1 > 2:
        rhs[1:-1] = 3.0 * (c[2:] - c[:-2])

    diag = np.full(n1, 4.0)
    diag[0] = diag[-1] = 2.0

    # Thomas forward sweep (sub- and super-diagonals are all ones).
    cp = np.empty(n1)
    dp = np.empty_like(c)
    cp[0] = 1.0 / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n1):
        m = diag[i] - cp[i - 1]
        cp[i] = 1.0 / m
        dp[i] = (rhs[i] - dp[i - 1]) / m

    d = np.empty_like(c)
    d[-1] = dp[-1]
    for i in range(n1 - 2, -1, -1):
        d[i] = dp[i] - cp[i] * d[i + 1]
    return d


def _piece_coefficients(values: np.ndarray, d: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    c = values
    dc = c[1:] - c[:-1]
    alpha = c[:-1].copy()
    beta = d[:-1].copy()
    gamma = 3.0 * dc - 2.0 * d[:-1] - d[1:]
    delta = -2.0 * dc + d[:-1] + d[1:]
    return alpha, beta, gamma, delta


def _validate_times(times: np.ndarray) -> None:
    if times.size < 2:
        raise ContractError("spline needs at least two knots")
    if not np.all(np.diff(times) > 0):
        raise ContractError("knot times must be strictly increasing")


@dataclass(frozen=True)
class SplinePath:
    """Fitted natural cubic spline over one multichannel sequence.

    Immutable after fitting; safe for concurrent reads.
    """

    knot_times: np.ndarray      # (n+1,)
    alpha: np.ndarray           # (n, v)
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray

    @property
    def channels(self) -> int:
        return self.alpha.shape[1]

    def _locate(self, t: float) -> tuple[int, float, float]:
        kt = self.knot_times
        if t < kt[0] or t > kt[-1]:
            raise RangeError(f"t={t} outside knot range [{kt[0]}, {kt[-1]}]")
        i = int(np.searchsorted(kt, t, side="right") - 1)
        i = min(max(i, 0), len(kt) - 2)
        h = kt[i + 1] - kt[i]
        return i, (t - kt[i]) / h, h

    def eval(self, t: float) -> np.ndarray:
        i, tau, _ = self._locate(t)
        return (self.alpha[i] + self.beta[i] * tau
                + self.gamma[i] * tau * tau + self.delta[i] * tau ** 3)

    def eval_derivative(self, t: float) -> np.ndarray:
        i, tau, h = self._locate(t)
        return (self.beta[i] + 2.0 * self.gamma[i] * tau
                + 3.0 * self.delta[i] * tau * tau) / h

    def eval_second_derivative(self, t: float) -> np.ndarray:
        i, tau, h = self._locate(t)
        return (2.0 * self.gamma[i] + 6.0 * self.delta[i] * tau) / (h * h)


def fit_natural_cubic(values, times) -> SplinePath:
    """Fit a natural cubic spline through ``values`` at ``times``.

    ``values`` is (n+1, channels) (a 1-D sequence is treated as one
    channel); interpolates every knot exactly with zero second derivative
    at both endpoints.
    """
    c = np.asarray(values, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    t = np.asarray(times, dtype=np.float64)
    _validate_times(t)
    if c.shape[0] != t.size:
        raise ContractError(f"{c.shape[0]} values vs {t.size} knot times")
    d = _knot_slopes(c)
    alpha, beta, gamma, delta = _piece_coefficients(c, d)
    return SplinePath(knot_times=t, alpha=alpha, beta=beta, gamma=gamma, delta=delta)


@dataclass(frozen=True)
class StackedSplines:
    """A batch of spline paths over a shared knot grid, for vectorized lookup."""

    knot_times: np.ndarray      # (n+1,)
    alpha: np.ndarray           # (batch, n, v)
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray

    @property
    def batch(self) -> int:
        return self.alpha.shape[0]

    def _locate(self, t: float) -> tuple[int, float, float]:
        kt = self.knot_times
        if t < kt[0] or t > kt[-1]:
            raise RangeError(f"t={t} outside knot range [{kt[0]}, {kt[-1]}]")
        i = int(np.searchsorted(kt, t, side="right") - 1)
        i = min(max(i, 0), len(kt) - 2)
        h = kt[i + 1] - kt[i]
        return i, (t - kt[i]) / h, h

    def values_at(self, t: float) -> np.ndarray:
        i, tau, _ = self._locate(t)
        return (self.alpha[:, i] + self.beta[:, i] * tau
                + self.gamma[:, i] * tau * tau + self.delta[:, i] * tau ** 3)

    def derivatives_at(self, t: float) -> np.ndarray:
        i, tau, h = self._locate(t)
        return (self.beta[:, i] + 2.0 * self.gamma[:, i] * tau
                + 3.0 * self.delta[:, i] * tau * tau) / h


def fit_batch(values, times) -> StackedSplines:
    """Fit many sequences over one knot grid: ``values`` is (batch, n+1, v)."""
    c = np.asarray(values, dtype=np.float64)
    if c.ndim != 3:
        raise ContractError(f"fit_batch needs (batch, knots, channels), got {c.shape}")
    t = np.asarray(times, dtype=np.float64)
    _validate_times(t)
    if c.shape[1] != t.size:
        raise ContractError(f"{c.shape[1]} values vs {t.size} knot times")
    b, n1, v = c.shape
    flat = np.moveaxis(c, 1, 0).reshape(n1, b * v)
    d = _knot_slopes(flat)
    alpha, beta, gamma, delta = _piece_coefficients(flat, d)

    def unflat(arr: np.ndarray) -> np.ndarray:
        return np.moveaxis(arr.reshape(n1 - 1, b, v), 0, 1)

    return StackedSplines(knot_times=t, alpha=unflat(alpha), beta=unflat(beta),
                          gamma=unflat(gamma), delta=unflat(delta))


def dense_knot_slopes(values: np.ndarray) -> np.ndarray:
    """Dense Gaussian-elimination solve of the same system; cross-check path."""
    c = np.asarray(values, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    n1 = c.shape[0]
    mat = np.zeros((n1, n1))
    mat[0, 0], mat[0, 1] = 2.0, 1.0
    mat[-1, -2], mat[-1, -1] = 1.0, 2.0
    for i in range(1, n1 - 1):
        mat[i, i - 1:i + 2] = (1.0, 4.0, 1.0)
    rhs = np.empty_like(c)
    rhs[0] = 3.0 * (c[1] - c[0])
    rhs[-1] = 3.0 * (c[-1] - c[-2])
    if n1 > 2:
        rhs[1:-1] = 3.0 * (c[2:] - c[:-2])
    return np.linalg.solve(mat, rhs)
