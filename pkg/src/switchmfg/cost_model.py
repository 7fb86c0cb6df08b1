"""Quadratic effort-cost family with a hard cap, and its convex conjugate.

The agent pays c(a) = kappa * a^2 / 2 per unit time for switching intensity
a in [0, a_max]; intensities above the cap are infeasible (cost +inf).  The
conjugate c*(y) = sup_a {a*y - c(a)} and its maximizer a*(y) have closed
forms used throughout the solvers; `verify_conjugacy` provides the
brute-force grid check used by the CLI self-test.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CostSpec:
    """Parameters of the capped quadratic cost: c(a) = kappa a^2/2 on [0, a_max]."""

    kappa: float = 1.0
    a_max: float = 2.0

    def __post_init__(self) -> None:
        if not (self.kappa > 0.0):
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not (self.a_max > 0.0):
            raise ValueError(f"a_max must be positive, got {self.a_max}")

    @property
    def y_kink(self) -> float:
        """Slope beyond which the cap binds: a*(y) = a_max for y >= kappa*a_max."""
        return self.kappa * self.a_max


def cost(spec: CostSpec, a):
    """c(a): kappa a^2/2 on [0, a_max], +inf outside (infeasible intensity)."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * spec.kappa * a * a
    out = np.where((a < 0.0) | (a > spec.a_max), np.inf, out)
    return out if out.ndim else float(out)


def conjugate(spec: CostSpec, y):
    """c*(y) = sup_{a in [0, a_max]} (a y - c(a)), elementwise.

    Piecewise: 0 for y <= 0, y^2/(2 kappa) up to the kink y = kappa*a_max,
    affine with slope a_max beyond it.
    """
    y = np.asarray(y, dtype=float)
    yk = spec.y_kink
    mid = 0.5 * y * y / spec.kappa
    top = spec.a_max * y - 0.5 * spec.kappa * spec.a_max**2
    out = np.where(y <= 0.0, 0.0, np.where(y <= yk, mid, top))
    return out if out.ndim else float(out)


def argmax_intensity(spec: CostSpec, y):
    """a*(y) = argmax_a (a y - c(a)) = clip(y/kappa, 0, a_max), elementwise."""
    y = np.asarray(y, dtype=float)
    out = np.clip(y / spec.kappa, 0.0, spec.a_max)
    return out if out.ndim else float(out)


def verify_conjugacy(spec: CostSpec, y_grid, a_step: float = 1e-3) -> dict:
    """Self-test of the closed-form conjugate against a brute-force grid sup.

    Returns {"max_gap", "max_lipschitz_ratio"}: max_gap is the worst
    |closed - grid sup| over y_grid with the sup taken on an a-grid of step
    <= a_step (the grid sup lies below c* by at most the grid modulus, so
    the gap is O(a_step * max|y|)); max_lipschitz_ratio is the largest
    |dc*|/|dy| over adjacent y points and cannot exceed a_max for a true
    conjugate of a cost supported on [0, a_max].
    """
    if not (a_step > 0.0):
        raise ValueError(f"a_step must be positive, got {a_step}")
    y = np.atleast_1d(np.asarray(y_grid, dtype=float))
    if y.size < 2:
        raise ValueError("y_grid needs at least two points for the Lipschitz check")
    n_grid = int(np.ceil(spec.a_max / a_step)) + 1
    a = np.linspace(0.0, spec.a_max, n_grid)
    vals = a[None, :] * y[:, None] - 0.5 * spec.kappa * a[None, :] ** 2
    grid_sup = vals.max(axis=1)
    closed = conjugate(spec, y)
    order = np.argsort(y)
    dy = np.diff(y[order])
    if np.any(dy == 0.0):
        raise ValueError("y_grid must not contain repeated points")
    ratios = np.abs(np.diff(closed[order])) / dy
    return {
        "max_gap": float(np.max(np.abs(closed - grid_sup))),
        "max_lipschitz_ratio": float(np.max(ratios)),
    }


class ConjugateTable:
    """Fast sample-mean conjugate/intensity queries against a fixed sample set.

    For samples (y_1..y_m) precomputes sorted order and prefix sums so that
        mean_conjugate(v) = (1/m) sum_j c*(y_j - v)
        mean_intensity(v) = (1/m) sum_j a*(y_j - v)
    evaluate in O(log m) per query point instead of O(m).  Results match the
    direct broadcast computation to float rounding; used on hot paths where
    v has thousands of entries per time step.
    """

    def __init__(self, spec: CostSpec, samples) -> None:
        y = np.sort(np.asarray(samples, dtype=float).ravel())
        self.spec = spec
        self._y = y
        self._m = y.size
        if self._m == 0:
            raise ValueError("ConjugateTable needs at least one sample")
        # prefix[k] = sum of first k entries
        self._s1 = np.concatenate(([0.0], np.cumsum(y)))
        self._s2 = np.concatenate(([0.0], np.cumsum(y * y)))

    def _range_sums(self, lo, hi):
        """(count, sum y, sum y^2) over sorted index range [lo, hi)."""
        cnt = (hi - lo).astype(float)
        s1 = self._s1[hi] - self._s1[lo]
        s2 = self._s2[hi] - self._s2[lo]
        return cnt, s1, s2

    def mean_conjugate(self, v):
        v = np.asarray(v, dtype=float)
        shape = v.shape
        v = v.ravel()
        sp = self.spec
        i1 = np.searchsorted(self._y, v, side="right")
        i2 = np.searchsorted(self._y, v + sp.y_kink, side="right")
        m_cnt, m_s1, m_s2 = self._range_sums(i1, i2)
        u_cnt, u_s1, _ = self._range_sums(i2, np.full_like(i2, self._m))
        mid = (m_s2 - 2.0 * v * m_s1 + v * v * m_cnt) / (2.0 * sp.kappa)
        top = sp.a_max * (u_s1 - v * u_cnt) - 0.5 * sp.kappa * sp.a_max**2 * u_cnt
        out = (mid + top) / self._m
        return out.reshape(shape) if shape else float(out[0])

    def mean_intensity(self, v):
        v = np.asarray(v, dtype=float)
        shape = v.shape
        v = v.ravel()
        sp = self.spec
        i1 = np.searchsorted(self._y, v, side="right")
        i2 = np.searchsorted(self._y, v + sp.y_kink, side="right")
        m_cnt, m_s1, _ = self._range_sums(i1, i2)
        u_cnt = float(self._m) - i2
        out = ((m_s1 - v * m_cnt) / sp.kappa + u_cnt * sp.a_max) / self._m
        return out.reshape(shape) if shape else float(out[0])
