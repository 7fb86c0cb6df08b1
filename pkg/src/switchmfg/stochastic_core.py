"""Time grids, counter-based Brownian increments, and path-space Wasserstein tools.

Gaussian increments come from inverse-CDF applied to raw Philox counter
output, so the value at (path, step, dim) is a pure function of the seed and
that index triple: path j is bit-identical no matter how many paths are drawn
alongside it, which is what makes every experiment cell reproducible in
isolation.

Distances: `w2_marginal` is the exact 1-d order-statistics W2; `w2_path_exact`
solves the assignment problem for the path-space cost sup_{u>=t} |x_u - y_u|^2
(exact but cubic, capped); `w2_path_coupled` is the index-matched upper bound
used past the cap.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import ndtri

GENERATOR_TAG = "philox4x64-inverse-cdf"

#: refuse to allocate increment blocks above this many float64 entries (~0.5 GiB)
DEFAULT_MEMORY_CAP = 1 << 26

#: largest sample count the exact assignment solver will accept by default
DEFAULT_EXACT_CAP = 256


class SampleCountError(ValueError):
    """Sample counts incompatible with the requested distance."""


class CapExceededError(ValueError):
    """Exact assignment requested above the configured size cap."""


class MemoryCapError(ValueError):
    """Requested path bundle exceeds the increment-memory cap."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with n_steps intervals (n_steps+1 knots)."""

    T: float = 1.0
    n_steps: int = 100

    def __post_init__(self) -> None:
        if not (self.T > 0.0):
            raise ValueError(f"T must be positive, got {self.T}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def times(self) -> np.ndarray:
        """Knot times t_0=0 .. t_{n_steps}=T (endpoint exact)."""
        return np.linspace(0.0, self.T, self.n_steps + 1)


def derive_seed(master: int, *key: int) -> int:
    """Deterministic child seed for a labelled stream, e.g. (n, replication)."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def _philox_uniforms(seed: int, count: int) -> np.ndarray:
    """count uniforms in (0,1) read off raw Philox output at positions 0..count-1."""
    if not (0 <= int(seed) < 2**64):
        raise ValueError("seed must fit in uint64")
    raw = np.random.Philox(key=int(seed)).random_raw(count)
    # top 53 bits -> [0,1), shifted off both endpoints for ndtri
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


class UniformStream:
    """Sequential uniforms in (0,1) from a Philox stream.

    Values depend only on the seed and the running position, so chunked
    consumption reproduces a single big draw bit-for-bit.
    """

    def __init__(self, seed: int) -> None:
        if not (0 <= int(seed) < 2**64):
            raise ValueError("seed must fit in uint64")
        self._bg = np.random.Philox(key=int(seed))

    def take(self, count: int) -> np.ndarray:
        raw = self._bg.random_raw(count)
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments on a grid: increments[path, step, dim] ~ N(0, dt)."""

    grid: TimeGrid
    seed: int
    increments: np.ndarray = field(repr=False)
    generator: str = GENERATOR_TAG

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def dims(self) -> int:
        return self.increments.shape[2]

    def brownian_paths(self, x0: float = 0.0) -> np.ndarray:
        """Cumulative paths W with W_0 = x0, shape (n_paths, n_steps+1, dims)."""
        n, k, d = self.increments.shape
        out = np.empty((n, k + 1, d))
        out[:, 0, :] = x0
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        out[:, 1:, :] += x0
        return out


def generate_brownian(
    seed: int,
    n_paths: int,
    grid: TimeGrid,
    dims: int = 1,
    memory_cap: int = DEFAULT_MEMORY_CAP,
) -> PathBundle:
    """Draw a PathBundle of N(0, dt) increments from the Philox stream `seed`.

    Layout is path-major: the entry at (path, step, dim) consumes raw counter
    position path*(n_steps*dims) + step*dims + dim, so prefixes of the path
    axis are independent of n_paths.
    """
    if n_paths < 1 or dims < 1:
        raise ValueError("n_paths and dims must be >= 1")
    total = n_paths * grid.n_steps * dims
    if total > memory_cap:
        raise MemoryCapError(
            f"bundle of {total} increments exceeds memory cap {memory_cap}"
        )
    z = ndtri(_philox_uniforms(seed, total))
    inc = (z * np.sqrt(grid.dt)).reshape(n_paths, grid.n_steps, dims)
    return PathBundle(grid=grid, seed=int(seed), increments=inc)


@dataclass(frozen=True)
class MeasureFlow:
    """Empirical flow of marginals: samples[i, k] = value of sample path i at knot k."""

    grid: TimeGrid
    samples: np.ndarray = field(repr=False)
    role: str = "flow"

    def __post_init__(self) -> None:
        if self.samples.ndim != 2 or self.samples.shape[1] != self.grid.n_steps + 1:
            raise ValueError(
                f"samples must be (n_samples, {self.grid.n_steps + 1}), "
                f"got {self.samples.shape}"
            )

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def marginal(self, step: int) -> np.ndarray:
        return self.samples[:, step]


def flow_to_csv_bytes(flow: MeasureFlow) -> bytes:
    """Long-format CSV `sample,step,value` of the flow, byte-stable (%.17g)."""
    lines = ["sample,step,value"]
    samples = flow.samples
    for i in range(samples.shape[0]):
        row = samples[i]
        lines.extend(f"{i},{k},{row[k]:.17g}" for k in range(row.size))
    return ("\n".join(lines) + "\n").encode()


def flow_metadata(flow: MeasureFlow, seed: int) -> dict:
    """Companion metadata for a flow export: seed, grid, generator variant."""
    return {
        "role": flow.role,
        "n_samples": flow.n_samples,
        "seed": int(seed),
        "grid": {"T": flow.grid.T, "n_steps": flow.grid.n_steps},
        "generator": GENERATOR_TAG,
    }


def w2_marginal(a, b) -> float:
    """Exact 1-d Wasserstein-2 between equally weighted samples (sorted pairing)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size or a.size == 0:
        raise SampleCountError(f"equal nonzero sample counts required, got {a.size} vs {b.size}")
    d = np.sort(a) - np.sort(b)
    return float(np.sqrt(np.mean(d * d)))


def _pairwise_sup_cost(a: np.ndarray, b: np.ndarray, from_step: int) -> np.ndarray:
    """cost[i, j] = max_{u >= from_step} (a[i, u] - b[j, u])^2."""
    diff = a[:, None, from_step:] - b[None, :, from_step:]
    np.square(diff, out=diff)
    return diff.max(axis=2)


def _check_paths(a, b, from_step):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise SampleCountError(
            f"path arrays must share the knot axis, got {a.shape} vs {b.shape}"
        )
    if not (0 <= from_step < a.shape[1]):
        raise ValueError(f"from_step {from_step} outside grid of {a.shape[1]} knots")
    return a, b


def w2_path_exact(a, b, from_step: int = 0, cap: int = DEFAULT_EXACT_CAP) -> float:
    """Exact path-space W2 with cost sup_{u>=from_step} |x_u - y_u|^2.

    Solves the optimal assignment between the two equally weighted sample
    sets.  Counts may differ only when one divides the other; the smaller
    set's atoms are then replicated, which keeps the problem an exact
    assignment.  Refuses sizes above `cap` (cubic-time guard).
    """
    a, b = _check_paths(a, b, from_step)
    n_a, n_b = a.shape[0], b.shape[0]
    if n_a == 0 or n_b == 0:
        raise SampleCountError("empty sample set")
    n = max(n_a, n_b)
    if n % min(n_a, n_b) != 0:
        raise SampleCountError(
            f"sample counts must be equal or divisible, got {n_a} vs {n_b}"
        )
    if n > cap:
        raise CapExceededError(f"exact assignment of size {n} exceeds cap {cap}")
    cost = _pairwise_sup_cost(a, b, from_step)
    if n_a < n_b:
        cost = np.repeat(cost, n_b // n_a, axis=0)
    elif n_b < n_a:
        cost = np.repeat(cost, n_a // n_b, axis=1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / n))


def w2_path_coupled(a, b, from_step: int = 0) -> float:
    """Index-matched upper bound for the path-space W2 (equal counts required)."""
    a, b = _check_paths(a, b, from_step)
    if a.shape[0] != b.shape[0] or a.shape[0] == 0:
        raise SampleCountError(
            f"coupled bound needs equal nonzero counts, got {a.shape[0]} vs {b.shape[0]}"
        )
    sup = np.max((a[:, from_step:] - b[:, from_step:]) ** 2, axis=1)
    return float(np.sqrt(np.mean(sup)))
