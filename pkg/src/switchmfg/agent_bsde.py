"""Agent-side promised-value equations: forward contract builder and backward solvers.

Forward direction: `build_meanfield_contract` rolls the promised value Ybar
forward along driving noise under a parametrized contract (initial-value
distribution lambda, volatility schedule eta, wage schedule w) against a
reference flow p, and the terminal value is the lump payment xi.

Backward direction: `solve_nplayer` recovers the coupled system of promised
values (Y^1..Y^n, Z^1..Z^n) from terminal payments by least-squares Monte
Carlo.  At each step Z is regressed from martingale increments (conditional-
mean-centered for variance reduction; same population projection) and Y from
the one-step driver target; the cross-player coupling through c*(Y^j - Y^i)
is resolved by Picard iteration over whole backward passes.
`solve_meanfield_bsde` is the one-player variant where the coupling term
integrates against a fixed reference flow instead of the other players.

All regressions share a per-step polynomial feature map in the player's own
output coordinate, the cross-sectional mean output, and the contract's
initial draw; coefficients are retained so the solution can be evaluated as
a Markovian surrogate along fresh (e.g. controlled or drifted) paths.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cost_model import ConjugateTable, CostSpec, argmax_intensity, conjugate
from .stochastic_core import MeasureFlow, PathBundle, TimeGrid, derive_seed

#: keep the full (player, path, step, dim) Z tensor only up to this many players
Z_FULL_PLAYER_LIMIT = 16


class RegressionError(RuntimeError):
    """Least-squares stage produced a non-finite or unsolvable system."""

    def __init__(self, step: int, detail: str) -> None:
        super().__init__(f"regression failed at step {step}: {detail}")
        self.step = step


class PicardConvergenceError(RuntimeError):
    """Backward-pass Picard iteration did not reach tolerance."""

    def __init__(self, residuals: list[float], tol: float) -> None:
        super().__init__(
            f"Picard iteration stalled at residual {residuals[-1]:.3e} "
            f"(tol {tol:.1e}) after {len(residuals)} sweeps"
        )
        self.residuals = residuals


@dataclass(frozen=True)
class RegressionConfig:
    """Knobs for the least-squares Monte Carlo backward pass."""

    degree: int = 2
    ridge: float = 1e-10
    tol_picard: float = 1e-6
    max_picard: int = 50

    def __post_init__(self) -> None:
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.max_picard < 1:
            raise ValueError("max_picard must be >= 1")


@dataclass(frozen=True)
class ContractSpec:
    """Parametrized contract: initial-value law, volatility and wage schedules.

    lambda_support/lambda_weights give the discrete law of the promised
    starting value; eta (>= 0) and wage are per-interval schedules of length
    n_steps.  reference_flow is an informational tag naming the flow the
    contract was calibrated against.
    """

    lambda_support: np.ndarray
    lambda_weights: np.ndarray
    eta: np.ndarray
    wage: np.ndarray
    reference_flow: str = "p_star"

    def __post_init__(self) -> None:
        sup = np.atleast_1d(np.asarray(self.lambda_support, dtype=float))
        wts = np.atleast_1d(np.asarray(self.lambda_weights, dtype=float))
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        wage = np.atleast_1d(np.asarray(self.wage, dtype=float))
        object.__setattr__(self, "lambda_support", sup)
        object.__setattr__(self, "lambda_weights", wts)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "wage", wage)
        if sup.shape != wts.shape or sup.ndim != 1 or sup.size == 0:
            raise ValueError("lambda support/weights must be matching 1-d arrays")
        if np.any(wts < -1e-12) or abs(wts.sum() - 1.0) > 1e-9:
            raise ValueError("lambda weights must be a probability vector")
        if eta.shape != wage.shape:
            raise ValueError("eta and wage schedules must have equal length")
        if np.any(eta < 0.0):
            raise ValueError("eta must be nonnegative")
        if not (np.all(np.isfinite(sup)) and np.all(np.isfinite(eta)) and np.all(np.isfinite(wage))):
            raise ValueError("contract parameters must be finite")

    @classmethod
    def constant(
        cls,
        y0: float,
        eta0: float,
        w0: float,
        grid: TimeGrid,
        reference_flow: str = "p_star",
    ) -> "ContractSpec":
        """Degenerate-lambda contract with flat eta and wage schedules."""
        return cls(
            lambda_support=np.array([y0]),
            lambda_weights=np.array([1.0]),
            eta=np.full(grid.n_steps, eta0),
            wage=np.full(grid.n_steps, w0),
            reference_flow=reference_flow,
        )

    def sample_initial(self, n: int, seed: int) -> np.ndarray:
        """n draws from lambda (deterministic in seed)."""
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        return rng.choice(self.lambda_support, size=n, p=self.lambda_weights / self.lambda_weights.sum())


def marginal_tables(cost: CostSpec, flow: MeasureFlow) -> list[ConjugateTable]:
    """Per-knot sample tables for fast mean-c*/mean-a* queries against `flow`."""
    return [ConjugateTable(cost, flow.samples[:, k]) for k in range(flow.grid.n_steps + 1)]


@dataclass(frozen=True)
class ContractDraw:
    """One Monte Carlo batch of a contract: promised-value paths and terminal payments."""

    grid: TimeGrid
    y: np.ndarray = field(repr=False)  # (n_paths, n_steps+1)
    params: ContractSpec | None = None

    @property
    def xi(self) -> np.ndarray:
        return self.y[:, -1]

    @property
    def y0(self) -> np.ndarray:
        return self.y[:, 0]

    def flow(self, role: str = "meanfield") -> MeasureFlow:
        return MeasureFlow(grid=self.grid, samples=self.y, role=role)


def evaluate_contract(
    params: ContractSpec,
    tables: list[ConjugateTable],
    grid: TimeGrid,
    x_increments: np.ndarray,
    y0: np.ndarray,
) -> np.ndarray:
    """Promised-value paths of the contract functional along given output increments.

    Euler recursion Y_{k+1} = Y_k - (mean_p c*(y - Y_k) + w_k + sqrt(eta_k)) dt
    + sqrt(eta_k) dX_k.  The -sqrt(eta) dt and +sqrt(eta) dX terms implement
    the driver-plus-martingale convention: on driftless increments the pair
    contributes sqrt(eta) (dX - dt).
    """
    if params.eta.size != grid.n_steps:
        raise ValueError(
            f"schedule length {params.eta.size} does not match grid n_steps {grid.n_steps}"
        )
    n_paths, n_steps = x_increments.shape
    if n_steps != grid.n_steps:
        raise ValueError("x_increments must have n_steps columns")
    dt = grid.dt
    sq = np.sqrt(params.eta)
    y = np.empty((n_paths, n_steps + 1))
    y[:, 0] = y0
    for k in range(n_steps):
        m = tables[k].mean_conjugate(y[:, k])
        y[:, k + 1] = y[:, k] - (m + params.wage[k] + sq[k]) * dt + sq[k] * x_increments[:, k]
    return y


def build_meanfield_contract(
    params: ContractSpec,
    p_star: MeasureFlow | list[ConjugateTable],
    bundle: PathBundle,
    cost: CostSpec,
    *,
    drift: float = 0.0,
    dim: int = 0,
    y0: np.ndarray | None = None,
    y0_seed: int | None = None,
) -> ContractDraw:
    """Draw contract paths on `bundle`: sample Y_0 ~ lambda, roll Ybar forward.

    `drift` adds drift*dt to the driving increments (0 simulates the output
    as raw noise; 1 simulates it under full effort).  `dim` selects which
    bundle coordinate drives the contract.
    """
    if isinstance(p_star, MeasureFlow):
        if p_star.grid.n_steps != bundle.grid.n_steps:
            raise ValueError("reference flow and bundle grids differ")
        tables = marginal_tables(cost, p_star)
    else:
        tables = p_star
    if y0 is None:
        if y0_seed is None:
            y0_seed = derive_seed(bundle.seed, 0x59, dim)
        y0 = params.sample_initial(bundle.n_paths, y0_seed)
    dx = bundle.increments[:, :, dim] + drift * bundle.grid.dt
    y = evaluate_contract(params, tables, bundle.grid, dx, y0)
    return ContractDraw(grid=bundle.grid, y=y, params=params)


# ---------------------------------------------------------------------------
# feature map and regression engine


@dataclass(frozen=True)
class FeatureMap:
    """Per-player polynomial features: [1, x_i, .., x_i^degree, mean_j x_j, y0_i].

    The cross-sectional mean column is included only with several players;
    the initial-draw column only when the contracts carry sampled starts.
    """

    degree: int
    n_players: int
    with_mean: bool
    with_y0: bool

    @property
    def n_features(self) -> int:
        return 1 + self.degree + int(self.with_mean) + int(self.with_y0)

    def build(self, x: np.ndarray, y0: np.ndarray | None) -> np.ndarray:
        """Design tensor (n_players, n_paths, n_features) from state x (n_paths, dims)."""
        n_paths = x.shape[0]
        ip = (self.n_players, n_paths)
        cols = [np.ones(ip)]
        own = x.T[: self.n_players]  # (players, paths); player i reads coordinate i
        p = own.copy()
        for _ in range(self.degree):
            cols.append(p.copy())
            p *= own
        if self.with_mean:
            cols.append(np.broadcast_to(x.mean(axis=1), ip))
        if self.with_y0:
            if y0 is None:
                raise ValueError("feature map expects y0 but none given")
            cols.append(np.broadcast_to(y0, ip))
        return np.stack(cols, axis=-1)


def _ridge_solve(gram: np.ndarray, rhs: np.ndarray, step: int) -> np.ndarray:
    """Solve (batched) normal equations; raise RegressionError on failure."""
    try:
        beta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - ridge makes this rare
        raise RegressionError(step, f"design matrix rank-deficient ({exc})") from exc
    if not np.all(np.isfinite(beta)):
        raise RegressionError(step, "non-finite regression coefficients")
    return beta


@dataclass
class BsdeSolution:
    """Backward-solve output: value/volatility fields plus the regression surrogate.

    y has shape (n_players, n_paths, n_steps+1) with y[..., -1] the terminal
    payments bit-exactly; z_own is the player's own-coordinate volatility and
    z_sumsq the squared norm over all coordinates (z_full kept only for small
    systems).  y_coeffs/feature_map reproduce y at any Markovian state via
    `y_at`, which is how controlled or drifted trajectories read the field.
    """

    grid: TimeGrid
    y: np.ndarray = field(repr=False)
    z_own: np.ndarray = field(repr=False)
    z_sumsq: np.ndarray = field(repr=False)
    y_coeffs: np.ndarray = field(repr=False)  # (players, n_steps, n_features)
    feature_map: FeatureMap
    picard_residuals: list[float] = field(default_factory=list)
    picard_monotone: bool = True
    z_full: np.ndarray | None = field(default=None, repr=False)
    y0: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_players(self) -> int:
        return self.y.shape[0]

    @property
    def n_paths(self) -> int:
        return self.y.shape[1]

    def y_at(self, step: int, x: np.ndarray, y0: np.ndarray | None = None) -> np.ndarray:
        """Evaluate the regression surrogate for Y at a grid step on fresh states.

        x: (n_paths, dims) Markovian output state; y0: (n_players, n_paths)
        contract starts (required iff the solve used them).  Valid for steps
        0..n_steps-1; the terminal knot is the contract payment itself.
        """
        if not (0 <= step < self.grid.n_steps):
            raise ValueError(f"surrogate defined on steps 0..{self.grid.n_steps - 1}")
        phi = self.feature_map.build(np.asarray(x, dtype=float), y0)
        return np.einsum("ipf,if->ip", phi, self.y_coeffs[:, step, :])


def _coupling_pairwise(cost: CostSpec, y_k: np.ndarray) -> np.ndarray:
    """(1/(n-1)) sum_{j != i} c*(Y^j - Y^i) for all i; y_k is (n_players, n_paths).

    Reference O(n^2) evaluation, kept as the oracle for the sorted fast path.
    """
    n = y_k.shape[0]
    diff = y_k[:, None, :] - y_k[None, :, :]  # [j, i, p] = Y^j - Y^i
    tot = conjugate(cost, diff).sum(axis=0)  # c*(0) = 0 removes the j = i term
    return tot / (n - 1)


def _rowwise_searchsorted(sorted_rows: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """searchsorted(side='right') row by row, vectorized via disjoint row offsets."""
    n_rows, width = sorted_rows.shape
    lo = sorted_rows[:, 0].min()
    hi = max(sorted_rows[:, -1].max(), queries.max())
    span = (hi - lo) + 1.0
    offs = np.arange(n_rows) * span
    flat = (sorted_rows + offs[:, None]).ravel()
    idx = np.searchsorted(flat, (queries + offs[:, None]).ravel(), side="right")
    return idx.reshape(n_rows, -1) - np.arange(n_rows)[:, None] * width


def _coupling_nplayer(cost: CostSpec, y_k: np.ndarray) -> np.ndarray:
    """(1/(n-1)) sum_{j != i} c*(Y^j - Y^i), O(n log n) per path via prefix sums.

    Per path the row is sorted once; for each query y the gaps split at y
    (rank) and at y + kappa*a_max (quadratic/linear boundary of c*), so the
    pair sum reduces to prefix sums of the values and their squares.
    """
    n, n_paths = y_k.shape
    if n <= 4:  # pairwise is cheaper than sorting bookkeeping for tiny systems
        return _coupling_pairwise(cost, y_k)
    rows = np.ascontiguousarray(y_k.T)  # (paths, players)
    order = np.argsort(rows, axis=1, kind="stable")
    s = np.take_along_axis(rows, order, axis=1)
    ps = np.zeros((n_paths, n + 1))
    ps2 = np.zeros((n_paths, n + 1))
    np.cumsum(s, axis=1, out=ps[:, 1:])
    np.cumsum(s * s, axis=1, out=ps2[:, 1:])

    kink = cost.kappa * cost.a_max
    a = _rowwise_searchsorted(s, s)  # first index with value > y (ties give 0 anyway)
    b = _rowwise_searchsorted(s, s + kink)  # first index with value > y + kink

    cnt_mid = (b - a).astype(float)
    sum_mid = np.take_along_axis(ps, b, axis=1) - np.take_along_axis(ps, a, axis=1)
    sq_mid = np.take_along_axis(ps2, b, axis=1) - np.take_along_axis(ps2, a, axis=1)
    cnt_top = (n - b).astype(float)
    sum_top = ps[:, -1:] - np.take_along_axis(ps, b, axis=1)

    tot_sorted = (sq_mid - 2.0 * s * sum_mid + cnt_mid * s * s) / (2.0 * cost.kappa)
    tot_sorted += cost.a_max * (sum_top - cnt_top * s)
    tot_sorted -= cnt_top * (cost.kappa * cost.a_max**2 / 2.0)

    tot = np.empty_like(rows)
    np.put_along_axis(tot, order, tot_sorted, axis=1)
    return tot.T / (n - 1)


def _backward_solve(
    xi: np.ndarray,
    wage: np.ndarray,
    bundle: PathBundle,
    cost: CostSpec,
    reg: RegressionConfig,
    coupling,
    y0: np.ndarray | None,
    with_mean: bool,
    y_init: np.ndarray | None = None,
    states: np.ndarray | None = None,
) -> BsdeSolution:
    """Shared Picard / least-squares backward engine.

    coupling(k, y_k) maps the previous Picard iterate's values at step k
    (n_players, n_paths) to the interaction part of the driver.  y_init
    optionally warm-starts the Picard iterate (the fixed point does not
    depend on it; a good guess just saves sweeps).  states, when given,
    replaces the raw output paths as the per-knot regression state — the
    right choice whenever the terminal data are path functionals (e.g.
    promised-value copies) rather than functions of the output level.
    """
    n_players, n_paths = xi.shape
    grid = bundle.grid
    n_steps, dt = grid.n_steps, grid.dt
    inc = bundle.increments  # (paths, steps, dims)

    fmap = FeatureMap(
        degree=reg.degree,
        n_players=n_players,
        with_mean=with_mean and n_players > 1,
        with_y0=y0 is not None,
    )
    if states is None:
        x_paths = bundle.brownian_paths()  # solve runs on the driftless output measure
    else:
        x_paths = np.asarray(states, dtype=float)
        if x_paths.shape[:2] != (n_paths, n_steps + 1) or x_paths.shape[2] < n_players:
            raise ValueError(
                "states must be (n_paths, n_steps+1, >=n_players)"
            )
        x_paths = x_paths[:, :, :n_players]
    phi = [fmap.build(x_paths[:, k, :], y0) for k in range(n_steps)]
    gram = []
    for k in range(n_steps):
        g = np.einsum("ipf,ipg->ifg", phi[k], phi[k])
        scale = np.trace(g, axis1=1, axis2=2) / fmap.n_features
        g = g + (reg.ridge * np.maximum(scale, 1.0))[:, None, None] * np.eye(fmap.n_features)
        gram.append(g)

    own_dw = np.moveaxis(inc[:, :, :n_players], 2, 0)  # (players, paths, steps)

    if y_init is None:
        y_prev = np.broadcast_to(xi[:, :, None], (n_players, n_paths, n_steps + 1)).copy()
    else:
        y_prev = np.asarray(y_init, dtype=float).copy()
        if y_prev.shape != (n_players, n_paths, n_steps + 1):
            raise ValueError("y_init must be (n_players, n_paths, n_steps+1)")
    y_new = np.empty_like(y_prev)
    y_coeffs = np.empty((n_players, n_steps, fmap.n_features))
    z_own = np.empty((n_players, n_paths, n_steps))
    residuals: list[float] = []
    monotone = True

    for sweep in range(reg.max_picard):
        y_new[:, :, n_steps] = xi  # terminal condition, bit-exact
        for k in range(n_steps - 1, -1, -1):
            y_next = y_new[:, :, k + 1]
            beta_m = _ridge_solve(
                gram[k], np.einsum("ipf,ip->if", phi[k], y_next)[..., None], k
            )[..., 0]
            m_hat = np.einsum("ipf,if->ip", phi[k], beta_m)
            zt = (y_next - m_hat) * own_dw[:, :, k] / dt
            coup = coupling(k, y_prev[:, :, k])
            rhs = np.einsum("ipf,ipt->ift", phi[k], np.stack([zt, coup], axis=-1))
            beta_zc = _ridge_solve(gram[k], rhs, k)
            z_k = np.einsum("ipf,if->ip", phi[k], beta_zc[:, :, 0])
            z_own[:, :, k] = z_k
            # Y_k = proj[Y_{k+1} + dt*(coupling + wage + Z_own)]
            beta_y = beta_m + dt * beta_zc[:, :, 1] + dt * beta_zc[:, :, 0]
            beta_y[:, 0] += dt * wage[:, k]
            y_coeffs[:, k, :] = beta_y
            y_new[:, :, k] = m_hat + dt * (
                np.einsum("ipf,if->ip", phi[k], beta_zc[:, :, 1]) + wage[:, k][:, None] + z_k
            )
        res = float(np.max(np.abs(y_new - y_prev)))
        residuals.append(res)
        y_prev, y_new = y_new, y_prev
        if len(residuals) >= 2 and res > residuals[-2] * (1.0 + 1e-12):
            monotone = False
        if res < reg.tol_picard:
            break
    else:
        if not monotone:
            warnings.warn("Picard residuals not monotone before stall", RuntimeWarning)
        raise PicardConvergenceError(residuals, reg.tol_picard)

    if not monotone:
        warnings.warn(
            f"Picard residuals increased along the sweep: {residuals}", RuntimeWarning
        )

    y_sol = y_prev  # converged field (swapped above)

    # final pass over all noise coordinates for the stored volatility fields
    dims = inc.shape[2]
    keep_full = n_players <= Z_FULL_PLAYER_LIMIT
    z_full = np.empty((n_players, n_paths, n_steps, dims)) if keep_full else None
    z_sumsq = np.empty((n_players, n_paths, n_steps))
    for k in range(n_steps):
        y_next = y_sol[:, :, k + 1]
        beta_m = _ridge_solve(
            gram[k], np.einsum("ipf,ip->if", phi[k], y_next)[..., None], k
        )[..., 0]
        centered = y_next - np.einsum("ipf,if->ip", phi[k], beta_m)
        zt_all = centered[:, :, None] * inc[None, :, k, :] / dt  # (players, paths, dims)
        beta_z = _ridge_solve(gram[k], np.einsum("ipf,ipd->ifd", phi[k], zt_all), k)
        z_all = np.einsum("ipf,ifd->ipd", phi[k], beta_z)
        z_sumsq[:, :, k] = np.einsum("ipd,ipd->ip", z_all, z_all)
        z_own[:, :, k] = np.take_along_axis(
            z_all, np.arange(n_players)[:, None, None] % dims, axis=2
        )[:, :, 0]
        if keep_full:
            z_full[:, :, k, :] = z_all

    return BsdeSolution(
        grid=grid,
        y=y_sol,
        z_own=z_own,
        z_sumsq=z_sumsq,
        y_coeffs=y_coeffs,
        feature_map=fmap,
        picard_residuals=residuals,
        picard_monotone=monotone,
        z_full=z_full,
        y0=None if y0 is None else y0.copy(),
    )


def solve_nplayer(
    xi: np.ndarray,
    wage: np.ndarray,
    bundle: PathBundle,
    cost: CostSpec,
    reg: RegressionConfig = RegressionConfig(),
    y0: np.ndarray | None = None,
    y_init: np.ndarray | None = None,
    states: np.ndarray | None = None,
) -> BsdeSolution:
    """Solve the coupled n-player promised-value system on Brownian output.

    xi: terminal payments (n_players, n_paths) evaluated on the bundle's
    paths; wage: per-player schedules (n_players, n_steps) or (n_steps,)
    shared; y0: optional per-player contract starts used as regressors;
    y_init: optional Picard warm start (n_players, n_paths, n_steps+1);
    states: optional regression states (n_paths, n_steps+1, n_players)
    for path-functional terminals (defaults to the output paths).
    The driver of player i is (1/(n-1)) sum_{j!=i} c*(Y^j - Y^i) + w^i + Z^{i,i}.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 2 or xi.shape[0] < 2:
        raise ValueError("xi must be (n_players >= 2, n_paths)")
    n_players = xi.shape[0]
    if bundle.dims != n_players:
        raise ValueError(f"bundle has {bundle.dims} dims, need {n_players}")
    if xi.shape[1] != bundle.n_paths:
        raise ValueError("xi path count does not match bundle")
    wage = np.asarray(wage, dtype=float)
    if wage.ndim == 1:
        wage = np.broadcast_to(wage, (n_players, wage.size))
    if wage.shape != (n_players, bundle.grid.n_steps):
        raise ValueError("wage must be (n_players, n_steps)")
    if y0 is not None:
        y0 = np.asarray(y0, dtype=float)
        if y0.shape != xi.shape:
            raise ValueError("y0 must match xi shape")

    def coupling(_k: int, y_k: np.ndarray) -> np.ndarray:
        return _coupling_nplayer(cost, y_k)

    return _backward_solve(
        xi,
        wage,
        bundle,
        cost,
        reg,
        coupling,
        y0,
        with_mean=True,
        y_init=y_init,
        states=states,
    )


def solve_meanfield_bsde(
    xi: np.ndarray,
    wage: np.ndarray,
    p_star: MeasureFlow | list[ConjugateTable],
    bundle: PathBundle,
    cost: CostSpec,
    reg: RegressionConfig = RegressionConfig(),
    y0: np.ndarray | None = None,
) -> BsdeSolution:
    """Backward solve of the one-agent limit equation against a fixed flow.

    Driver: mean_{y ~ p_k} c*(y - Y_k) + w_k + Z_k; the interaction enters
    through the frozen reference flow, so the Picard loop only resolves the
    equation's own implicit step term.
    """
    xi = np.asarray(xi, dtype=float).reshape(1, -1)
    if bundle.dims != 1:
        raise ValueError("mean-field solve drives a single output coordinate")
    if xi.shape[1] != bundle.n_paths:
        raise ValueError("xi path count does not match bundle")
    wage = np.asarray(wage, dtype=float).reshape(1, -1)
    if wage.shape[1] != bundle.grid.n_steps:
        raise ValueError("wage must have n_steps entries")
    tables = marginal_tables(cost, p_star) if isinstance(p_star, MeasureFlow) else p_star
    if y0 is not None:
        y0 = np.asarray(y0, dtype=float).reshape(1, -1)

    def coupling(k: int, y_k: np.ndarray) -> np.ndarray:
        return tables[k].mean_conjugate(y_k)

    return _backward_solve(xi, wage, bundle, cost, reg, coupling, y0, with_mean=False)


def deviation_volatility(
    sol: BsdeSolution,
    ybar: np.ndarray,
    bundle: PathBundle,
    reg: RegressionConfig = RegressionConfig(),
    states: np.ndarray | None = None,
) -> np.ndarray:
    """Squared volatility gap |Z_k - Zbar_k|^2 per (player, path, step).

    ybar holds mean-field copies on the same bundle whose martingale part is
    sqrt(eta) dW_i exactly, so the increments of the difference Y - Ybar carry
    (Z - Zbar) . dW and nothing else.  Regressing that difference directly
    cancels the common O(1) martingale noise that dominates any estimate formed
    by subtracting two separately fitted volatility fields; what remains is the
    genuinely small coupled deviation.  states must match what the solve used.
    """
    ybar = np.asarray(ybar, dtype=float)
    if ybar.shape != sol.y.shape:
        raise ValueError("ybar must match the solution field shape")
    n_players, n_paths = sol.n_players, sol.n_paths
    grid = sol.grid
    n_steps, dt = grid.n_steps, grid.dt
    inc = bundle.increments
    if inc.shape[0] != n_paths or inc.shape[1] != n_steps:
        raise ValueError("bundle does not match the solution")

    if states is None:
        x_paths = bundle.brownian_paths()
    else:
        x_paths = np.asarray(states, dtype=float)[:, :, :n_players]
    fmap = sol.feature_map
    dy = sol.y - ybar

    out = np.empty((n_players, n_paths, n_steps))
    eye = np.eye(fmap.n_features)
    for k in range(n_steps):
        phi = fmap.build(x_paths[:, k, :], sol.y0)
        g = np.einsum("ipf,ipg->ifg", phi, phi)
        scale = np.trace(g, axis1=1, axis2=2) / fmap.n_features
        g = g + (reg.ridge * np.maximum(scale, 1.0))[:, None, None] * eye
        target = dy[:, :, k + 1]
        beta_m = _ridge_solve(g, np.einsum("ipf,ip->if", phi, target)[..., None], k)[..., 0]
        centered = target - np.einsum("ipf,if->ip", phi, beta_m)
        zt_all = centered[:, :, None] * inc[None, :, k, :] / dt
        beta_z = _ridge_solve(g, np.einsum("ipf,ipd->ifd", phi, zt_all), k)
        dz_all = np.einsum("ipf,ifd->ipd", phi, beta_z)
        out[:, :, k] = np.einsum("ipd,ipd->ip", dz_all, dz_all)
    return out


# ---------------------------------------------------------------------------
# intensities


def optimal_intensity(sol: BsdeSolution, i: int, k: int, cost: CostSpec) -> np.ndarray:
    """Optimal switching rates away from principal i at step k, per solved path.

    Returns (n_paths, n_players) with column j = a*(Y^j_k - Y^i_k)/(n-1) for
    j != i and zeros on the own column; every entry lies in [0, a_max/(n-1)].
    """
    n = sol.n_players
    if n < 2:
        raise ValueError("optimal_intensity needs a multi-player solution")
    if not (0 <= i < n):
        raise ValueError(f"player index {i} out of range")
    y_k = sol.y[:, :, k]  # (players, paths)
    rates = argmax_intensity(cost, y_k - y_k[i][None, :]) / (n - 1)
    rates[i, :] = 0.0
    return rates.T


def meanfield_intensity(
    y: np.ndarray,
    p_star: MeasureFlow | list[ConjugateTable],
    cost: CostSpec,
    grid: TimeGrid,
) -> tuple[np.ndarray, np.ndarray]:
    """Limit switching intensity and survival weight along promised-value paths.

    y: (n_paths, n_steps+1) promised values; returns (alpha, beta) of the
    same shape with alpha[p, k] = mean_{y' ~ p_k} a*(y' - y[p, k]) and
    beta[p, k] = exp(-sum_{m<k} alpha[p, m] dt), beta[:, 0] = 1.
    """
    tables = marginal_tables(cost, p_star) if isinstance(p_star, MeasureFlow) else p_star
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != grid.n_steps + 1:
        raise ValueError("y must be (n_paths, n_steps+1)")
    alpha = np.empty_like(y)
    for k in range(grid.n_steps + 1):
        alpha[:, k] = tables[k].mean_intensity(y[:, k])
    beta = np.ones_like(y)
    np.cumsum(alpha[:, :-1] * grid.dt, axis=1, out=beta[:, 1:])
    np.exp(-beta[:, 1:], out=beta[:, 1:])
    return alpha, beta


def solution_to_csv_bytes(sol: BsdeSolution, max_paths: int | None = None) -> bytes:
    """Long-format CSV `player,path,step,Y,Z_1..Z_n` of a solved system.

    Z columns are per-interval regression fields, so the terminal knot's Z
    cells are left empty.  Requires the full Z tensor (small systems only);
    max_paths truncates the path axis for export size control.
    """
    if sol.z_full is None:
        raise ValueError(
            f"full Z export needs n_players <= {Z_FULL_PLAYER_LIMIT}; "
            "this solution kept only own-coordinate and norm fields"
        )
    n_players, n_paths, n_knots = sol.y.shape
    if max_paths is not None:
        n_paths = min(n_paths, int(max_paths))
    header = "player,path,step,Y," + ",".join(f"Z_{j + 1}" for j in range(n_players))
    lines = [header]
    empty_z = "," * (n_players - 1)
    for i in range(n_players):
        for p in range(n_paths):
            y_row = sol.y[i, p]
            z_row = sol.z_full[i, p]
            for k in range(n_knots - 1):
                zs = ",".join("%.17g" % z for z in z_row[k])
                lines.append(f"{i},{p},{k},{y_row[k]:.17g},{zs}")
            lines.append(f"{i},{p},{n_knots - 1},{y_row[-1]:.17g},{empty_z}")
    return ("\n".join(lines) + "\n").encode()
