"""Equilibrium search over parametrized contracts.

A continuum of identical principals each offer a contract (initial promise
drawn from a discrete distribution, piecewise-constant volatility loading and
wage).  Given the population flow of promised values, the representative
principal's payoff is evaluated on drift-1 output paths with the no-reentry
survival weighting; the best response is searched over a finite parameter
grid, and the flow is updated toward the law of the responding contract until
the two agree in the per-knot Wasserstein sense.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cost_model import ConjugateTable, CostSpec
from .stochastic_core import (
    MeasureFlow,
    PathBundle,
    TimeGrid,
    derive_seed,
    generate_brownian,
    w2_marginal,
)
from .agent_bsde import (
    ContractSpec,
    evaluate_contract,
    marginal_tables,
    meanfield_intensity,
)
from .switching_simulator import UtilitySpec


@dataclass(frozen=True)
class MfgConfig:
    """Search grids and fixed-point controls.

    support: candidate initial promises (the offered distribution is a
    point mass on one of them); eta_grid/wage_grid: levels available per
    time block.  theta is the fraction of flow samples refreshed per
    iteration; it halves after `anneal_after` consecutive non-improving
    residuals.
    """

    support: np.ndarray
    eta_grid: np.ndarray
    wage_grid: np.ndarray
    n_blocks: int = 4
    n_flow: int = 1024
    n_value_paths: int = 4096
    theta: float = 0.5
    theta_min: float = 0.05
    tol_fp: float = 1e-3
    max_iters: int = 40
    max_sweeps: int = 6
    anneal_after: int = 3

    def __post_init__(self) -> None:
        for name in ("support", "eta_grid", "wage_grid"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.support.ndim != 1 or self.support.size < 1:
            raise ValueError("support must be a nonempty 1-d grid")
        if np.any(self.eta_grid < 0) or np.any(self.wage_grid < 0):
            raise ValueError("eta and wage levels must be nonnegative")
        if not (0 < self.theta <= 1):
            raise ValueError("theta must lie in (0, 1]")
        if self.n_blocks < 1 or self.max_iters < 0:
            raise ValueError("n_blocks must be positive and max_iters nonnegative")

    @classmethod
    def default(cls, **overrides) -> "MfgConfig":
        base = dict(
            support=np.linspace(0.0, 2.0, 9),
            eta_grid=np.array([0.05, 0.1, 0.2, 0.4, 0.8]),
            wage_grid=np.linspace(0.0, 0.6, 7),
        )
        base.update(overrides)
        return cls(**base)


def block_schedule(values: np.ndarray, n_steps: int, n_blocks: int) -> np.ndarray:
    """Per-step schedule from per-block levels (equal split, remainder spread left)."""
    values = np.asarray(values, dtype=float)
    if values.size != n_blocks:
        raise ValueError(f"expected {n_blocks} block levels, got {values.size}")
    idx = (np.arange(n_steps) * n_blocks) // n_steps
    return values[idx]


def make_contract(
    cfg: MfgConfig,
    grid: TimeGrid,
    weights: np.ndarray,
    eta_blocks: np.ndarray,
    wage_blocks: np.ndarray,
) -> ContractSpec:
    """Contract from mixture weights over cfg.support and per-block levels."""
    return ContractSpec(
        lambda_support=cfg.support,
        lambda_weights=np.asarray(weights, dtype=float),
        eta=block_schedule(eta_blocks, grid.n_steps, cfg.n_blocks),
        wage=block_schedule(wage_blocks, grid.n_steps, cfg.n_blocks),
    )


def _one_hot(n: int, j: int) -> np.ndarray:
    w = np.zeros(n)
    w[j] = 1.0
    return w


def atom_value_paths(
    params: ContractSpec,
    tables: list[ConjugateTable],
    bundle: PathBundle,
    cost: CostSpec,
    utility: UtilitySpec,
    x0: float = 0.0,
) -> np.ndarray:
    """Per-path principal payoffs, one row per initial-promise atom.

    Paths carry output drift 1 (the agent is working for this principal until
    it leaves, which never recurs in the continuum).  Payoff per path:
    int beta (alpha X - U(w)) dt + beta_T (X_T - U(Y_T)) with alpha the mean
    leave intensity against the flow and beta its survival weight.  The
    contract's own mixture weights are ignored here: the value of any mixture
    is the same weighting of these rows, because the initial promise is the
    only place the mixture enters.
    """
    grid = bundle.grid
    n_steps, dt = grid.n_steps, grid.dt
    n_paths = bundle.n_paths
    atoms = params.lambda_support
    n_atoms = atoms.size

    inc = bundle.increments[:, :, 0] + dt  # drift-1 output increments
    x_paths = np.empty((n_paths, n_steps + 1))
    x_paths[:, 0] = x0
    np.cumsum(inc, axis=1, out=x_paths[:, 1:])
    x_paths[:, 1:] += x0

    inc_rep = np.tile(inc, (n_atoms, 1))
    y0_rep = np.repeat(atoms, n_paths)
    y = evaluate_contract(params, tables, grid, inc_rep, y0_rep)
    alpha, beta = meanfield_intensity(y, tables, cost, grid)

    wage_knots = utility(np.concatenate([params.wage, params.wage[-1:]]))
    x_rep = np.tile(x_paths, (n_atoms, 1))
    integrand = beta * (alpha * x_rep - wage_knots[None, :])
    j = np.trapezoid(integrand, dx=dt, axis=1)
    j += beta[:, -1] * (x_rep[:, -1] - utility(y[:, -1]))
    return j.reshape(n_atoms, n_paths)


def principal_objective(
    params: ContractSpec,
    tables: list[ConjugateTable],
    bundle: PathBundle,
    cost: CostSpec,
    utility: UtilitySpec,
    x0: float = 0.0,
) -> tuple[float, float]:
    """Value and stderr of a contract against a fixed flow (mixture-weighted)."""
    j = atom_value_paths(params, tables, bundle, cost, utility, x0)
    mixed = params.lambda_weights @ j
    return float(mixed.mean()), float(mixed.std(ddof=0) / np.sqrt(mixed.size))


@dataclass(frozen=True)
class BestResponse:
    params: ContractSpec
    value: float
    stderr: float
    atom_idx: int
    eta_idx: np.ndarray
    wage_idx: np.ndarray
    atom_values: np.ndarray
    sweeps: int
    evals: int


def best_response(
    tables: list[ConjugateTable],
    bundle: PathBundle,
    cost: CostSpec,
    utility: UtilitySpec,
    cfg: MfgConfig,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> BestResponse:
    """Grid best response against a fixed flow.

    The initial-promise coordinate is exact in one shot (the objective is
    linear in the mixture weights, so some point mass is optimal); the eta
    and wage blocks are improved by coordinate ascent on common random
    numbers until a full sweep gains less than one stderr.
    """
    grid = bundle.grid
    n_eta, n_wage = cfg.eta_grid.size, cfg.wage_grid.size
    if init is None:
        eta_idx = np.full(cfg.n_blocks, n_eta // 2, dtype=int)
        wage_idx = np.full(cfg.n_blocks, n_wage // 2, dtype=int)
    else:
        eta_idx = np.asarray(init[0], dtype=int).copy()
        wage_idx = np.asarray(init[1], dtype=int).copy()

    cache: dict[tuple, tuple[float, int, float, np.ndarray]] = {}

    def evaluate(ei: np.ndarray, wi: np.ndarray):
        key = (tuple(ei), tuple(wi))
        if key not in cache:
            params = make_contract(
                cfg, grid, np.full(cfg.support.size, 1.0 / cfg.support.size),
                cfg.eta_grid[ei], cfg.wage_grid[wi],
            )
            j = atom_value_paths(params, tables, bundle, cost, utility)
            means = j.mean(axis=1)
            a = int(np.argmax(means))
            se = float(j[a].std(ddof=0) / np.sqrt(j.shape[1]))
            cache[key] = (float(means[a]), a, se, means)
        return cache[key]

    best_v, best_a, best_se, best_means = evaluate(eta_idx, wage_idx)
    sweeps = 0
    while sweeps < cfg.max_sweeps:
        sweeps += 1
        sweep_start = best_v
        for b in range(cfg.n_blocks):
            for level in range(n_eta):
                if level == eta_idx[b]:
                    continue
                cand = eta_idx.copy()
                cand[b] = level
                v, a, se, means = evaluate(cand, wage_idx)
                if v > best_v:
                    best_v, best_a, best_se, best_means = v, a, se, means
                    eta_idx = cand
            for level in range(n_wage):
                if level == wage_idx[b]:
                    continue
                cand = wage_idx.copy()
                cand[b] = level
                v, a, se, means = evaluate(eta_idx, cand)
                if v > best_v:
                    best_v, best_a, best_se, best_means = v, a, se, means
                    wage_idx = cand
        if best_v - sweep_start < best_se:
            break

    params = make_contract(
        cfg, grid, _one_hot(cfg.support.size, best_a),
        cfg.eta_grid[eta_idx], cfg.wage_grid[wage_idx],
    )
    return BestResponse(
        params=params,
        value=best_v,
        stderr=best_se,
        atom_idx=best_a,
        eta_idx=eta_idx,
        wage_idx=wage_idx,
        atom_values=best_means,
        sweeps=sweeps,
        evals=len(cache),
    )


@dataclass(frozen=True)
class EquilibriumResult:
    """Fixed-point output: responding contract, flow it was measured against,
    and the residual history (per-knot Wasserstein gap between the flow and
    the law of the response)."""

    params: ContractSpec
    flow: MeasureFlow
    value: float
    value_stderr: float
    residuals: list[float]
    converged: bool
    iterations: int
    theta_final: float
    atom_idx: int
    eta_idx: np.ndarray
    wage_idx: np.ndarray
    atom_values: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        """JSON-ready payload; floats keep full repr so loading is lossless."""
        return {
            "kind": "equilibrium",
            "params": {
                "lambda_support": self.params.lambda_support.tolist(),
                "lambda_weights": self.params.lambda_weights.tolist(),
                "eta": self.params.eta.tolist(),
                "wage": self.params.wage.tolist(),
                "reference_flow": self.params.reference_flow,
            },
            "flow": {
                "grid": {"T": self.flow.grid.T, "n_steps": self.flow.grid.n_steps},
                "role": self.flow.role,
                "samples": self.flow.samples.tolist(),
            },
            "value": self.value,
            "value_stderr": self.value_stderr,
            "residuals": list(self.residuals),
            "converged": self.converged,
            "iterations": self.iterations,
            "theta_final": self.theta_final,
            "atom_idx": self.atom_idx,
            "eta_idx": self.eta_idx.tolist(),
            "wage_idx": self.wage_idx.tolist(),
            "atom_values": self.atom_values.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EquilibriumResult":
        if payload.get("kind") != "equilibrium":
            raise ValueError(
                f"expected an equilibrium payload, got kind={payload.get('kind')!r}"
            )
        p = payload["params"]
        f = payload["flow"]
        return cls(
            params=ContractSpec(
                lambda_support=np.asarray(p["lambda_support"], dtype=float),
                lambda_weights=np.asarray(p["lambda_weights"], dtype=float),
                eta=np.asarray(p["eta"], dtype=float),
                wage=np.asarray(p["wage"], dtype=float),
                reference_flow=p["reference_flow"],
            ),
            flow=MeasureFlow(
                grid=TimeGrid(T=f["grid"]["T"], n_steps=f["grid"]["n_steps"]),
                samples=np.asarray(f["samples"], dtype=float),
                role=f["role"],
            ),
            value=float(payload["value"]),
            value_stderr=float(payload["value_stderr"]),
            residuals=[float(r) for r in payload["residuals"]],
            converged=bool(payload["converged"]),
            iterations=int(payload["iterations"]),
            theta_final=float(payload["theta_final"]),
            atom_idx=int(payload["atom_idx"]),
            eta_idx=np.asarray(payload["eta_idx"], dtype=int),
            wage_idx=np.asarray(payload["wage_idx"], dtype=int),
            atom_values=np.asarray(payload["atom_values"], dtype=float),
        )


def fixed_point(
    cost: CostSpec,
    utility: UtilitySpec,
    cfg: MfgConfig,
    grid: TimeGrid,
    seed: int,
) -> EquilibriumResult:
    """Damped self-consistency iteration on the flow of promised values.

    The flow is a fixed panel of sample paths; each iteration solves the grid
    best response against it (common random numbers throughout), simulates
    the responding contract on the driftless flow bundle, and refreshes a
    rotating block of theta * n_flow sample rows with the response.  The
    residual is the worst per-knot marginal Wasserstein distance between the
    response law and the current flow; convergence is residual <= tol_fp.
    """
    flow_bundle = generate_brownian(derive_seed(seed, 1), cfg.n_flow, grid, dims=1)
    value_bundle = generate_brownian(derive_seed(seed, 2), cfg.n_value_paths, grid, dims=1)
    y0_seed = derive_seed(seed, 3)
    flow_inc = flow_bundle.increments[:, :, 0]

    mid = float(cfg.support[cfg.support.size // 2])
    samples = np.full((cfg.n_flow, grid.n_steps + 1), mid)

    theta = cfg.theta
    cursor = 0
    stall = 0
    residuals: list[float] = []
    converged = False
    warm: tuple[np.ndarray, np.ndarray] | None = None
    br = None

    for iteration in range(1, cfg.max_iters + 1):
        tables = [ConjugateTable(cost, samples[:, k]) for k in range(grid.n_steps + 1)]
        br = best_response(tables, value_bundle, cost, utility, cfg, init=warm)
        warm = (br.eta_idx, br.wage_idx)

        y0 = br.params.sample_initial(cfg.n_flow, y0_seed)
        response = evaluate_contract(br.params, tables, grid, flow_inc, y0)
        res = max(
            w2_marginal(response[:, k], samples[:, k]) for k in range(grid.n_steps + 1)
        )
        residuals.append(float(res))
        if res <= cfg.tol_fp:
            converged = True
            break

        if len(residuals) > 1 and res >= min(residuals[:-1]):
            stall += 1
            if stall >= cfg.anneal_after:
                theta = max(theta / 2.0, cfg.theta_min)
                stall = 0
        else:
            stall = 0

        m = max(1, int(round(theta * cfg.n_flow)))
        rows = (cursor + np.arange(m)) % cfg.n_flow
        samples[rows] = response[rows]
        cursor = (cursor + m) % cfg.n_flow

    if br is None:  # max_iters = 0: best response to the initial flow, no update
        tables = [ConjugateTable(cost, samples[:, k]) for k in range(grid.n_steps + 1)]
        br = best_response(tables, value_bundle, cost, utility, cfg)
    if not converged and residuals:
        warnings.warn(
            f"flow fixed point stopped at residual {residuals[-1]:.3e} "
            f"after {len(residuals)} iterations",
            stacklevel=2,
        )
    return EquilibriumResult(
        params=br.params,
        flow=MeasureFlow(grid=grid, samples=samples, role="p"),
        value=br.value,
        value_stderr=br.stderr,
        residuals=residuals,
        converged=converged,
        iterations=len(residuals),
        theta_final=theta,
        atom_idx=br.atom_idx,
        eta_idx=br.eta_idx,
        wage_idx=br.wage_idx,
        atom_values=br.atom_values,
    )


@dataclass(frozen=True)
class DefectCheck:
    defect: float
    stderr: float
    eq_value: float
    br_value: float


def best_response_defect(
    result: EquilibriumResult,
    cost: CostSpec,
    utility: UtilitySpec,
    cfg: MfgConfig,
    seed: int,
) -> DefectCheck:
    """Out-of-sample equilibrium check: how much a fresh best response gains.

    Re-evaluates the equilibrium contract and a full best-response search on
    an independent bundle against the final flow.  The search starts from the
    equilibrium parameters, so the defect is nonnegative by construction and
    its paired stderr reflects only the gain, not common path noise.
    """
    grid = result.flow.grid
    bundle = generate_brownian(derive_seed(seed, 4), cfg.n_value_paths, grid, dims=1)
    tables = marginal_tables(cost, result.flow)

    j_eq = atom_value_paths(result.params, tables, bundle, cost, utility)
    eq_paths = result.params.lambda_weights @ j_eq

    br = best_response(
        tables, bundle, cost, utility, cfg, init=(result.eta_idx, result.wage_idx)
    )
    j_br = atom_value_paths(br.params, tables, bundle, cost, utility)
    br_paths = br.params.lambda_weights @ j_br

    diff = br_paths - eq_paths
    return DefectCheck(
        defect=float(diff.mean()),
        stderr=float(diff.std(ddof=0) / np.sqrt(diff.size)),
        eq_value=float(eq_paths.mean()),
        br_value=float(br_paths.mean()),
    )
