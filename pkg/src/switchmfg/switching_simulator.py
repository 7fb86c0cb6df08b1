"""Randomized switching between principals and Monte Carlo value estimators.

The agent's regime process jumps between principals with controlled
intensities; jumps are simulated by first-order thinning (per step, jump
probability rate*dt, at most one jump), with a hard error once total
rate*dt exceeds 0.5 -- that grid is too coarse to trust.  Survival weights
beta(t,s) = exp(-int_t^s total rate) tie the jump simulation to the
weighted-functional representation of conditional survival, and
`check_girsanov` measures how well the two agree.

Value estimators:
  * agent_value_mc      -- realized agent payoff under the optimal policy,
  * principal_value_direct   -- principal i's payoff on switching paths,
  * principal_value_weighted -- the jump-free representation on full-effort
    paths with survival weights absorbing the switching risk.
The direct and weighted estimators target the same number whenever the
agent never switches back into regime i after leaving; tests exercise
exactly such configurations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent_bsde import BsdeSolution, ContractSpec, evaluate_contract
from .cost_model import ConjugateTable, CostSpec, argmax_intensity, cost as cost_fn
from .stochastic_core import PathBundle, TimeGrid, UniformStream

#: per-step total jump probability above which simulation refuses to proceed
THINNING_GUARD = 0.5

DEFAULT_CHUNK = 16384


class GridTooCoarseError(RuntimeError):
    """Total switching probability per step exceeded the thinning guard."""

    def __init__(self, step: int, prob: float) -> None:
        super().__init__(
            f"total jump probability {prob:.3f} > {THINNING_GUARD} at step {step}; "
            "refine the time grid"
        )
        self.step = step
        self.prob = prob


@dataclass(frozen=True)
class UtilitySpec:
    """Principal's disutility of payments: U(w) = min(w^2, cap)."""

    cap: float = 1e6

    def __post_init__(self) -> None:
        if not (self.cap > 0):
            raise ValueError("cap must be positive")

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        out = np.minimum(w * w, self.cap)
        return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# switching policies


class OptimalSwitchPolicy:
    """Rates a*(Y^j - Y^I)/(n-1) read off a solved system's regression surrogate."""

    def __init__(self, sol: BsdeSolution, cost: CostSpec, y0: np.ndarray | None = None):
        self.sol = sol
        self.cost = cost
        self.y0 = y0
        self.n_players = sol.n_players

    def rates(self, k: int, regimes: np.ndarray, x: np.ndarray) -> np.ndarray:
        y0 = self.y0
        if y0 is not None and y0.shape[1] != x.shape[0]:
            raise ValueError("policy y0 does not match path count")
        y = self.sol.y_at(k, x, y0)  # (players, paths)
        own = np.take_along_axis(y, regimes[None, :], axis=0)[0]
        rates = argmax_intensity(self.cost, y - own[None, :]) / (self.n_players - 1)
        return rates.T


class ConstantRatePolicy:
    """State-independent rate matrix: rates[i, j] = switching rate i -> j."""

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("rate matrix must be square")
        if np.any(m < 0):
            raise ValueError("rates must be nonnegative")
        self.matrix = m
        self.n_players = m.shape[0]

    def rates(self, k: int, regimes: np.ndarray, x) -> np.ndarray:
        return self.matrix[regimes]


class ScheduleRatePolicy:
    """Deterministic per-step total rate out of every regime, split uniformly."""

    def __init__(self, alpha: np.ndarray, n_players: int = 2):
        self.alpha = np.asarray(alpha, dtype=float)
        if np.any(self.alpha < 0):
            raise ValueError("rates must be nonnegative")
        self.n_players = n_players

    def rates(self, k: int, regimes: np.ndarray, x) -> np.ndarray:
        n = self.n_players
        out = np.full((regimes.shape[0], n), self.alpha[k] / (n - 1))
        return out


@dataclass(frozen=True)
class SwitchTrajectory:
    """Simulated regimes and outputs: regimes[p, k] on [t_k, t_{k+1}), x[p, k, :] at t_k."""

    grid: TimeGrid
    regimes: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.regimes.shape[0]

    def n_jumps(self) -> np.ndarray:
        return (np.diff(self.regimes, axis=1) != 0).sum(axis=1)

    def time_in(self, i: int) -> np.ndarray:
        """Occupation time of regime i per path (left-endpoint rule)."""
        return (self.regimes[:, :-1] == i).sum(axis=1) * self.grid.dt


def _simulate_chunk(
    policy,
    i0: int,
    grid: TimeGrid,
    uniforms: np.ndarray,
    increments: np.ndarray | None,
    x0: float,
):
    """Core thinning loop on one chunk of paths."""
    n_paths, n_steps = uniforms.shape
    n = policy.n_players
    dt = grid.dt
    regimes = np.empty((n_paths, n_steps + 1), dtype=np.int64)
    regimes[:, 0] = i0
    x = None
    if increments is not None:
        x = np.empty((n_paths, n_steps + 1, increments.shape[2]))
        x[:, 0, :] = x0
    cols = np.arange(n)
    for k in range(n_steps):
        cur = regimes[:, k]
        state = x[:, k, :] if x is not None else None
        rates = np.array(policy.rates(k, cur, state), dtype=float)
        rates[cols[None, :] == cur[:, None]] = 0.0  # no self-transitions
        cum = np.cumsum(rates, axis=1) * dt
        total_p = cum[:, -1]
        worst = float(total_p.max()) if n_paths else 0.0
        if worst > THINNING_GUARD:
            raise GridTooCoarseError(k, worst)
        u = uniforms[:, k]
        jump = u < total_p
        target = np.argmax(u[:, None] < cum, axis=1)
        regimes[:, k + 1] = np.where(jump, target, cur)
        if x is not None:
            x[:, k + 1, :] = x[:, k, :] + increments[:, k, :]
            x[np.arange(n_paths), k + 1, cur] += dt  # active coordinate drifts
    return regimes, x


def simulate_switching(
    policy,
    i0: int,
    bundle: PathBundle,
    seed_jumps: int,
    x0: float = 0.0,
) -> SwitchTrajectory:
    """Thinning simulation of the regime and output processes on a bundle.

    The jump stream is separate from the Brownian bundle and path-major, so
    any prefix of paths reproduces independently of the total count.
    """
    n = policy.n_players
    if bundle.dims < n:
        raise ValueError(f"bundle has {bundle.dims} dims, policy drives {n} regimes")
    if not (0 <= i0 < n):
        raise ValueError(f"initial regime {i0} out of range")
    stream = UniformStream(seed_jumps)
    u = stream.take(bundle.n_paths * bundle.grid.n_steps).reshape(
        bundle.n_paths, bundle.grid.n_steps
    )
    regimes, x = _simulate_chunk(policy, i0, bundle.grid, u, bundle.increments, x0)
    return SwitchTrajectory(grid=bundle.grid, regimes=regimes, x=x)


def trajectory_to_csv_bytes(traj: SwitchTrajectory, max_sims: int | None = None) -> bytes:
    """Long-format CSV `sim,step,regime,X_1..X_n`; max_sims truncates the export."""
    if traj.x is None:
        raise ValueError("trajectory carries no output paths to export")
    n_sims, n_knots, n_dims = traj.x.shape
    if max_sims is not None:
        n_sims = min(n_sims, int(max_sims))
    header = "sim,step,regime," + ",".join(f"X_{j + 1}" for j in range(n_dims))
    lines = [header]
    for p in range(n_sims):
        for k in range(n_knots):
            xs = ",".join("%.17g" % v for v in traj.x[p, k])
            lines.append(f"{p},{k},{traj.regimes[p, k]},{xs}")
    return ("\n".join(lines) + "\n").encode()


def survival_weights(alpha: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """beta[.., k] = exp(-sum_{m<k} alpha[.., m] dt) for per-step total rates."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape[-1] != grid.n_steps:
        raise ValueError("alpha must have n_steps entries on the last axis")
    beta = np.ones(alpha.shape[:-1] + (grid.n_steps + 1,))
    np.cumsum(alpha * grid.dt, axis=-1, out=beta[..., 1:])
    np.exp(-beta[..., 1:], out=beta[..., 1:])
    return beta


@dataclass(frozen=True)
class GirsanovCheck:
    mc_survival: float
    weight_formula: float
    stderr: float
    n_sims: int

    @property
    def z_score(self) -> float:
        return abs(self.mc_survival - self.weight_formula) / max(self.stderr, 1e-300)


def check_girsanov(
    alpha: np.ndarray,
    grid: TimeGrid,
    t: int,
    s: int,
    n_sims: int,
    seed_jumps: int,
    chunk: int = DEFAULT_CHUNK,
) -> GirsanovCheck:
    """Empirical survival P[no jump on steps t..s-1] vs exp(-sum alpha dt).

    alpha is the deterministic total-rate schedule per step; t and s are
    knot indices.  The Monte Carlo side runs the actual thinning simulator,
    so this measures the first-order thinning bias plus sampling noise.
    """
    alpha = np.asarray(alpha, dtype=float)
    if not (0 <= t < s <= grid.n_steps):
        raise ValueError("need 0 <= t < s <= n_steps")
    policy = ScheduleRatePolicy(alpha, n_players=2)
    stream = UniformStream(seed_jumps)
    survived = 0
    done = 0
    while done < n_sims:
        m = min(chunk, n_sims - done)
        u = stream.take(m * grid.n_steps).reshape(m, grid.n_steps)
        regimes, _ = _simulate_chunk(policy, 0, grid, u, None, 0.0)
        survived += int(np.sum(np.all(regimes[:, t : s + 1] == 0, axis=1)))
        done += m
    p_hat = survived / n_sims
    formula = float(np.exp(-np.sum(alpha[t:s]) * grid.dt))
    stderr = float(np.sqrt(max(p_hat * (1 - p_hat), 1e-12) / n_sims))
    return GirsanovCheck(p_hat, formula, stderr, n_sims)


# ---------------------------------------------------------------------------
# contract banks: how terminal payments and wages are read along simulated paths


@dataclass(frozen=True)
class DeterministicContracts:
    """Fixed terminal payments and wage schedules (no initial-draw regressor)."""

    xi: np.ndarray  # (n_players,)
    wage: np.ndarray  # (n_players, n_steps)

    def __post_init__(self) -> None:
        object.__setattr__(self, "xi", np.atleast_1d(np.asarray(self.xi, dtype=float)))
        object.__setattr__(self, "wage", np.asarray(self.wage, dtype=float))
        if self.wage.ndim != 2 or self.wage.shape[0] != self.xi.size:
            raise ValueError("wage must be (n_players, n_steps)")

    @property
    def n_players(self) -> int:
        return self.xi.size

    @property
    def y0(self):
        return None

    def y0_slice(self, a: int, b: int):
        return None

    def terminal(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.xi[:, None], (self.xi.size, x.shape[0]))


@dataclass(frozen=True)
class MeanFieldContracts:
    """Independent copies of one parametrized contract, one per principal.

    Terminal payments are the contract functional evaluated on each
    principal's own output coordinate with that copy's initial draw.
    """

    params: ContractSpec
    tables: list[ConjugateTable]
    grid: TimeGrid
    y0: np.ndarray  # (n_players, n_paths)

    @property
    def n_players(self) -> int:
        return self.y0.shape[0]

    @property
    def wage(self) -> np.ndarray:
        return np.broadcast_to(self.params.wage, (self.n_players, self.grid.n_steps))

    def y0_slice(self, a: int, b: int) -> np.ndarray:
        return self.y0[:, a:b]

    def terminal(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((self.n_players, x.shape[0]))
        for i in range(self.n_players):
            inc = np.diff(x[:, :, i], axis=1)
            out[i] = evaluate_contract(self.params, self.tables, self.grid, inc, self.y0[i])[:, -1]
        return out


def _mc_moments(chunks):
    """Mean and stderr from an iterator of per-path value arrays."""
    n = 0
    s1 = 0.0
    s2 = 0.0
    for v in chunks:
        n += v.size
        s1 += float(v.sum())
        s2 += float((v * v).sum())
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0)
    return mean, float(np.sqrt(var / n)), n


def agent_value_mc(
    sol: BsdeSolution,
    bank,
    i0: int,
    bundle: PathBundle,
    cost: CostSpec,
    seed_jumps: int,
    x0: float = 0.0,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[float, float]:
    """Realized agent payoff under the optimal switching policy.

    Per path: xi of the terminal regime, plus collected wages, minus the
    running cost c((n-1) alpha^j)/(n-1) of the exerted switching rates.
    Returns (estimate, stderr).
    """
    n = bank.n_players
    dt = bundle.grid.dt
    n_steps = bundle.grid.n_steps
    wage = bank.wage

    def gen():
        stream = UniformStream(seed_jumps)
        for a in range(0, bundle.n_paths, chunk):
            b = min(a + chunk, bundle.n_paths)
            y0 = bank.y0_slice(a, b)
            policy = OptimalSwitchPolicy(sol, cost, y0)
            u = stream.take((b - a) * n_steps).reshape(b - a, n_steps)
            regimes, x = _simulate_chunk(policy, i0, bundle.grid, u, bundle.increments[a:b], x0)
            m = b - a
            value = np.zeros(m)
            rows = np.arange(m)
            for k in range(n_steps):
                cur = regimes[:, k]
                y = sol.y_at(k, x[:, k, :], y0)
                own = np.take_along_axis(y, cur[None, :], axis=0)[0]
                gap = y - own[None, :]
                a_star = argmax_intensity(cost, gap)  # = (n-1) * alpha^j
                run_cost = cost_fn(cost, a_star).sum(axis=0) / (n - 1)  # includes j=i term = 0
                value += dt * (wage[cur, k] - run_cost)
            xi = bank.terminal(x)
            value += np.take_along_axis(xi, regimes[None, :, -1], axis=0)[0]
            yield value

    mean, stderr, _ = _mc_moments(gen())
    return mean, stderr


def principal_value_direct(
    i: int,
    sol: BsdeSolution,
    bank,
    utility: UtilitySpec,
    bundle: PathBundle,
    cost: CostSpec,
    seed_jumps: int,
    x0: float = 0.0,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[float, float]:
    """Principal i's payoff on switching trajectories started in regime i.

    Per path: X^i_T - U(xi^i) 1{I_T = i} - int U(w^i) 1{I = i} dt.
    Returns (estimate, stderr).
    """
    dt = bundle.grid.dt
    n_steps = bundle.grid.n_steps
    wage_u = utility(bank.wage[i])  # (n_steps,)

    def gen():
        stream = UniformStream(seed_jumps)
        for a in range(0, bundle.n_paths, chunk):
            b = min(a + chunk, bundle.n_paths)
            y0 = bank.y0_slice(a, b)
            policy = OptimalSwitchPolicy(sol, cost, y0)
            u = stream.take((b - a) * n_steps).reshape(b - a, n_steps)
            regimes, x = _simulate_chunk(policy, i, bundle.grid, u, bundle.increments[a:b], x0)
            occupied = regimes[:, :-1] == i  # (paths, n_steps)
            value = x[:, -1, i] - dt * occupied @ wage_u
            xi_i = bank.terminal(x)[i]
            value -= utility(xi_i) * (regimes[:, -1] == i)
            yield value

    mean, stderr, _ = _mc_moments(gen())
    return mean, stderr


def principal_value_weighted(
    i: int,
    sol: BsdeSolution,
    bank,
    utility: UtilitySpec,
    bundle: PathBundle,
    cost: CostSpec,
    x0: float = 0.0,
) -> tuple[float, float]:
    """Survival-weighted principal value on jump-free full-effort paths.

    X carries drift 1 in coordinate i throughout; the switching risk enters
    through alpha^n (total optimal rate away from i, read off the regression
    surrogate) and its survival weight beta^n.  The time integral uses the
    trapezoid rule; the wage of the final interval extends to the endpoint.
    Returns (estimate, stderr).
    """
    grid = bundle.grid
    n_steps, dt = grid.n_steps, grid.dt
    n = bank.n_players
    x = bundle.brownian_paths(x0)
    x[:, :, i] += grid.times()[None, :]
    wage_i = bank.wage[i]
    y0 = bank.y0_slice(0, bundle.n_paths)

    alpha = np.empty((bundle.n_paths, n_steps + 1))
    for k in range(n_steps):
        y = sol.y_at(k, x[:, k, :], y0)
        alpha[:, k] = argmax_intensity(cost, y - y[i][None, :]).sum(axis=0) / (n - 1)
    xi_all = bank.terminal(x)
    alpha[:, n_steps] = argmax_intensity(cost, xi_all - xi_all[i][None, :]).sum(axis=0) / (n - 1)
    beta = survival_weights(alpha[:, :n_steps], grid)

    # by parts on the no-reentry survival identity: output is collected at the
    # departure time (density alpha*beta), wages accrue while still employed
    # (weight beta alone)
    wage_knots = utility(np.concatenate([wage_i, wage_i[-1:]]))
    integrand = beta * (alpha * x[:, :, i] - wage_knots[None, :])
    running = np.trapezoid(integrand, dx=dt, axis=1)
    value = running + beta[:, -1] * (x[:, -1, i] - utility(xi_all[i]))
    mean = float(value.mean())
    stderr = float(value.std(ddof=0) / np.sqrt(value.size))
    return mean, stderr
