"""Forward contract builder and backward solvers against independent oracles."""
import numpy as np
import pytest

from oracles import ode_system_oracle
from switchmfg.cost_model import CostSpec
from switchmfg.stochastic_core import MeasureFlow, TimeGrid, generate_brownian
from switchmfg.agent_bsde import (
    BsdeSolution,
    ContractSpec,
    FeatureMap,
    PicardConvergenceError,
    RegressionConfig,
    RegressionError,
    build_meanfield_contract,
    evaluate_contract,
    marginal_tables,
    meanfield_intensity,
    optimal_intensity,
    solve_meanfield_bsde,
    solve_nplayer,
)

COST = CostSpec(kappa=1.0, a_max=2.0)


def low_flow(grid, n=8, level=-25.0):
    """Reference flow far below any promised value: the coupling term vanishes."""
    return MeasureFlow(grid=grid, samples=np.full((n, grid.n_steps + 1), level), role="low")


# ---------------------------------------------------------------------------
# contract spec and forward builder

def test_contract_spec_validation():
    g = TimeGrid(T=1.0, n_steps=4)
    ContractSpec.constant(1.0, 0.2, 0.1, g)
    with pytest.raises(ValueError):
        ContractSpec(
            lambda_support=np.array([1.0]),
            lambda_weights=np.array([0.5]),  # not a probability vector
            eta=np.zeros(4),
            wage=np.zeros(4),
        )
    with pytest.raises(ValueError):
        ContractSpec(
            lambda_support=np.array([1.0]),
            lambda_weights=np.array([1.0]),
            eta=np.full(4, -0.1),  # negative volatility
            wage=np.zeros(4),
        )
    with pytest.raises(ValueError):
        ContractSpec(
            lambda_support=np.array([1.0]),
            lambda_weights=np.array([1.0]),
            eta=np.zeros(4),
            wage=np.zeros(3),  # schedule length mismatch
        )


def test_sample_initial_deterministic_and_distributed():
    g = TimeGrid(T=1.0, n_steps=4)
    params = ContractSpec(
        lambda_support=np.array([0.0, 1.0]),
        lambda_weights=np.array([0.25, 0.75]),
        eta=np.zeros(4),
        wage=np.zeros(4),
    )
    a = params.sample_initial(10_000, seed=3)
    assert np.array_equal(a, params.sample_initial(10_000, seed=3))
    frac = np.mean(a == 1.0)
    assert abs(frac - 0.75) < 4 * np.sqrt(0.25 * 0.75 / 10_000)


def test_forward_constant_fixed_point():
    # eta=0, w=0, reference far below: promised value never moves
    g = TimeGrid(T=1.0, n_steps=20)
    params = ContractSpec.constant(0.7, 0.0, 0.0, g)
    b = generate_brownian(seed=1, n_paths=16, grid=g)
    d = build_meanfield_contract(params, low_flow(g), b, COST)
    assert np.all(d.y == 0.7)
    assert np.all(d.xi == 0.7)


def test_forward_pure_wage_drain():
    g = TimeGrid(T=2.0, n_steps=40)
    params = ContractSpec.constant(1.0, 0.0, 0.3, g)
    b = generate_brownian(seed=2, n_paths=8, grid=g)
    d = build_meanfield_contract(params, low_flow(g), b, COST)
    np.testing.assert_allclose(d.xi, 1.0 - 0.3 * 2.0, atol=1e-12)
    np.testing.assert_allclose(d.y[:, 20], 1.0 - 0.3 * 1.0, atol=1e-12)


def test_forward_volatility_isometry():
    # dead coupling: Ybar_{k+1} = Ybar_k - sqrt(eta) dt + sqrt(eta) dW,
    # so Var(xi) = eta0 * T exactly at Euler scale
    eta0 = 0.36
    g = TimeGrid(T=1.0, n_steps=50)
    params = ContractSpec.constant(1.0, eta0, 0.0, g)
    b = generate_brownian(seed=17, n_paths=100_000, grid=g)
    d = build_meanfield_contract(params, low_flow(g), b, COST)
    assert abs(d.xi.var() - eta0 * g.T) < 0.05 * eta0 * g.T
    assert abs(d.xi.mean() - (1.0 - np.sqrt(eta0) * g.T)) < 0.01


def test_forward_drift_shifts_terminal_mean():
    eta0 = 0.25
    g = TimeGrid(T=1.0, n_steps=50)
    params = ContractSpec.constant(1.0, eta0, 0.0, g)
    b = generate_brownian(seed=21, n_paths=20_000, grid=g)
    d0 = build_meanfield_contract(params, low_flow(g), b, COST, drift=0.0)
    d1 = build_meanfield_contract(params, low_flow(g), b, COST, drift=1.0)
    # with full-effort output the -sqrt(eta) dt drain is exactly cancelled
    assert abs(d1.xi.mean() - d0.xi.mean() - np.sqrt(eta0) * g.T) < 1e-10
    assert abs(d1.xi.mean() - 1.0) < 0.02


def test_forward_y0_seed_reproducible():
    g = TimeGrid(T=1.0, n_steps=10)
    params = ContractSpec(
        lambda_support=np.array([0.0, 0.5, 1.0]),
        lambda_weights=np.array([0.2, 0.3, 0.5]),
        eta=np.full(10, 0.1),
        wage=np.zeros(10),
    )
    b = generate_brownian(seed=4, n_paths=64, grid=g)
    d1 = build_meanfield_contract(params, low_flow(g), b, COST)
    d2 = build_meanfield_contract(params, low_flow(g), b, COST)
    assert np.array_equal(d1.y, d2.y)
    d3 = build_meanfield_contract(params, low_flow(g), b, COST, y0_seed=99)
    assert not np.array_equal(d1.y0, d3.y0)


def test_evaluate_contract_grid_mismatch():
    g = TimeGrid(T=1.0, n_steps=10)
    params = ContractSpec.constant(1.0, 0.1, 0.0, g)
    tables = marginal_tables(COST, low_flow(g))
    with pytest.raises(ValueError):
        evaluate_contract(params, tables, TimeGrid(T=1.0, n_steps=20), np.zeros((4, 20)), np.zeros(4))


# ---------------------------------------------------------------------------
# backward n-player solve vs the RK4 oracle

def test_nplayer_matches_ode_oracle():
    xi_c = np.array([0.4, 0.8, 1.2])
    wage_c = np.array([0.1, 0.0, 0.2])
    g = TimeGrid(T=1.0, n_steps=100)
    b = generate_brownian(seed=77, n_paths=512, grid=g, dims=3)
    wage = np.tile(wage_c[:, None], (1, g.n_steps))
    sol = solve_nplayer(np.tile(xi_c[:, None], (1, 512)), wage, b, COST)
    oracle = ode_system_oracle(COST.kappa, COST.a_max, xi_c, wage, g.T, g.n_steps)
    # deterministic contracts: all paths collapse and the field obeys the ODE
    assert np.max(sol.y.std(axis=1)) < 1e-6
    assert np.max(np.abs(sol.y.mean(axis=1) - oracle)) < 1e-2
    # volatility of a deterministic value process is zero (up to Picard tol / dt)
    assert np.max(np.abs(sol.z_own)) < 1e-6


def test_nplayer_order_one_in_dt():
    xi_c = np.array([0.4, 0.8, 1.2])
    wage_c = np.array([0.1, 0.0, 0.2])
    errs = {}
    for n_steps in (50, 100):
        g = TimeGrid(T=1.0, n_steps=n_steps)
        b = generate_brownian(seed=77, n_paths=256, grid=g, dims=3)
        wage = np.tile(wage_c[:, None], (1, n_steps))
        sol = solve_nplayer(np.tile(xi_c[:, None], (1, 256)), wage, b, COST)
        oracle = ode_system_oracle(COST.kappa, COST.a_max, xi_c, wage, g.T, n_steps)
        errs[n_steps] = np.max(np.abs(sol.y.mean(axis=1) - oracle))
    ratio = errs[50] / errs[100]
    assert 1.4 <= ratio <= 2.6  # halves within +-30%


def test_nplayer_terminal_bit_exact_and_deterministic():
    g = TimeGrid(T=1.0, n_steps=20)
    b = generate_brownian(seed=5, n_paths=128, grid=g, dims=2)
    rng = np.random.default_rng(0)
    xi = rng.normal(1.0, 0.3, size=(2, 128))
    sol1 = solve_nplayer(xi, np.zeros((2, 20)), b, COST)
    assert np.array_equal(sol1.y[:, :, -1], xi)
    sol2 = solve_nplayer(xi, np.zeros((2, 20)), b, COST)
    assert np.array_equal(sol1.y, sol2.y)
    assert np.array_equal(sol1.z_own, sol2.z_own)


def test_nplayer_symmetry_under_relabeling():
    # swapping the two players' contracts swaps the solution fields
    g = TimeGrid(T=1.0, n_steps=20)
    b = generate_brownian(seed=8, n_paths=256, grid=g, dims=2)
    xi = np.vstack([np.full(256, 0.5), np.full(256, 1.5)])
    wage = np.vstack([np.full(20, 0.1), np.full(20, 0.3)])
    sol = solve_nplayer(xi, wage, b, COST)
    # same bundle with the coordinates swapped
    swapped_inc = b.increments[:, :, ::-1].copy()
    b_sw = type(b)(grid=b.grid, seed=b.seed, increments=swapped_inc)
    sol_sw = solve_nplayer(xi[::-1], wage[::-1], b_sw, COST)
    np.testing.assert_allclose(sol.y[0], sol_sw.y[1], atol=1e-10)
    np.testing.assert_allclose(sol.y[1], sol_sw.y[0], atol=1e-10)


def test_nplayer_comparison_ordering():
    # higher terminal payment => higher promised value everywhere (deterministic case)
    g = TimeGrid(T=1.0, n_steps=30)
    b = generate_brownian(seed=13, n_paths=128, grid=g, dims=2)
    xi = np.vstack([np.full(128, 0.5), np.full(128, 1.0)])
    sol = solve_nplayer(xi, np.zeros((2, 30)), b, COST)
    assert np.all(sol.y[1] >= sol.y[0] - 1e-9)


def test_picard_residuals_monotone_and_geometric():
    g = TimeGrid(T=1.0, n_steps=50)
    b = generate_brownian(seed=6, n_paths=256, grid=g, dims=3)
    xi = np.vstack([np.full(256, 0.3), np.full(256, 0.9), np.full(256, 1.5)])
    sol = solve_nplayer(xi, np.zeros((3, 50)), b, COST)
    r = sol.picard_residuals
    assert sol.picard_monotone
    assert all(r[t + 1] <= r[t] for t in range(1, len(r) - 1))
    assert r[-1] < 1e-6


def test_picard_max_iterations_error():
    g = TimeGrid(T=1.0, n_steps=20)
    b = generate_brownian(seed=6, n_paths=64, grid=g, dims=2)
    xi = np.vstack([np.full(64, 0.0), np.full(64, 1.8)])
    with pytest.raises(PicardConvergenceError) as exc:
        solve_nplayer(xi, np.zeros((2, 20)), b, COST, RegressionConfig(max_picard=2))
    assert len(exc.value.residuals) == 2


def test_regression_error_on_nonfinite_terminal():
    g = TimeGrid(T=1.0, n_steps=5)
    b = generate_brownian(seed=6, n_paths=32, grid=g, dims=2)
    xi = np.full((2, 32), np.nan)
    with pytest.raises(RegressionError) as exc:
        solve_nplayer(xi, np.zeros((2, 5)), b, COST)
    assert exc.value.step == 4  # first backward step reports


def test_nplayer_input_validation():
    g = TimeGrid(T=1.0, n_steps=5)
    b = generate_brownian(seed=6, n_paths=32, grid=g, dims=2)
    xi = np.zeros((2, 32))
    with pytest.raises(ValueError):
        solve_nplayer(np.zeros((1, 32)), np.zeros(5), b, COST)  # needs >= 2 players
    with pytest.raises(ValueError):
        solve_nplayer(np.zeros((3, 32)), np.zeros(5), b, COST)  # dims mismatch
    with pytest.raises(ValueError):
        solve_nplayer(xi, np.zeros((2, 4)), b, COST)  # wage length
    with pytest.raises(ValueError):
        solve_nplayer(xi, np.zeros(5), b, COST, y0=np.zeros((2, 31)))


# ---------------------------------------------------------------------------
# mean-field backward solve

def test_meanfield_roundtrip_recovers_forward_values():
    g = TimeGrid(T=1.0, n_steps=50)
    params = ContractSpec(
        lambda_support=np.array([0.5, 1.0, 1.5]),
        lambda_weights=np.array([1 / 3, 1 / 3, 1 / 3]),
        eta=np.full(50, 0.3),
        wage=np.full(50, 0.2),
    )
    boot = MeasureFlow(grid=g, samples=np.full((64, 51), 1.0), role="boot")
    p = build_meanfield_contract(params, boot, generate_brownian(seed=5, n_paths=1024, grid=g), COST).flow("p")
    b = generate_brownian(seed=6, n_paths=2048, grid=g)
    draw = build_meanfield_contract(params, p, b, COST)
    sol = solve_meanfield_bsde(draw.xi, params.wage, p, b, COST, y0=draw.y0)
    # measured regression bias: rmse(Y_0) ~ 0.034, relative mid-path rmse ~ 0.10
    rmse0 = np.sqrt(np.mean((sol.y[0, :, 0] - draw.y0) ** 2))
    assert rmse0 < 0.08
    k = 25
    rel = np.sqrt(np.mean((sol.y[0, :, k] - draw.y[:, k]) ** 2)) / np.std(draw.y[:, k])
    assert rel < 0.25


def test_meanfield_recovers_flat_volatility():
    # dead coupling + constant eta: xi is linear in X_T with Z = sqrt(eta) exactly
    eta0 = 0.36
    g = TimeGrid(T=1.0, n_steps=50)
    params = ContractSpec.constant(1.0, eta0, 0.0, g)
    flow = low_flow(g)
    b = generate_brownian(seed=6, n_paths=2048, grid=g)
    d = build_meanfield_contract(params, flow, b, COST)
    sol = solve_meanfield_bsde(d.xi, params.wage, flow, b, COST, y0=d.y0)
    z = sol.z_own[0]
    target = np.sqrt(eta0)
    assert abs(z.mean() - target) < 0.05 * target  # measured: ~2.5% bias
    assert np.sqrt(np.mean((z - target) ** 2)) < 0.15 * target  # measured: ~7%
    # z_sumsq agrees with the single-coordinate square
    np.testing.assert_allclose(sol.z_sumsq, sol.z_own**2, atol=1e-12)
    assert sol.z_full is not None and sol.z_full.shape[-1] == 1


def test_regression_residuals_orthogonal_to_features():
    g = TimeGrid(T=1.0, n_steps=20)
    b = generate_brownian(seed=30, n_paths=512, grid=g, dims=2)
    rng = np.random.default_rng(1)
    xi = rng.normal(1.0, 0.2, size=(2, 512))
    wage = np.full((2, 20), 0.1)
    sol = solve_nplayer(xi, wage, b, COST)
    from switchmfg.agent_bsde import _coupling_nplayer  # reconstruct the target

    k = 10
    x = b.brownian_paths()[:, k, :]
    phi = sol.feature_map.build(x, None)
    target = sol.y[:, :, k + 1] + g.dt * (
        _coupling_nplayer(COST, sol.y[:, :, k]) + wage[:, k][:, None] + sol.z_own[:, :, k]
    )
    resid = target - sol.y[:, :, k]
    # normal equations: features orthogonal to residuals (up to Picard tol and ridge)
    gap = np.abs(np.einsum("ipf,ip->if", phi, resid)) / phi.shape[1]
    assert np.max(gap) < 1e-4


def test_surrogate_reproduces_in_sample_values():
    g = TimeGrid(T=1.0, n_steps=20)
    b = generate_brownian(seed=31, n_paths=256, grid=g, dims=2)
    rng = np.random.default_rng(2)
    xi = rng.normal(1.0, 0.2, size=(2, 256))
    y0 = rng.normal(1.0, 0.1, size=(2, 256))
    sol = solve_nplayer(xi, np.zeros((2, 20)), b, COST, y0=y0)
    x = b.brownian_paths()
    for k in (0, 7, 19):
        np.testing.assert_allclose(sol.y_at(k, x[:, k, :], y0), sol.y[:, :, k], atol=1e-10)
    with pytest.raises(ValueError):
        sol.y_at(20, x[:, 0, :], y0)


# ---------------------------------------------------------------------------
# intensities

def _dummy_solution(y_values, grid):
    """Hand-built solution carrying a given (players, paths, knots) value field."""
    y = np.asarray(y_values, dtype=float)
    n, p, k1 = y.shape
    return BsdeSolution(
        grid=grid,
        y=y,
        z_own=np.zeros((n, p, k1 - 1)),
        z_sumsq=np.zeros((n, p, k1 - 1)),
        y_coeffs=np.zeros((n, k1 - 1, 1)),
        feature_map=FeatureMap(degree=1, n_players=n, with_mean=False, with_y0=False),
    )


def test_optimal_intensity_frozen_examples():
    g = TimeGrid(T=1.0, n_steps=1)
    # two players, gap 1: rate a*(1)/(n-1) = 1
    sol2 = _dummy_solution(np.array([[[0.0, 0.0]], [[1.0, 1.0]]]), g)
    rates = optimal_intensity(sol2, 0, 0, COST)
    np.testing.assert_allclose(rates, [[0.0, 1.0]])
    # three players at (0, 1, 10): from player 0, a*(1)/2 = 0.5 and a*(10)/2 = 1.0
    sol3 = _dummy_solution(np.array([[[0.0, 0.0]], [[1.0, 1.0]], [[10.0, 10.0]]]), g)
    rates = optimal_intensity(sol3, 0, 0, COST)
    np.testing.assert_allclose(rates, [[0.0, 0.5, 1.0]])
    # rates always within [0, a_max/(n-1)]
    rng = np.random.default_rng(3)
    soln = _dummy_solution(rng.normal(size=(4, 16, 2)), g)
    for i in range(4):
        r = optimal_intensity(soln, i, 0, COST)
        assert np.all(r >= 0.0) and np.all(r <= COST.a_max / 3 + 1e-12)
        assert np.all(r[:, i] == 0.0)


def test_meanfield_intensity_constant_gap():
    # reference one unit above the path: alpha == a*(1) == 1, beta_T = e^{-T}
    g = TimeGrid(T=1.0, n_steps=40)
    flow = MeasureFlow(grid=g, samples=np.ones((16, 41)), role="p")
    y = np.zeros((8, 41))
    alpha, beta = meanfield_intensity(y, flow, COST, g)
    np.testing.assert_allclose(alpha, 1.0)
    assert np.all(beta[:, 0] == 1.0)
    np.testing.assert_allclose(beta[:, -1], np.exp(-1.0), rtol=1e-12)
    # multiplicativity: beta(0,s) = beta(0,t) * beta(t,s) for deterministic rate
    t, s = 10, 30
    np.testing.assert_allclose(beta[:, s], beta[:, t] * np.exp(-(s - t) * g.dt), rtol=1e-12)


def test_meanfield_intensity_bounds():
    g = TimeGrid(T=1.0, n_steps=10)
    rng = np.random.default_rng(4)
    flow = MeasureFlow(grid=g, samples=rng.normal(size=(32, 11)), role="p")
    y = rng.normal(size=(5, 11))
    alpha, beta = meanfield_intensity(y, flow, COST, g)
    assert np.all(alpha >= 0.0) and np.all(alpha <= COST.a_max)
    assert np.all(beta > 0.0) and np.all(beta <= 1.0)


def test_sorted_coupling_matches_pairwise_oracle():
    # the O(n log n) prefix-sum coupling must reproduce the direct double sum
    from switchmfg.agent_bsde import _coupling_nplayer, _coupling_pairwise

    rng = np.random.default_rng(0)
    for n in (5, 8, 17, 33):
        y = rng.normal(0.0, 1.5, size=(n, 101))
        y[:, :7] = y[0, :7]  # exact ties across players
        np.testing.assert_allclose(
            _coupling_nplayer(COST, y), _coupling_pairwise(COST, y), atol=1e-12
        )
