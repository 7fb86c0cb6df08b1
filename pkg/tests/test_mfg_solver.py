"""Best response and flow fixed point over the contract grid."""
import numpy as np
import pytest

from switchmfg.cost_model import CostSpec
from switchmfg.stochastic_core import MeasureFlow, TimeGrid, generate_brownian
from switchmfg.agent_bsde import evaluate_contract, marginal_tables, meanfield_intensity
from switchmfg.switching_simulator import UtilitySpec
from switchmfg.mfg_solver import (
    MfgConfig,
    atom_value_paths,
    best_response,
    best_response_defect,
    block_schedule,
    fixed_point,
    make_contract,
    principal_objective,
)

COST = CostSpec(kappa=1.0, a_max=2.0)
U = UtilitySpec()

TINY = MfgConfig(
    support=np.linspace(0.0, 1.5, 5),
    eta_grid=np.array([0.05, 0.2, 0.5]),
    wage_grid=np.array([0.0, 0.15, 0.3]),
    n_blocks=2,
    n_flow=256,
    n_value_paths=512,
)


def tiny_flow(grid, level=1.0, n=128):
    return MeasureFlow(grid=grid, samples=np.full((n, grid.n_steps + 1), level), role="p")


def test_block_schedule_split_and_validation():
    np.testing.assert_array_equal(
        block_schedule(np.array([10.0, 20.0, 30.0, 40.0]), 10, 4),
        [10, 10, 10, 20, 20, 30, 30, 30, 40, 40],
    )
    np.testing.assert_array_equal(block_schedule(np.array([5.0]), 3, 1), [5, 5, 5])
    with pytest.raises(ValueError):
        block_schedule(np.array([1.0, 2.0]), 10, 4)


def test_config_validation():
    with pytest.raises(ValueError):
        MfgConfig(support=np.array([]), eta_grid=np.array([0.1]), wage_grid=np.array([0.1]))
    with pytest.raises(ValueError):
        MfgConfig.default(theta=0.0)
    with pytest.raises(ValueError):
        MfgConfig.default(eta_grid=np.array([-0.1, 0.2]))
    cfg = MfgConfig.default()
    assert (cfg.support.size, cfg.eta_grid.size, cfg.wage_grid.size, cfg.n_blocks) == (9, 5, 7, 4)


def test_make_contract_builds_schedules():
    grid = TimeGrid(T=1.0, n_steps=10)
    params = make_contract(
        TINY, grid, np.array([0, 0, 1, 0, 0.0]), np.array([0.05, 0.5]), np.array([0.3, 0.0])
    )
    np.testing.assert_array_equal(params.eta, [0.05] * 5 + [0.5] * 5)
    np.testing.assert_array_equal(params.wage, [0.3] * 5 + [0.0] * 5)
    assert params.lambda_support[np.argmax(params.lambda_weights)] == 0.75


def test_atom_rows_match_scalar_reevaluation():
    # row a of the atom matrix == the weighted-payoff recipe run by hand at y0 = atom a
    grid = TimeGrid(T=1.0, n_steps=20)
    flow = tiny_flow(grid)
    tables = marginal_tables(COST, flow)
    bundle = generate_brownian(seed=5, n_paths=64, grid=grid, dims=1)
    params = make_contract(TINY, grid, np.full(5, 0.2), np.array([0.2, 0.2]), np.array([0.15, 0.15]))
    j = atom_value_paths(params, tables, bundle, COST, U)
    assert j.shape == (5, 64)

    inc = bundle.increments[:, :, 0] + grid.dt
    x = np.concatenate([np.zeros((64, 1)), np.cumsum(inc, axis=1)], axis=1)
    for a in (0, 3):
        y = evaluate_contract(params, tables, grid, inc, np.full(64, TINY.support[a]))
        alpha, beta = meanfield_intensity(y, tables, COST, grid)
        uw = U(np.concatenate([params.wage, params.wage[-1:]]))
        manual = np.trapezoid(beta * (alpha * x - uw[None, :]), dx=grid.dt, axis=1)
        manual += beta[:, -1] * (x[:, -1] - U(y[:, -1]))
        np.testing.assert_allclose(j[a], manual, rtol=1e-12)


def test_objective_linear_in_mixture_weights():
    grid = TimeGrid(T=1.0, n_steps=20)
    tables = marginal_tables(COST, tiny_flow(grid))
    bundle = generate_brownian(seed=5, n_paths=256, grid=grid, dims=1)
    blocks = (np.array([0.2, 0.2]), np.array([0.15, 0.15]))
    w_mix = np.array([0.3, 0.0, 0.0, 0.7, 0.0])
    v_mix, _ = principal_objective(make_contract(TINY, grid, w_mix, *blocks), tables, bundle, COST, U)
    one_hot = np.eye(5)
    v_atoms = [
        principal_objective(make_contract(TINY, grid, one_hot[a], *blocks), tables, bundle, COST, U)[0]
        for a in range(5)
    ]
    assert abs(v_mix - (0.3 * v_atoms[0] + 0.7 * v_atoms[3])) < 1e-12


def test_large_promises_hurt():
    # quadratic terminal disutility eventually dominates any retention gain
    grid = TimeGrid(T=1.0, n_steps=20)
    tables = marginal_tables(COST, tiny_flow(grid, level=0.5))
    bundle = generate_brownian(seed=7, n_paths=512, grid=grid, dims=1)
    cfg = MfgConfig.default(n_flow=128, n_value_paths=512)
    params = make_contract(cfg, grid, np.full(9, 1 / 9), np.full(4, 0.1), np.full(4, 0.1))
    j = atom_value_paths(params, tables, bundle, COST, U)
    means = j.mean(axis=1)
    assert means[-1] < means[-2] < means[-3]
    assert np.argmax(means) < 6


def test_best_response_deterministic_and_improving():
    grid = TimeGrid(T=1.0, n_steps=20)
    tables = marginal_tables(COST, tiny_flow(grid))
    bundle = generate_brownian(seed=11, n_paths=512, grid=grid, dims=1)
    br1 = best_response(tables, bundle, COST, U, TINY)
    br2 = best_response(tables, bundle, COST, U, TINY)
    assert br1.atom_idx == br2.atom_idx
    np.testing.assert_array_equal(br1.eta_idx, br2.eta_idx)
    np.testing.assert_array_equal(br1.wage_idx, br2.wage_idx)
    assert br1.value == br2.value

    # never worse than the centre-of-grid starting candidate on the same paths
    init = make_contract(
        TINY, grid, np.full(5, 0.2),
        TINY.eta_grid[[1, 1]], TINY.wage_grid[[1, 1]],
    )
    v_init = max(
        principal_objective(make_contract(TINY, grid, np.eye(5)[a], TINY.eta_grid[[1, 1]],
                                          TINY.wage_grid[[1, 1]]), tables, bundle, COST, U)[0]
        for a in range(5)
    )
    assert br1.value >= v_init - 1e-12
    assert br1.atom_idx == int(np.argmax(br1.atom_values))
    del init


@pytest.fixture(scope="module")
def tiny_equilibrium():
    grid = TimeGrid(T=1.0, n_steps=20)
    return grid, fixed_point(COST, U, TINY, grid, seed=404)


def test_fixed_point_converges_on_tiny_config(tiny_equilibrium):
    grid, res = tiny_equilibrium
    assert res.converged
    assert res.residuals[-1] <= TINY.tol_fp
    assert res.iterations == len(res.residuals) <= TINY.max_iters
    assert res.flow.samples.shape == (TINY.n_flow, grid.n_steps + 1)
    # equilibrium schedules come from the configured grids
    assert set(np.unique(res.params.eta)) <= set(TINY.eta_grid)
    assert set(np.unique(res.params.wage)) <= set(TINY.wage_grid)
    assert res.params.lambda_weights.max() == 1.0  # point mass
    # the flow should have dispersed away from the degenerate start
    assert np.std(res.flow.samples[:, -1]) > 0.01


def test_fixed_point_deterministic(tiny_equilibrium):
    grid, res = tiny_equilibrium
    res2 = fixed_point(COST, U, TINY, grid, seed=404)
    assert res2.value == res.value
    assert res2.residuals == res.residuals
    np.testing.assert_array_equal(res2.flow.samples, res.flow.samples)


def test_posthoc_defect_small_at_equilibrium(tiny_equilibrium):
    grid, res = tiny_equilibrium
    chk = best_response_defect(res, COST, U, TINY, seed=404)
    assert chk.defect >= 0.0
    assert chk.defect <= 2.0 * chk.stderr + 1e-9
    assert chk.br_value >= chk.eq_value


def test_fixed_point_warns_when_cut_short():
    grid = TimeGrid(T=1.0, n_steps=20)
    cfg = MfgConfig(
        support=TINY.support, eta_grid=TINY.eta_grid, wage_grid=TINY.wage_grid,
        n_blocks=2, n_flow=256, n_value_paths=512, max_iters=1,
    )
    with pytest.warns(UserWarning, match="fixed point stopped"):
        res = fixed_point(COST, U, cfg, grid, seed=404)
    assert not res.converged
    assert len(res.residuals) == 1
