"""Convergence studies: finite switching systems against their mean-field limit.

Two experiments plus one diagnostic, all driven by an equilibrium contract:

* chaos_sweep — solves the n-player promised-value system for n independent
  copies of the equilibrium contract and measures the path-space Wasserstein
  distance between the players' empirical measure and a fixed reference
  sample of the limit flow; the distance should fall as n grows.
* lemma_estimates_check — per-replication ratios between the coupled
  system/limit deviations (sup |dY|^2, int |dZ|^2) and the integrated
  empirical-measure distance they are classically bounded by.
* value_convergence — the representative principal's value in the n-player
  system against the mean-field equilibrium value.

All Brownian sampling is done under the driftless reference measure, the
same convention the backward solver regresses under.
"""
from __future__ import annotations

import csv
import io
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scipy_stats

from .cost_model import CostSpec
from .stochastic_core import (
    PathBundle,
    TimeGrid,
    derive_seed,
    generate_brownian,
    w2_path_coupled,
    w2_path_exact,
)
from .agent_bsde import (
    PicardConvergenceError,
    RegressionConfig,
    RegressionError,
    build_meanfield_contract,
    deviation_volatility,
    marginal_tables,
    solve_nplayer,
)
from .switching_simulator import (
    MeanFieldContracts,
    UtilitySpec,
    principal_value_direct,
    principal_value_weighted,
)
from .mfg_solver import EquilibriumResult, principal_objective

DEGENERATE = "degenerate"


class ExperimentFailure(RuntimeError):
    """Raised when too many replications fail to produce estimates."""


def _ordered_map(fn, items, threads: int) -> list:
    """Map fn over items with results in input order.

    Every item is seeded independently and fn is pure, so the thread count
    changes wall time only — never a single output byte.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class ChaosConfig:
    """Monte Carlo sizes for the convergence experiments.

    ref_size is the sample count representing the limit flow (recorded in
    every report); exact_cap bounds the assignment-problem size, above which
    the index-coupled upper bound is reported instead; eval_paths and
    lemma_ref keep the per-step distance integrals affordable.  The lemma
    cells draw lemma_paths_per_n * n Monte Carlo paths: the least-squares
    noise floor in the deviation numerators scales like n/paths (one
    regression target per noise coordinate), so comparing ratios across n
    requires the estimator accuracy to be n-uniform.
    """

    n_paths: int = 512
    ref_size: int = 1024
    exact_cap: int = 1024
    eval_paths: int = 16
    lemma_ref: int = 128
    lemma_paths_per_n: int = 256
    mf_value_paths: int = 4096
    max_failure_rate: float = 0.1
    regression: RegressionConfig = RegressionConfig()

    def __post_init__(self) -> None:
        if self.n_paths < 2 or self.ref_size < 2:
            raise ValueError("n_paths and ref_size must be at least 2")
        if not (0 <= self.max_failure_rate < 1):
            raise ValueError("max_failure_rate must lie in [0, 1)")


def reference_sample(
    eq: EquilibriumResult, cost: CostSpec, config: ChaosConfig, seed: int
) -> np.ndarray:
    """Fresh driftless sample of the limit contract's promised-value paths."""
    grid = eq.flow.grid
    tables = marginal_tables(cost, eq.flow)
    bundle = generate_brownian(derive_seed(seed, 0xA0), config.ref_size, grid, dims=1)
    draw = build_meanfield_contract(
        eq.params, tables, bundle, cost, dim=0, y0_seed=derive_seed(seed, 0xA1)
    )
    return draw.y


def reference_floor(ref: np.ndarray, cap: int) -> float:
    """Half-vs-half squared distance: the reference sample's own resolution."""
    half = ref.shape[0] // 2
    return _path_distance2(ref[:half], ref[half : 2 * half], 0, cap)[0]


def _path_distance2(paths: np.ndarray, ref: np.ndarray, from_step: int, cap: int):
    """Squared path-space distance to the reference, tagged exact or coupled.

    The exact assignment needs the larger set to be a multiple of the smaller,
    so the reference is truncated to the nearest multiple (a few atoms at
    most); above the cap an index-coupled upper bound is reported instead.
    """
    n_paths = paths.shape[0]
    keep = max((ref.shape[0] // n_paths) * n_paths, n_paths)
    ref = ref[:keep]
    size = max(n_paths, ref.shape[0])
    if size <= cap:
        return w2_path_exact(paths, ref, from_step, cap=size) ** 2, "exact"
    reps = ref.shape[0] // n_paths
    return w2_path_coupled(np.repeat(paths, reps, axis=0), ref, from_step) ** 2, "coupled"


def _solve_copies(eq, tables, cost, config, bundle, cell_seed):
    """n iid contract copies on the bundle's coordinates + the coupled solve."""
    n = bundle.dims
    grid = bundle.grid
    draws = [
        build_meanfield_contract(
            eq.params, tables, bundle, cost, dim=i,
            y0_seed=derive_seed(cell_seed, 2, i),
        )
        for i in range(n)
    ]
    ybar = np.stack([d.y for d in draws])  # (n, paths, knots)
    xi = ybar[:, :, -1]
    wage = np.broadcast_to(eq.params.wage, (n, grid.n_steps))
    # the terminal payments are path functionals (promised-value recursions),
    # so the copies themselves — not the raw output level — are the Markov
    # state the system's value function depends on; regress on them
    sol = solve_nplayer(
        xi, wage, bundle, cost, reg=config.regression,
        y_init=ybar,  # the iid copies are an excellent Picard warm start
        states=ybar.transpose(1, 2, 0),
    )
    return sol, ybar


def _coupling_deviations(sol, ybar, bundle, reg):
    """Per (player, path): sup_k |dY_k|^2 and sum_k |dZ_k|^2 dt against the copies."""
    dy = sol.y - ybar
    sup_dy2 = np.max(dy * dy, axis=2)
    dz2 = deviation_volatility(sol, ybar, bundle, reg, states=ybar.transpose(1, 2, 0))
    int_dz2 = dz2.sum(axis=2) * sol.grid.dt
    return sup_dy2, int_dz2


@dataclass
class ChaosRow:
    n: int
    replications: int
    failures: int
    mean_d2_system: float
    stderr_d2_system: float
    mean_d2_iid: float
    estimator: str
    mean_sup_dy2: float
    mean_int_dz2: float
    ratio_y_median: float | None = None
    ratio_z_median: float | None = None


@dataclass
class LemmaRow:
    n: int
    rep: int
    sup_dy2: float
    int_dz2: float
    rhs_integral: float
    ratio_y: float | None
    ratio_z: float | None
    degenerate: bool


@dataclass
class ChaosReport:
    rows: list[ChaosRow]
    lemma_rows: list[LemmaRow]
    spearman: float
    floor: float
    ref_size: int
    seed: int
    grid_T: float
    grid_steps: int
    failures: list[str] = field(default_factory=list)
    measure: str = "driftless"

    CSV_HEADER = [
        "n", "replications", "failures", "mean_d2_system", "stderr_d2_system",
        "mean_d2_iid", "estimator", "mean_sup_dy2", "mean_int_dz2",
        "ratio_y_median", "ratio_z_median",
    ]
    LEMMA_HEADER = [
        "n", "rep", "sup_dy2", "int_dz2", "rhs_integral", "ratio_y", "ratio_z",
        "degenerate",
    ]

    def to_dict(self) -> dict:
        return {
            "kind": "chaos_report",
            "measure": self.measure,
            "grid": {"T": self.grid_T, "n_steps": self.grid_steps},
            "seed": self.seed,
            "ref_size": self.ref_size,
            "floor": self.floor,
            "spearman": self.spearman,
            "failures": list(self.failures),
            "rows": [row.__dict__.copy() for row in self.rows],
            "lemma_rows": [row.__dict__.copy() for row in self.lemma_rows],
        }


def chaos_sweep(
    n_list: list[int],
    reps: int,
    eq: EquilibriumResult,
    cost: CostSpec,
    config: ChaosConfig,
    seed: int,
    threads: int = 1,
) -> ChaosReport:
    """Distance of the n-player empirical measure to the limit flow, per n.

    For each (n, rep) cell — seeded independently so any cell reproduces in
    isolation and the cells can run on any number of threads without
    changing a byte of output — n copies of the equilibrium contract are
    drawn on fresh Brownian coordinates, the coupled system is solved, and
    the squared path-space distance of the realized player paths (first
    Monte Carlo path) to the reference sample is recorded, alongside the
    same distance for the decoupled iid copies.
    """
    if list(n_list) != sorted(set(int(n) for n in n_list)) or min(n_list) < 2:
        raise ValueError("n_list must be ascending distinct integers >= 2")
    grid = eq.flow.grid
    tables = marginal_tables(cost, eq.flow)
    ref = reference_sample(eq, cost, config, seed)
    floor = reference_floor(ref, config.exact_cap)

    def run_cell(key):
        n, rep = key
        cell = derive_seed(seed, n, rep)
        bundle = generate_brownian(derive_seed(cell, 1), config.n_paths, grid, dims=n)
        try:
            sol, ybar = _solve_copies(eq, tables, cost, config, bundle, cell)
        except (PicardConvergenceError, RegressionError) as exc:
            return None, f"n={n} rep={rep}: {exc}"
        d2, kind = _path_distance2(sol.y[:, 0, :], ref, 0, config.exact_cap)
        d2i, _ = _path_distance2(ybar[:, 0, :], ref, 0, config.exact_cap)
        sup_dy2, int_dz2 = _coupling_deviations(sol, ybar, bundle, config.regression)
        return (d2, d2i, kind, float(sup_dy2.mean()), float(int_dz2.mean())), None

    keys = [(n, rep) for n in n_list for rep in range(reps)]
    cells = dict(zip(keys, _ordered_map(run_cell, keys, threads)))

    rows: list[ChaosRow] = []
    failures: list[str] = []
    for n in n_list:
        d2_sys, d2_iid, kinds = [], [], []
        sup_all, dz_all = [], []
        n_failed = 0
        for rep in range(reps):
            got, err = cells[(n, rep)]
            if got is None:
                n_failed += 1
                failures.append(err)
                continue
            d2, d2i, kind, sup_mean, dz_mean = got
            d2_sys.append(d2)
            d2_iid.append(d2i)
            kinds.append(kind)
            sup_all.append(sup_mean)
            dz_all.append(dz_mean)
        if n_failed > config.max_failure_rate * reps:
            raise ExperimentFailure(
                f"{n_failed}/{reps} replications failed at n={n}: refusing to average"
            )
        d2_sys = np.asarray(d2_sys)
        rows.append(
            ChaosRow(
                n=int(n),
                replications=reps,
                failures=n_failed,
                mean_d2_system=float(d2_sys.mean()),
                stderr_d2_system=float(d2_sys.std(ddof=0) / np.sqrt(d2_sys.size)),
                mean_d2_iid=float(np.mean(d2_iid)),
                estimator="exact" if all(k == "exact" for k in kinds) else "coupled",
                mean_sup_dy2=float(np.mean(sup_all)),
                mean_int_dz2=float(np.mean(dz_all)),
            )
        )
    if len(rows) > 1:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # constant input raises a warning, handled below
            spear = float(
                _scipy_stats.spearmanr(
                    [row.n for row in rows], [row.mean_d2_system for row in rows]
                ).statistic
            )
        if not np.isfinite(spear):
            spear = 0.0  # a flat distance profile carries no trend evidence
    else:
        spear = 0.0
    return ChaosReport(
        rows=rows,
        lemma_rows=[],
        spearman=spear,
        floor=floor,
        ref_size=config.ref_size,
        seed=int(seed),
        grid_T=grid.T,
        grid_steps=grid.n_steps,
        failures=failures,
    )


def lemma_estimates_check(
    n: int,
    reps: int,
    eq: EquilibriumResult,
    cost: CostSpec,
    config: ChaosConfig,
    seed: int,
    threads: int = 1,
) -> list[LemmaRow]:
    """Per-replication ratios of coupled deviations to the distance integral.

    sup-deviation of Y and the integrated squared Z-deviation are each
    divided by E[int_0^T d_u^2(p^n, p*) du] (the Z ratio with the extra
    1/n^2 allowance); cells reuse the chaos_sweep seeding so each is
    reproducible in isolation.  Near-zero numerator and denominator are
    reported as degenerate rather than as a ratio.
    """
    grid = eq.flow.grid
    tables = marginal_tables(cost, eq.flow)
    ref = reference_sample(eq, cost, config, seed)[: config.lemma_ref]
    n_paths = config.lemma_paths_per_n * n

    def run_rep(rep: int) -> LemmaRow:
        cell = derive_seed(seed, n, rep)
        bundle = generate_brownian(derive_seed(cell, 1), n_paths, grid, dims=n)
        sol, ybar = _solve_copies(eq, tables, cost, config, bundle, cell)
        m = min(config.eval_paths, n_paths)
        sup_dy2, int_dz2 = _coupling_deviations(sol, ybar, bundle, config.regression)
        numer_y = float(sup_dy2.mean())
        numer_z = float(int_dz2.mean())

        d2_u = np.empty((m, grid.n_steps + 1))
        for p in range(m):
            player_paths = sol.y[:, p, :]
            for u in range(grid.n_steps + 1):
                d2_u[p, u] = _path_distance2(player_paths, ref, u, config.exact_cap)[0]
        rhs = float(np.trapezoid(d2_u, dx=grid.dt, axis=1).mean())

        degenerate = rhs < 1e-14 and numer_y < 1e-14 and numer_z < 1e-14
        return LemmaRow(
            n=int(n),
            rep=rep,
            sup_dy2=numer_y,
            int_dz2=numer_z,
            rhs_integral=rhs,
            ratio_y=None if degenerate else numer_y / rhs,
            ratio_z=None if degenerate else numer_z / (rhs + 1.0 / n**2),
            degenerate=degenerate,
        )

    return _ordered_map(run_rep, range(reps), threads)


def attach_lemma(report: ChaosReport, lemma_rows: list[LemmaRow]) -> ChaosReport:
    """Merge lemma ratios into the sweep rows (medians per matching n)."""
    report.lemma_rows = list(lemma_rows)
    for row in report.rows:
        ry = [r.ratio_y for r in lemma_rows if r.n == row.n and r.ratio_y is not None]
        rz = [r.ratio_z for r in lemma_rows if r.n == row.n and r.ratio_z is not None]
        row.ratio_y_median = float(np.median(ry)) if ry else None
        row.ratio_z_median = float(np.median(rz)) if rz else None
    return report


# ---------------------------------------------------------------------------
# principal-value convergence


@dataclass
class ValueRow:
    n: int
    replications: int
    failures: int
    v_weighted: float
    stderr_weighted: float
    v_direct: float
    stderr_direct: float
    gap: float
    cap_fraction: float


@dataclass
class ValueReport:
    rows: list[ValueRow]
    v_mf: float
    v_mf_stderr: float
    eq_value: float
    utility_cap: float
    mf_cap_fraction: float
    seed: int
    grid_T: float
    grid_steps: int
    failures: list[str] = field(default_factory=list)
    measure: str = "driftless"

    CSV_HEADER = [
        "n", "replications", "failures", "v_weighted", "stderr_weighted",
        "v_direct", "stderr_direct", "gap", "cap_fraction",
    ]

    def to_dict(self) -> dict:
        return {
            "kind": "value_report",
            "measure": self.measure,
            "grid": {"T": self.grid_T, "n_steps": self.grid_steps},
            "seed": self.seed,
            "v_mf": self.v_mf,
            "v_mf_stderr": self.v_mf_stderr,
            "eq_value": self.eq_value,
            "utility_cap": self.utility_cap,
            "mf_cap_fraction": self.mf_cap_fraction,
            "failures": list(self.failures),
            "rows": [row.__dict__.copy() for row in self.rows],
        }


def value_convergence(
    n_list: list[int],
    reps: int,
    eq: EquilibriumResult,
    cost: CostSpec,
    utility: UtilitySpec,
    config: ChaosConfig,
    seed: int,
    threads: int = 1,
) -> ValueReport:
    """Representative principal's value in the n-player system, per n.

    Replications share Brownian draws across n (the n-player system uses the
    first n coordinates of one wide bundle), so the per-n means are directly
    comparable; the weighted estimator fills the table and the direct
    simulation cross-checks it.  The gap column compares against the
    equilibrium's recorded value, so utility should be the same (typically
    bounded) utility the equilibrium was solved with; v_mf re-evaluates the
    equilibrium contract out of sample as a diagnostic, and the fraction of
    terminal payments clipped by the cap is recorded per n and for the
    benchmark.  Replications are independent, so threads parallelize over
    them without changing any output.
    """
    if min(n_list) < 2:
        raise ValueError("value convergence needs n >= 2")
    grid = eq.flow.grid
    tables = marginal_tables(cost, eq.flow)
    max_n = max(n_list)

    mf_bundle = generate_brownian(
        derive_seed(seed, 0xB0), config.mf_value_paths, grid, dims=1
    )
    v_mf, v_mf_se = principal_objective(eq.params, tables, mf_bundle, cost, utility)
    mf_draw = build_meanfield_contract(
        eq.params, tables, mf_bundle, cost, drift=1.0, dim=0,
        y0_seed=derive_seed(seed, 0xB1),
    )
    mf_cap_fraction = float(np.mean(mf_draw.y[:, -1] ** 2 >= utility.cap))

    def run_rep(rep: int):
        rep_seed = derive_seed(seed, 0xC0, rep)
        wide = generate_brownian(derive_seed(rep_seed, 1), config.n_paths, grid, dims=max_n)
        draws = [
            build_meanfield_contract(
                eq.params, tables, wide, cost, dim=i,
                y0_seed=derive_seed(rep_seed, 2, i),
            )
            for i in range(max_n)
        ]
        ybar = np.stack([d.y for d in draws])
        values: dict[int, tuple[float, float, float]] = {}
        errors: list[str] = []
        for n in n_list:
            bundle = PathBundle(
                grid=grid, seed=wide.seed, increments=wide.increments[:, :, :n]
            )
            xi = ybar[:n, :, -1]
            wage = np.broadcast_to(eq.params.wage, (n, grid.n_steps))
            mixed = int(np.count_nonzero(eq.params.lambda_weights > 1e-12)) > 1
            try:
                sol = solve_nplayer(
                    xi, wage, bundle, cost, reg=config.regression,
                    y0=ybar[:n, :, 0] if mixed else None,
                    y_init=ybar[:n],
                )
            except (PicardConvergenceError, RegressionError) as exc:
                errors.append(f"n={n} rep={rep}: {exc}")
                continue
            bank = MeanFieldContracts(
                params=eq.params, tables=tables, grid=grid, y0=ybar[:n, :, 0]
            )
            vw, _ = principal_value_weighted(0, sol, bank, utility, bundle, cost)
            vd, _ = principal_value_direct(
                0, sol, bank, utility, bundle, cost,
                seed_jumps=derive_seed(rep_seed, 3, n),
            )
            values[n] = (vw, vd, float(np.mean(xi[0] ** 2 >= utility.cap)))
        return values, errors

    per_n: dict[int, dict[str, list[float]]] = {
        n: {"w": [], "d": [], "cap": []} for n in n_list
    }
    failures: list[str] = []
    fail_counts = {n: 0 for n in n_list}
    for values, errors in _ordered_map(run_rep, range(reps), threads):
        failures.extend(errors)
        for n in n_list:
            if n not in values:
                fail_counts[n] += 1
                continue
            vw, vd, cap_frac = values[n]
            per_n[n]["w"].append(vw)
            per_n[n]["d"].append(vd)
            per_n[n]["cap"].append(cap_frac)

    rows = []
    for n in n_list:
        got = len(per_n[n]["w"])
        if fail_counts[n] > config.max_failure_rate * reps:
            raise ExperimentFailure(
                f"{fail_counts[n]}/{reps} replications failed at n={n}"
            )
        w = np.asarray(per_n[n]["w"])
        d = np.asarray(per_n[n]["d"])
        rows.append(
            ValueRow(
                n=int(n),
                replications=reps,
                failures=fail_counts[n],
                v_weighted=float(w.mean()),
                stderr_weighted=float(w.std(ddof=0) / np.sqrt(got)),
                v_direct=float(d.mean()),
                stderr_direct=float(d.std(ddof=0) / np.sqrt(got)),
                gap=float(abs(w.mean() - eq.value)),
                cap_fraction=float(np.mean(per_n[n]["cap"])),
            )
        )
    return ValueReport(
        rows=rows,
        v_mf=float(v_mf),
        v_mf_stderr=float(v_mf_se),
        eq_value=float(eq.value),
        utility_cap=float(utility.cap),
        mf_cap_fraction=mf_cap_fraction,
        seed=int(seed),
        grid_T=grid.T,
        grid_steps=grid.n_steps,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# bit-stable report files


def _fmt(value) -> str:
    if value is None:
        return DEGENERATE
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return "%.12g" % value
    return str(value)


def _round12(obj):
    """Recursively pin floats to 12 significant digits for stable files."""
    if isinstance(obj, float):
        return float("%.12g" % obj)
    if isinstance(obj, dict):
        return {k: _round12(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round12(v) for v in obj]
    return obj


def _csv_bytes(header: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode()


def json_bytes(payload: dict) -> bytes:
    return (json.dumps(_round12(payload), sort_keys=True, indent=2) + "\n").encode()


def report(results, fmt: str, out_dir: str) -> list[str]:
    """Write ChaosReport/ValueReport objects as bit-stable csv or json files.

    Same inputs produce byte-identical files: fixed column order, %.12g
    floats, sorted JSON keys, \\n line endings.  Returns the written paths.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    if not isinstance(results, (list, tuple)):
        results = [results]
    os.makedirs(out_dir, exist_ok=True)
    paths: list[str] = []

    def _write(name: str, data: bytes) -> None:
        path = os.path.join(out_dir, name)
        try:
            with open(path, "wb") as fh:
                fh.write(data)
        except OSError as exc:
            raise OSError(f"cannot write report file {path}: {exc}") from exc
        paths.append(path)

    for res in results:
        if isinstance(res, ChaosReport):
            if fmt == "json":
                _write("chaos_report.json", json_bytes(res.to_dict()))
            else:
                _write(
                    "chaos_report.csv",
                    _csv_bytes(
                        res.CSV_HEADER,
                        [[getattr(r, c) for c in res.CSV_HEADER] for r in res.rows],
                    ),
                )
                if res.lemma_rows:
                    _write(
                        "lemma_ratios.csv",
                        _csv_bytes(
                            res.LEMMA_HEADER,
                            [
                                [getattr(r, c) for c in res.LEMMA_HEADER]
                                for r in res.lemma_rows
                            ],
                        ),
                    )
        elif isinstance(res, ValueReport):
            if fmt == "json":
                _write("value_report.json", json_bytes(res.to_dict()))
            else:
                _write(
                    "value_report.csv",
                    _csv_bytes(
                        res.CSV_HEADER,
                        [[getattr(r, c) for c in res.CSV_HEADER] for r in res.rows],
                    ),
                )
        else:
            raise TypeError(f"cannot report object of type {type(res).__name__}")
    return paths
