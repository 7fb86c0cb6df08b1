"""Command-line interface: strict JSON configs in, reproducible artifacts out.

Subcommands: cost-check, solve-agent, simulate, solve-mfg, chaos-sweep,
value-convergence.  Every run is a pure function of (config, seeds): outputs
are byte-stable, a manifest.json names each file with its digest, and
--threads changes wall time only.  Exit codes: 0 success, 1 a quality
threshold failed, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .agent_bsde import (
    PicardConvergenceError,
    RegressionError,
    solution_to_csv_bytes,
    solve_nplayer,
)
from .chaos_experiments import (
    ExperimentFailure,
    attach_lemma,
    chaos_sweep,
    json_bytes,
    lemma_estimates_check,
    report,
    value_convergence,
)
from .config import ConfigError, ExperimentConfig
from .cost_model import argmax_intensity, conjugate, cost as cost_fn, verify_conjugacy
from .mfg_solver import EquilibriumResult, fixed_point
from .stochastic_core import (
    derive_seed,
    flow_metadata,
    flow_to_csv_bytes,
    generate_brownian,
)
from .switching_simulator import (
    DeterministicContracts,
    GridTooCoarseError,
    OptimalSwitchPolicy,
    agent_value_mc,
    simulate_switching,
    trajectory_to_csv_bytes,
)

OUT_ENV = "SWITCHMFG_OUT"


class ThresholdFailure(RuntimeError):
    """A quality gate failed; the run completed but does not meet its bar."""


class _Writer:
    """Collects output files under out_dir and finishes with a manifest."""

    def __init__(self, out_dir: str) -> None:
        self.out_dir = out_dir
        self.files: list[dict] = []
        os.makedirs(out_dir, exist_ok=True)

    def write(self, name: str, data: bytes) -> str:
        path = os.path.join(self.out_dir, name)
        with open(path, "wb") as fh:
            fh.write(data)
        self._record(name, data)
        return path

    def record_existing(self, path: str) -> None:
        with open(path, "rb") as fh:
            data = fh.read()
        self._record(os.path.relpath(path, self.out_dir), data)

    def _record(self, name: str, data: bytes) -> None:
        self.files = [f for f in self.files if f["name"] != name]
        self.files.append(
            {"name": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}
        )

    def finish(self, command: str, cfg: ExperimentConfig) -> str:
        manifest = {
            "command": command,
            "config": cfg.echo(),
            "config_hash": cfg.hash,
            "format": cfg.format,
            "seeds": cfg.seeds.to_dict(),
            "files": sorted(self.files, key=lambda f: f["name"]),
        }
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "wb") as fh:
            fh.write((json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())
        return path


# ---------------------------------------------------------------------------
# contracts files (solve-agent / simulate fixtures)

_CONTRACT_DEFAULTS = {
    "xi": None,
    "wage": None,
    "i0": 0,
    "n_paths": 2048,
    "n_sims": 20000,
    "oracle_y0": None,
    "oracle_tol": 1e-2,
    "export_paths": 16,
    "export_sims": 50,
}


def load_contracts(path: str, n_steps: int) -> dict:
    """Deterministic-contract fixture: per-player terminals and wage schedules."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"contracts file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"contracts file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("contracts file must hold a JSON object")
    unknown = sorted(set(payload) - set(_CONTRACT_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown contracts key(s): {', '.join(unknown)}")
    spec = {**_CONTRACT_DEFAULTS, **payload}
    if spec["xi"] is None or spec["wage"] is None:
        raise ConfigError("contracts file must define xi and wage")
    xi = np.asarray(spec["xi"], dtype=float)
    if xi.ndim != 1 or xi.size < 2:
        raise ConfigError("xi must list one terminal payment per player (>= 2 players)")
    wage_in = spec["wage"]
    if not isinstance(wage_in, list) or len(wage_in) != xi.size:
        raise ConfigError("wage must list one entry per player")
    rows = [np.broadcast_to(np.asarray(w, dtype=float), (n_steps,)) for w in wage_in]
    wage = np.stack(rows)
    if not (0 <= int(spec["i0"]) < xi.size):
        raise ConfigError(f"i0 must name a player in [0, {xi.size})")
    oracle = spec["oracle_y0"]
    if oracle is not None:
        oracle = np.asarray(oracle, dtype=float)
        if oracle.shape != xi.shape:
            raise ConfigError("oracle_y0 must list one value per player")
    spec.update(xi=xi, wage=wage, oracle_y0=oracle, i0=int(spec["i0"]))
    return spec


# ---------------------------------------------------------------------------
# subcommands


def cmd_cost_check(cfg: ExperimentConfig, args) -> int:
    y = np.linspace(-3.0, 3.0, 601)
    rep = verify_conjugacy(cfg.cost, y, a_step=args.a_step)
    a_star = argmax_intensity(cfg.cost, y)
    fy_gap = float(np.max(np.abs(a_star * y - cost_fn(cfg.cost, a_star) - conjugate(cfg.cost, y))))
    passed = rep["max_gap"] <= args.threshold
    payload = {
        "kind": "cost_check",
        "kappa": cfg.cost.kappa,
        "a_max": cfg.cost.a_max,
        "a_step": args.a_step,
        "y_grid": {"min": -3.0, "max": 3.0, "points": int(y.size)},
        "max_gap": rep["max_gap"],
        "max_lipschitz_ratio": rep["max_lipschitz_ratio"],
        "fenchel_young_gap": fy_gap,
        "threshold": args.threshold,
        "passed": passed,
    }
    if cfg.format == "json":
        print(json.dumps(payload, sort_keys=True))
    else:
        print(f"cost check: kappa={cfg.cost.kappa:g} a_max={cfg.cost.a_max:g}")
        print(f"  max_gap             = {rep['max_gap']:.6g} (threshold {args.threshold:g})")
        print(f"  max_lipschitz_ratio = {rep['max_lipschitz_ratio']:.6g}")
        print(f"  fenchel_young_gap   = {fy_gap:.6g}")
        print("  PASS" if passed else "  FAIL: max_gap above threshold")
    return 0 if passed else 1


def _solve_contract_system(cfg: ExperimentConfig, spec: dict):
    n = spec["xi"].size
    bundle = generate_brownian(cfg.seeds.brownian, spec["n_paths"], cfg.grid, dims=n)
    xi = np.broadcast_to(spec["xi"][:, None], (n, spec["n_paths"]))
    sol = solve_nplayer(xi, spec["wage"], bundle, cfg.cost, reg=cfg.regression)
    return sol, bundle


def cmd_solve_agent(cfg: ExperimentConfig, args) -> int:
    spec = load_contracts(args.contracts, cfg.grid.n_steps)
    sol, _ = _solve_contract_system(cfg, spec)
    y0 = sol.y[:, :, 0].mean(axis=1)

    n = spec["xi"].size
    bank = DeterministicContracts(spec["xi"], spec["wage"])
    mc_bundle = generate_brownian(
        derive_seed(cfg.seeds.brownian, 1), spec["n_sims"], cfg.grid, dims=n
    )
    estimate, stderr = agent_value_mc(
        sol, bank, spec["i0"], mc_bundle, cfg.cost, seed_jumps=cfg.seeds.jumps
    )
    z = abs(estimate - y0[spec["i0"]]) / max(stderr, 1e-300)

    checks = {"mc_z_score": z, "mc_sigma": args.sigma, "mc_ok": bool(z <= args.sigma)}
    if spec["oracle_y0"] is not None:
        err = float(np.max(np.abs(y0 - spec["oracle_y0"])))
        checks.update(
            oracle_y0=spec["oracle_y0"].tolist(),
            max_oracle_error=err,
            oracle_tol=spec["oracle_tol"],
            oracle_ok=bool(err <= spec["oracle_tol"]),
        )
    passed = checks["mc_ok"] and checks.get("oracle_ok", True)

    writer = _Writer(cfg.out_dir)
    writer.write("solution.csv", solution_to_csv_bytes(sol, max_paths=spec["export_paths"]))
    writer.write(
        "value_check.json",
        json_bytes(
            {
                "kind": "agent_value_check",
                "estimate": estimate,
                "stderr": stderr,
                "n_sims": spec["n_sims"],
                "seeds": {"brownian": cfg.seeds.brownian, "jumps": cfg.seeds.jumps},
                "i0": spec["i0"],
                "y0": y0.tolist(),
                "picard_iterations": len(sol.picard_residuals),
                "passed": passed,
                **checks,
            }
        ),
    )
    writer.finish("solve-agent", cfg)
    for i, v in enumerate(y0):
        print(f"Y0[{i}] = {v:.6g}")
    print(f"agent value MC: {estimate:.6g} +/- {stderr:.2g} (z = {z:.2f})")
    if spec["oracle_y0"] is not None:
        print(
            f"oracle check: max |Y0 - oracle| = {checks['max_oracle_error']:.3g} "
            f"(tol {spec['oracle_tol']:g})"
        )
    if not passed:
        print("FAIL: solution does not match its cross-checks")
        return 1
    return 0


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    spec = load_contracts(args.contracts, cfg.grid.n_steps)
    sol, _ = _solve_contract_system(cfg, spec)
    n = spec["xi"].size
    mc_bundle = generate_brownian(
        derive_seed(cfg.seeds.brownian, 2), spec["n_sims"], cfg.grid, dims=n
    )
    policy = OptimalSwitchPolicy(sol, cfg.cost)
    traj = simulate_switching(policy, spec["i0"], mc_bundle, seed_jumps=cfg.seeds.jumps)

    jumps = traj.n_jumps()
    occupations = [float(traj.time_in(i).mean() / cfg.grid.T) for i in range(n)]
    terminal = [float(np.mean(traj.regimes[:, -1] == i)) for i in range(n)]
    stats = {
        "kind": "simulate_stats",
        "n_sims": spec["n_sims"],
        "i0": spec["i0"],
        "seeds": {"brownian": cfg.seeds.brownian, "jumps": cfg.seeds.jumps},
        "mean_jumps": float(jumps.mean()),
        "jump_fraction": float(np.mean(jumps > 0)),
        "occupation_fractions": occupations,
        "terminal_regime_fractions": terminal,
        "mean_terminal_x": traj.x[:, -1, :].mean(axis=0).tolist(),
    }
    writer = _Writer(cfg.out_dir)
    writer.write("trajectories.csv", trajectory_to_csv_bytes(traj, max_sims=spec["export_sims"]))
    writer.write("simulate_stats.json", json_bytes(stats))
    writer.finish("simulate", cfg)
    print(
        f"simulated {spec['n_sims']} paths from regime {spec['i0']}: "
        f"mean jumps {stats['mean_jumps']:.3g}, "
        f"jump fraction {stats['jump_fraction']:.3g}"
    )
    print("terminal regime fractions:", " ".join(f"{v:.3g}" for v in terminal))
    return 0


def _write_equilibrium(writer: _Writer, eq: EquilibriumResult, cfg: ExperimentConfig) -> None:
    payload = {**eq.to_dict(), "seeds": cfg.seeds.to_dict(), "config_echo": cfg.echo()}
    # full-precision floats: this file is reloaded to drive further experiments
    writer.write(
        "equilibrium.json", (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode()
    )
    writer.write("flow.csv", flow_to_csv_bytes(eq.flow))
    writer.write(
        "flow_meta.json", json_bytes(flow_metadata(eq.flow, cfg.seeds.master))
    )
    lines = ["iteration,residual"]
    lines.extend(f"{i + 1},{r:.12g}" for i, r in enumerate(eq.residuals))
    writer.write("residuals.csv", ("\n".join(lines) + "\n").encode())


def load_equilibrium(path: str) -> EquilibriumResult:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"equilibrium file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"equilibrium file {path} is not valid JSON: {exc}") from exc
    try:
        return EquilibriumResult.from_dict(payload)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"equilibrium file {path} is malformed: {exc}") from exc


def cmd_solve_mfg(cfg: ExperimentConfig, args) -> int:
    eq = fixed_point(cfg.cost, cfg.utility, cfg.mfg, cfg.grid, seed=cfg.seeds.master)
    writer = _Writer(cfg.out_dir)
    _write_equilibrium(writer, eq, cfg)
    writer.finish("solve-mfg", cfg)
    last = eq.residuals[-1] if eq.residuals else float("nan")
    print(
        f"fixed point: converged={str(eq.converged).lower()} "
        f"iterations={eq.iterations} residual={last:.6g}"
    )
    print(
        f"contract: atom {eq.params.lambda_support[eq.atom_idx]:g}, "
        f"value {eq.value:.6g} +/- {eq.value_stderr:.2g}"
    )
    return 0


def _obtain_equilibrium(cfg: ExperimentConfig, args, writer: _Writer) -> EquilibriumResult:
    if args.equilibrium is not None:
        return load_equilibrium(args.equilibrium)
    eq = fixed_point(cfg.cost, cfg.utility, cfg.mfg, cfg.grid, seed=cfg.seeds.master)
    _write_equilibrium(writer, eq, cfg)
    return eq


def cmd_chaos_sweep(cfg: ExperimentConfig, args) -> int:
    writer = _Writer(cfg.out_dir)
    eq = _obtain_equilibrium(cfg, args, writer)
    rep = chaos_sweep(
        list(cfg.sweep.n_list),
        cfg.sweep.reps,
        eq,
        cfg.cost,
        cfg.sweep.chaos,
        seed=cfg.seeds.master,
        threads=args.threads,
    )
    if cfg.sweep.lemma_n_list:
        rows = []
        for n in cfg.sweep.lemma_n_list:
            rows.extend(
                lemma_estimates_check(
                    n, cfg.sweep.lemma_reps, eq, cfg.cost, cfg.sweep.chaos,
                    seed=cfg.seeds.master, threads=args.threads,
                )
            )
        rep = attach_lemma(rep, rows)
    for path in report(rep, cfg.format, cfg.out_dir):
        writer.record_existing(path)
    writer.finish("chaos-sweep", cfg)
    for row in rep.rows:
        print(f"n={row.n:4d}  mean d^2 = {row.mean_d2_system:.6g} ({row.estimator})")
    print(f"spearman(n, mean d^2) = {rep.spearman:.4f}  floor = {rep.floor:.6g}")
    if rep.spearman > args.spearman_threshold:
        print(
            f"FAIL: spearman {rep.spearman:.4f} above threshold "
            f"{args.spearman_threshold:g} (distances are not decreasing in n)"
        )
        return 1
    return 0


def cmd_value_convergence(cfg: ExperimentConfig, args) -> int:
    writer = _Writer(cfg.out_dir)
    eq = _obtain_equilibrium(cfg, args, writer)
    rep = value_convergence(
        list(cfg.sweep.n_list),
        cfg.sweep.reps,
        eq,
        cfg.cost,
        cfg.utility,
        cfg.sweep.chaos,
        seed=cfg.seeds.master,
        threads=args.threads,
    )
    for path in report(rep, cfg.format, cfg.out_dir):
        writer.record_existing(path)
    writer.finish("value-convergence", cfg)
    for row in rep.rows:
        print(
            f"n={row.n:4d}  V = {row.v_weighted:.6g} +/- {row.stderr_weighted:.2g}  "
            f"gap = {row.gap:.6g}"
        )
    print(f"mean-field value {rep.eq_value:.6g} (cap active on {rep.mf_cap_fraction:.0%})")
    if len(rep.rows) > 1 and rep.rows[-1].gap >= rep.rows[0].gap:
        print(
            f"FAIL: gap at n={rep.rows[-1].n} ({rep.rows[-1].gap:.6g}) did not improve "
            f"on n={rep.rows[0].n} ({rep.rows[0].gap:.6g})"
        )
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="switchmfg",
        description="Principal-switching laboratory: BSDE systems, switching "
        "simulation, mean-field equilibria, and convergence experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; defaults apply if omitted")
        p.add_argument("--out-dir", help="output directory (overrides config and env)")
        p.add_argument("--format", choices=["csv", "json"], help="report format override")
        p.add_argument("--threads", type=int, default=1, help="worker cap; never changes results")

    p = sub.add_parser("cost-check", help="verify the effort-cost conjugate closed forms")
    common(p)
    p.add_argument("--threshold", type=float, default=5e-4)
    p.add_argument("--a-step", type=float, default=1e-3)

    p = sub.add_parser("solve-agent", help="solve a deterministic-contract system and cross-check")
    common(p)
    p.add_argument("--contracts", required=True, help="contracts JSON file")
    p.add_argument("--sigma", type=float, default=4.0, help="MC agreement threshold in stderrs")

    p = sub.add_parser("simulate", help="simulate optimal switching for a contract system")
    common(p)
    p.add_argument("--contracts", required=True, help="contracts JSON file")

    p = sub.add_parser("solve-mfg", help="solve the contract-competition fixed point")
    common(p)
    p.add_argument("--max-iters", type=int, default=None, help="override mfg.max_iters")

    p = sub.add_parser("chaos-sweep", help="empirical-measure convergence experiment")
    common(p)
    p.add_argument("--equilibrium", help="equilibrium.json to reuse instead of solving")
    p.add_argument("--spearman-threshold", type=float, default=-0.8)

    p = sub.add_parser("value-convergence", help="principal-value convergence experiment")
    common(p)
    p.add_argument("--equilibrium", help="equilibrium.json to reuse instead of solving")

    return parser


def parse_overrides(extras: list[str]) -> list[tuple[str, str]]:
    """Turn leftover --key.path=value tokens into config overrides."""
    out = []
    for token in extras:
        body = token[2:] if token.startswith("--") else None
        if body and "=" in body:
            dotted, _, text = body.partition("=")
            if dotted and all(c.isalnum() or c in "._" for c in dotted):
                out.append((dotted, text))
                continue
        raise ConfigError(f"unrecognized argument: {token}")
    return out


_COMMANDS = {
    "cost-check": cmd_cost_check,
    "solve-agent": cmd_solve_agent,
    "simulate": cmd_simulate,
    "solve-mfg": cmd_solve_mfg,
    "chaos-sweep": cmd_chaos_sweep,
    "value-convergence": cmd_value_convergence,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        overrides = parse_overrides(extras)
        if getattr(args, "max_iters", None) is not None:
            overrides.append(("mfg.max_iters", str(args.max_iters)))
        if args.format is not None:
            overrides.append(("format", args.format))
        cfg = ExperimentConfig.load(args.config, overrides)
        out_dir = args.out_dir or os.environ.get(OUT_ENV) or cfg.out_dir
        if out_dir != cfg.out_dir:
            resolved = dict(cfg.raw, out_dir=out_dir)
            cfg = ExperimentConfig.from_raw(resolved)
        if args.threads < 1:
            raise ConfigError("--threads must be a positive integer")
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, GridTooCoarseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ExperimentFailure, PicardConvergenceError, RegressionError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
