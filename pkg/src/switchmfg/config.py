"""Strict experiment configuration: JSON in, typed specs out.

A config file may specify any subset of the keys in DEFAULTS; missing keys
take the defaults, unknown keys are rejected at every nesting level (typo
safety), and values must match the default's JSON type.  Command-line
overrides use dotted paths into the same tree ("mfg.max_iters=10").  The
config hash is a stable digest of the canonicalized resolved tree minus the
output directory, so runs writing to different places still identify as the
same experiment.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .agent_bsde import RegressionConfig
from .chaos_experiments import ChaosConfig
from .cost_model import CostSpec
from .mfg_solver import MfgConfig
from .stochastic_core import TimeGrid
from .switching_simulator import UtilitySpec


class ConfigError(ValueError):
    """Configuration rejected: unknown key, wrong type, or invalid value."""


UTILITY_FORMS = ("quadratic_capped",)

DEFAULTS: dict = {
    "cost": {"kappa": 1.0, "a_max": 2.0},
    "utility": {"cap": 1e6, "form": "quadratic_capped"},
    "grid": {"T": 1.0, "n_steps": 50},
    "regression": {"degree": 2, "ridge": 1e-10, "tol_picard": 1e-6, "max_picard": 50},
    "mfg": {
        "support": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
        "eta_grid": [0.05, 0.1, 0.2, 0.4, 0.8],
        "wage_grid": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        "n_blocks": 4,
        "n_flow": 1024,
        "n_value_paths": 4096,
        "theta": 0.5,
        "theta_min": 0.05,
        "tol_fp": 1e-3,
        "max_iters": 40,
        "max_sweeps": 6,
        "anneal_after": 3,
    },
    "sweep": {
        "n_list": [4, 8, 16, 32, 64],
        "reps": 20,
        "lemma_n_list": [],
        "lemma_reps": 20,
        "n_paths": 512,
        "ref_size": 1024,
        "exact_cap": 1024,
        "eval_paths": 16,
        "lemma_ref": 128,
        "lemma_paths_per_n": 256,
        "mf_value_paths": 4096,
        "max_failure_rate": 0.1,
    },
    "seeds": {"master": 777, "brownian": 1001, "jumps": 2002},
    "out_dir": "switchmfg_out",
    "format": "csv",
}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _merge(defaults: dict, given, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        listed = ", ".join(f"{path}{k}" for k in unknown)
        raise ConfigError(f"unknown config key(s): {listed}")
    out = {}
    for key, dflt in defaults.items():
        if key not in given:
            out[key] = copy.deepcopy(dflt)
        elif isinstance(dflt, dict):
            out[key] = _merge(dflt, given[key], f"{path}{key}.")
        elif _type_ok(dflt, given[key]):
            out[key] = copy.deepcopy(given[key])
        else:
            raise ConfigError(
                f"{path}{key} must be of type {type(dflt).__name__}, "
                f"got {type(given[key]).__name__}"
            )
    return out


def resolve(payload: dict | None = None) -> dict:
    """Defaults overlaid with the given payload, strictly validated."""
    return _merge(DEFAULTS, payload if payload is not None else {}, "")


def apply_override(resolved: dict, dotted: str, text: str) -> None:
    """Set a dotted path in a resolved tree; value parsed as JSON else string."""
    parts = dotted.split(".")
    node = resolved
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    current = node[leaf]
    if isinstance(current, dict):
        node[leaf] = _merge(current, value, dotted + ".")
    elif _type_ok(current, value):
        node[leaf] = value
    else:
        raise ConfigError(
            f"{dotted} must be of type {type(current).__name__}, "
            f"got {type(value).__name__}"
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(resolved: dict) -> str:
    """Digest of the experiment-relevant tree (output location excluded)."""
    core = {k: v for k, v in resolved.items() if k != "out_dir"}
    return hashlib.sha256(canonical_json(core).encode()).hexdigest()


@dataclass(frozen=True)
class Seeds:
    master: int
    brownian: int
    jumps: int

    def __post_init__(self) -> None:
        for name in ("master", "brownian", "jumps"):
            v = getattr(self, name)
            if not isinstance(v, int) or not (0 <= v < 2**64):
                raise ValueError(f"seed {name} must be an integer in [0, 2^64)")

    def to_dict(self) -> dict:
        return {"master": self.master, "brownian": self.brownian, "jumps": self.jumps}


@dataclass(frozen=True)
class SweepConfig:
    n_list: tuple
    reps: int
    lemma_n_list: tuple
    lemma_reps: int
    chaos: ChaosConfig

    def __post_init__(self) -> None:
        if self.reps < 1 or self.lemma_reps < 1:
            raise ValueError("reps and lemma_reps must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    """Typed view of a resolved config tree plus its canonical hash."""

    cost: CostSpec
    utility: UtilitySpec
    grid: TimeGrid
    regression: RegressionConfig
    mfg: MfgConfig
    sweep: SweepConfig
    seeds: Seeds
    out_dir: str
    format: str
    raw: dict
    hash: str

    @classmethod
    def from_raw(cls, resolved: dict) -> "ExperimentConfig":
        """Build the typed specs; any domain validation error is a ConfigError."""
        if resolved["format"] not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {resolved['format']!r}")
        if resolved["utility"]["form"] not in UTILITY_FORMS:
            raise ConfigError(
                f"utility.form must be one of {UTILITY_FORMS}, "
                f"got {resolved['utility']['form']!r}"
            )
        try:
            regression = RegressionConfig(**resolved["regression"])
            sweep_raw = resolved["sweep"]
            chaos = ChaosConfig(
                n_paths=sweep_raw["n_paths"],
                ref_size=sweep_raw["ref_size"],
                exact_cap=sweep_raw["exact_cap"],
                eval_paths=sweep_raw["eval_paths"],
                lemma_ref=sweep_raw["lemma_ref"],
                lemma_paths_per_n=sweep_raw["lemma_paths_per_n"],
                mf_value_paths=sweep_raw["mf_value_paths"],
                max_failure_rate=sweep_raw["max_failure_rate"],
                regression=regression,
            )
            return cls(
                cost=CostSpec(**resolved["cost"]),
                utility=UtilitySpec(cap=resolved["utility"]["cap"]),
                grid=TimeGrid(**resolved["grid"]),
                regression=regression,
                mfg=MfgConfig(
                    support=np.asarray(resolved["mfg"]["support"], dtype=float),
                    eta_grid=np.asarray(resolved["mfg"]["eta_grid"], dtype=float),
                    wage_grid=np.asarray(resolved["mfg"]["wage_grid"], dtype=float),
                    **{
                        k: v
                        for k, v in resolved["mfg"].items()
                        if k not in ("support", "eta_grid", "wage_grid")
                    },
                ),
                sweep=SweepConfig(
                    n_list=tuple(int(n) for n in sweep_raw["n_list"]),
                    reps=int(sweep_raw["reps"]),
                    lemma_n_list=tuple(int(n) for n in sweep_raw["lemma_n_list"]),
                    lemma_reps=int(sweep_raw["lemma_reps"]),
                    chaos=chaos,
                ),
                seeds=Seeds(**resolved["seeds"]),
                out_dir=str(resolved["out_dir"]),
                format=str(resolved["format"]),
                raw=resolved,
                hash=config_hash(resolved),
            )
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | None, overrides: list[tuple[str, str]] = ()) -> "ExperimentConfig":
        """Read a config file (defaults if None), apply dotted overrides, type it."""
        payload: dict | None = None
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    payload = json.load(fh)
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        resolved = resolve(payload)
        for dotted, text in overrides:
            apply_override(resolved, dotted, text)
        return cls.from_raw(resolved)

    def echo(self) -> dict:
        """The hashed view of the config (out_dir excluded), for manifests."""
        return {k: copy.deepcopy(v) for k, v in self.raw.items() if k != "out_dir"}
