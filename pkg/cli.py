"""
BRANCHCAP COMMAND LINE
======================
    python cli.py <subcommand> [options]

Subcommands: green, tree-size-law, hit-mc, escape-mc, solve, bcap,
snake-series, snake-shoot, snake-a0, riesz, scaling.

Settings resolve as built-in defaults < environment (BRANCHCAP_*, .env) <
INI config file (--config) < flags. Every run writes <command>.json, an
optional <command>.csv and manifest.json into the output directory.
"""

import argparse
import configparser
import json
import sys
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bcap import (BcapParams, adjoint_ratio_diag, bcap_all, bcap_far_field, bcap_harmonic, bcap_sum_escape,
                  one_step_hull)
from brw_mc import LatticeSet, RemainderPolicy, escape_probability, hit_probability
from exceptions import BranchcapError, ValidationError
from field_solver import (BoundaryPolicy, green_comparison, green_killed, identity_report, identity_targets,
                          inequality_report, solve_all)
from lattice import green_ray, green_table, make_step_law, second_order_kernel, second_order_table
from offspring import OffspringLaw, TreeBudget, make_offspring, tree_size_counts
from reference_data import ReferenceData
from riesz import DiscretizedCompact, RieszParams, interior_weight, richardson, riesz_capacity, riesz_sweep
from runtime import TableCache, __version__, env_default, get_logger, json_default, setup_logging
from scaling_limit import ScalingParams, run_scaling
from snake import find_a0, integral_identity_check, ode_residual, series_coefficients, shoot_radial

logger = get_logger("cli")

COMMANDS = ("green", "tree-size-law", "hit-mc", "escape-mc", "solve", "bcap", "snake-series",
            "snake-shoot", "snake-a0", "riesz", "scaling")
SCHEMA_VERSION = 1
PACKAGES = ("numpy", "scipy", "pandas", "joblib", "mpmath", "python-dotenv")
# Knobs with no effect on the numbers; echoed apart from the numeric config.
EXECUTION_ONLY = ("workers", "log_level", "log_file", "cache_dir", "no_cache", "out_dir", "config")


@dataclass
class RunConfig:
    command: str = ""
    d: int = 5
    offspring: str = "binary_critical"
    pmf: str = ""
    k_max: int = 12
    step: str = "simple"
    set_spec: str = "point:0"
    x: str = ""
    tree: str = "critical"
    # solver
    R_box: int = 12
    policy: str = "matched_asymptotic"
    tol: float = 1e-10
    solver_method: str = "newton"
    max_sweeps: int = 200_000
    identities: bool = False
    green_comparison: bool = False
    green_s: str = "4,8,16"
    # monte carlo
    samples: int = 20_000
    v_max: int = 200_000
    seed: int = 0
    block_size: int = 1000
    workers: int = 1
    engine: str = "batched"
    r_stop: float = 8.0
    safety_factor: float = 10.0
    bcap_upper_constant: float = 50.0
    lam: float = 2.0
    bcap_method: str = "all"
    mode: str = "solver"
    # green / tree sizes
    green_method: str = "fourier"
    order: int = 1
    n_min: int = 50
    n_max: int = 500
    # snake
    N: int = 400
    a0: float = 0.0
    t_probe: float = 1.01
    a0_tol: float = 1e-6
    t_far: float = 40.0
    t_grid: str = "1.05,1.1,1.5,2,3,5,10"
    # riesz
    gamma: float = 1.0
    riesz_set: str = "ball:1"
    h: float = 0.25
    riesz_tol: float = 1e-6
    richardson: bool = False
    sweep: bool = False
    # scaling
    rho: float = 1.0
    ladder: str = "1,2,4"
    scaling_method: str = "solver"
    a0_source: str = "series"
    # output
    out_dir: str = "results"
    cache_dir: str = ".branchcap_cache"
    no_cache: bool = False
    log_level: str = "INFO"
    log_file: str = ""
    config: str = ""

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ValidationError(f"Unknown command: {self.command}")
        if self.d < 1:
            raise ValidationError("d must be >= 1", {"d": self.d})
        positive = {"samples": self.samples, "v_max": self.v_max, "block_size": self.block_size,
                    "R_box": self.R_box, "N": self.N, "h": self.h, "rho": self.rho, "tol": self.tol}
        bad = {k: v for k, v in positive.items() if v <= 0}
        if bad:
            raise ValidationError("Parameters must be positive", bad)
        if self.seed < 0:
            raise ValidationError("seed must be non-negative", {"seed": self.seed})
        if self.lam <= 1.0:
            raise ValidationError("lambda must exceed 1", {"lambda": self.lam})
        if self.bcap_method not in ("sum", "far", "harmonic", "all"):
            raise ValidationError(f"Unknown bcap method: {self.bcap_method}")
        if self.mode not in ("mc", "solver"):
            raise ValidationError(f"Unknown mode: {self.mode}")
        if self.tree not in ("critical", "adjoint"):
            raise ValidationError(f"Unknown tree kind: {self.tree}")
        self.ladder_values()
        self.t_values()
        self.green_s_values()

    def ladder_values(self) -> List[int]:
        return _int_list(self.ladder, "ladder")

    def green_s_values(self) -> List[float]:
        try:
            values = [float(v) for v in self.green_s.split(",") if v.strip()]
        except ValueError:
            raise ValidationError("green_s must be comma-separated numbers", {"green_s": self.green_s})
        if any(v <= 0 for v in values):
            raise ValidationError("green_s values must be positive", {"green_s": self.green_s})
        return values

    def t_values(self) -> List[float]:
        try:
            return [float(v) for v in self.t_grid.split(",") if v.strip()]
        except ValueError:
            raise ValidationError("t_grid must be comma-separated numbers", {"t_grid": self.t_grid})

    def manifest_config(self) -> Dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if k not in EXECUTION_ONLY}

    def execution_settings(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in EXECUTION_ONLY}


def _int_list(text: str, name: str) -> List[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"{name} must be comma-separated integers", {name: text})


# INI section -> {key: RunConfig field}
CONFIG_KEYS: Dict[str, Dict[str, str]] = {
    "offspring": {"kind": "offspring", "pmf": "pmf", "k_max": "k_max"},
    "step": {"kind": "step", "d": "d"},
    "set": {"spec": "set_spec", "x": "x", "tree": "tree"},
    "solver": {"R_box": "R_box", "policy": "policy", "tol": "tol", "method": "solver_method",
               "max_sweeps": "max_sweeps", "green_method": "green_method", "green_s": "green_s"},
    "mc": {"samples": "samples", "v_max": "v_max", "seed": "seed", "block_size": "block_size",
           "workers": "workers", "engine": "engine", "r_stop": "r_stop", "safety_factor": "safety_factor",
           "bcap_upper_constant": "bcap_upper_constant", "lambda": "lam"},
    "snake": {"N": "N", "a0": "a0", "t_probe": "t_probe", "tolerance": "a0_tol", "t_far": "t_far",
              "grid": "t_grid"},
    "riesz": {"gamma": "gamma", "set": "riesz_set", "h": "h", "tol": "riesz_tol"},
    "scaling": {"rho": "rho", "ladder": "ladder", "method": "scaling_method", "a0_source": "a0_source"},
    "output": {"dir": "out_dir", "cache_dir": "cache_dir", "no_cache": "no_cache", "log_level": "log_level",
               "log_file": "log_file"},
}


def _cast(name: str, raw: Any) -> Any:
    default = getattr(RunConfig, name)
    if isinstance(raw, type(default)) and not (isinstance(default, bool) and not isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ValidationError(f"Bad value for {name}", {name: text})
    return text


def load_config_file(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ValidationError("Config file not found", {"path": path})
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as e:
        raise ValidationError("Config file could not be parsed", {"path": path, "error": str(e)})
    values: Dict[str, Any] = {}
    for section in parser.sections():
        keys = CONFIG_KEYS.get(section)
        if keys is None:
            raise ValidationError(f"Unknown config section [{section}]", {"path": path})
        for key, raw in parser.items(section):
            if key not in keys:
                raise ValidationError(f"Unknown key {key} in [{section}]", {"path": path})
            values[keys[key]] = _cast(keys[key], raw)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    cfg.cache_dir = env_default("cache_dir", cfg.cache_dir)
    cfg.workers = env_default("workers", cfg.workers)
    cfg.log_level = env_default("log_level", cfg.log_level)
    if getattr(args, "config", None):
        for name, value in load_config_file(args.config).items():
            setattr(cfg, name, value)
    names = {f.name for f in fields(RunConfig)}
    for name, value in vars(args).items():
        if name in names and name != "command" and value is not None:
            setattr(cfg, name, _cast(name, value))
    cfg.validate()
    return cfg


# =============================================================================
# ARGUMENT PARSER
# =============================================================================

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--d", type=int)
    p.add_argument("--offspring", help="binary_critical | geometric_half | poisson_trunc | custom")
    p.add_argument("--pmf", help="comma-separated pmf for a custom offspring law")
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--step", help="simple | lazy_simple")
    p.add_argument("--set", dest="set_spec", help="point:0, point:1,0,0,0,0, ball:2 or points:<csv>")
    p.add_argument("--x", help="comma-separated evaluation point")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--v-max", dest="v_max", type=int)
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--R-box", dest="R_box", type=int)
    p.add_argument("--policy", choices=("dirichlet_zero", "matched_asymptotic"))
    p.add_argument("--tol", type=float)
    p.add_argument("--solver-method", dest="solver_method", choices=("newton", "picard"))
    p.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--no-cache", dest="no_cache", action="store_const", const=True)
    p.add_argument("--log-level", dest="log_level")
    p.add_argument("--log-file", dest="log_file")


class _Parser(argparse.ArgumentParser):
    """Usage errors become ValidationError (exit 1, JSON on stderr)."""

    def error(self, message: str):
        raise ValidationError(f"Invalid arguments: {message}", {"usage": self.format_usage().strip()})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="branchcap", description="Branching capacity toolkit")
    parser.add_argument("--version", action="version", version=f"branchcap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("green", help="Green function table and ray")
    _common(p)
    p.add_argument("--green-method", dest="green_method", choices=("fourier", "neumann"))
    p.add_argument("--order", type=int, choices=(1, 2))

    p = sub.add_parser("tree-size-law", help="Empirical total-progeny law")
    _common(p)
    p.add_argument("--n-min", dest="n_min", type=int)
    p.add_argument("--n-max", dest="n_max", type=int)

    for name in ("hit-mc", "escape-mc"):
        p = sub.add_parser(name, help="Monte Carlo hitting or escape probability")
        _common(p)
        p.add_argument("--tree", choices=("critical", "adjoint"))
        p.add_argument("--engine", choices=("batched", "spine"))
        p.add_argument("--r-stop", dest="r_stop", type=float)
        p.add_argument("--safety-factor", dest="safety_factor", type=float)
        p.add_argument("--bcap-upper-constant", dest="bcap_upper_constant", type=float)

    p = sub.add_parser("solve", help="Field solves on a finite box")
    _common(p)
    p.add_argument("--identities", action="store_const", const=True)
    p.add_argument("--green-comparison", dest="green_comparison", action="store_const", const=True)
    p.add_argument("--green-s", dest="green_s")

    p = sub.add_parser("bcap", help="Branching capacity estimates")
    _common(p)
    p.add_argument("--method", dest="bcap_method", choices=("sum", "far", "harmonic", "all"))
    p.add_argument("--mode", choices=("mc", "solver"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--safety-factor", dest="safety_factor", type=float)
    p.add_argument("--bcap-upper-constant", dest="bcap_upper_constant", type=float)

    p = sub.add_parser("snake-series", help="Series coefficients of the radial solution")
    _common(p)
    p.add_argument("--N", type=int)
    p.add_argument("--a0", type=float)
    p.add_argument("--grid", dest="t_grid")

    p = sub.add_parser("snake-shoot", help="Radial solution by shooting")
    _common(p)
    p.add_argument("--t-far", dest="t_far", type=float)
    p.add_argument("--grid", dest="t_grid")

    p = sub.add_parser("snake-a0", help="Maximal a0 from the series radius of convergence")
    _common(p)
    p.add_argument("--N", type=int)
    p.add_argument("--t-probe", dest="t_probe", type=float)
    p.add_argument("--a0-tol", dest="a0_tol", type=float)

    p = sub.add_parser("riesz", help="Riesz capacity of a discretized set")
    _common(p)
    p.add_argument("--gamma", type=float)
    p.add_argument("--riesz-set", dest="riesz_set")
    p.add_argument("--h", type=float)
    p.add_argument("--riesz-tol", dest="riesz_tol", type=float)
    p.add_argument("--richardson", action="store_const", const=True)
    p.add_argument("--sweep", action="store_const", const=True, help="snake/Riesz ratio over d = 5, 6, 7")

    p = sub.add_parser("scaling", help="Rescaled capacities along a dilation ladder")
    _common(p)
    p.add_argument("--rho", type=float)
    p.add_argument("--ladder")
    p.add_argument("--method", dest="scaling_method", choices=("solver", "harmonic", "far_field_mc"))
    p.add_argument("--a0-source", dest="a0_source")
    return parser


# =============================================================================
# PIPELINES
# =============================================================================

def _law(cfg: RunConfig) -> OffspringLaw:
    if cfg.offspring == "custom" or cfg.pmf:
        try:
            pmf = [float(v) for v in cfg.pmf.split(",") if v.strip()]
        except ValueError:
            raise ValidationError("pmf must be comma-separated numbers", {"pmf": cfg.pmf})
        return make_offspring("custom", {"pmf": pmf})
    return make_offspring(cfg.offspring, {"k_max": cfg.k_max})


def _point(cfg: RunConfig, default: Optional[Sequence[int]] = None) -> np.ndarray:
    if not cfg.x:
        if default is None:
            raise ValidationError("This command needs --x")
        return np.asarray(default, dtype=np.int64)
    coords = _int_list(cfg.x, "x")
    if len(coords) != cfg.d:
        raise ValidationError("x has the wrong dimension", {"x": cfg.x, "d": cfg.d})
    return np.asarray(coords, dtype=np.int64)


def _far_point(d: int, distance: int) -> List[int]:
    return [distance] + [0] * (d - 1)


def _cache(cfg: RunConfig) -> TableCache:
    return TableCache(cfg.cache_dir, enabled=not cfg.no_cache)


def _remainder(cfg: RunConfig) -> RemainderPolicy:
    return RemainderPolicy(r_stop=cfg.r_stop, safety=cfg.safety_factor,
                           bcap_upper_constant=cfg.bcap_upper_constant)


def _bcap_params(cfg: RunConfig) -> BcapParams:
    return BcapParams(R_box=cfg.R_box, policy=BoundaryPolicy(cfg.policy), tol=cfg.tol,
                      solver_method=cfg.solver_method, samples=cfg.samples, v_max=cfg.v_max, seed=cfg.seed,
                      block_size=cfg.block_size, workers=cfg.workers, remainder=_remainder(cfg), lam=cfg.lam,
                      bcap_upper_constant=cfg.bcap_upper_constant, cache=_cache(cfg))


Result = Tuple[Dict[str, Any], Optional[pd.DataFrame]]


def cmd_green(cfg: RunConfig) -> Result:
    step = make_step_law(cfg.step, cfg.d)
    if cfg.order == 2:
        table = second_order_table(step, cfg.R_box, cache=_cache(cfg), workers=cfg.workers)
    else:
        table = green_table(step, cfg.R_box, cfg.green_method, cfg.tol, cache=_cache(cfg), workers=cfg.workers)
    frame = pd.DataFrame(green_ray(table, _far_point(cfg.d, 1), cfg.R_box))
    report = {**table.header(), "step": step.to_dict(), "c_g": table.c_g, "tail_bracket": table.tail_bracket}
    if cfg.order == 1:
        report["harmonicity_residual"] = table.harmonicity_residual()
    else:
        first = green_table(step, cfg.R_box, cfg.green_method, cfg.tol, cache=_cache(cfg), workers=cfg.workers)
        origin = np.zeros(cfg.d, dtype=np.int64)
        try:
            report["convolution_at_origin"] = second_order_kernel(first, origin)
        except ValidationError as e:
            logger.warning("Convolution check skipped: %s", e.message)
            report["convolution_at_origin"] = None
    return report, frame


def cmd_tree_size(cfg: RunConfig) -> Result:
    law = _law(cfg)
    result = tree_size_counts(law, cfg.samples, max(cfg.v_max, cfg.n_max), cfg.seed, cfg.block_size,
                              cfg.tree, cfg.workers)
    frame = pd.DataFrame(result.rows(range(cfg.n_min, cfg.n_max + 1)))
    ratios = frame["normalized_ratio"].dropna()
    report = {**result.to_dict(), "n_range": [cfg.n_min, cfg.n_max],
              "ratio_min": float(ratios.min()) if len(ratios) else None,
              "ratio_max": float(ratios.max()) if len(ratios) else None}
    return report, frame


def cmd_hit(cfg: RunConfig) -> Result:
    law, step = _law(cfg), make_step_law(cfg.step, cfg.d)
    K = LatticeSet.parse(cfg.set_spec, cfg.d)
    x = _point(cfg)
    est = hit_probability(cfg.tree, K, x, law, step, cfg.samples, TreeBudget(cfg.v_max), cfg.seed,
                          _remainder(cfg), block_size=cfg.block_size, workers=cfg.workers)
    return {"set": K.to_dict(), "law": law.to_dict(), "step": step.to_dict(), **est.to_dict()}, None


def cmd_escape(cfg: RunConfig) -> Result:
    law, step = _law(cfg), make_step_law(cfg.step, cfg.d)
    K = LatticeSet.parse(cfg.set_spec, cfg.d)
    x = _point(cfg, K.points[0])
    est = escape_probability(K, x, law, step, cfg.samples, _remainder(cfg), TreeBudget(cfg.v_max), cfg.seed,
                             cfg.engine, cfg.block_size, cfg.workers)
    return {"set": K.to_dict(), "law": law.to_dict(), "p_minus": est.to_dict(),
            "e_K": est.complement().to_dict()}, None


def cmd_solve(cfg: RunConfig) -> Result:
    law, step = _law(cfg), make_step_law(cfg.step, cfg.d)
    K = LatticeSet.parse(cfg.set_spec, cfg.d)
    fields_ = solve_all(K, law, step, cfg.R_box, BoundaryPolicy(cfg.policy), cfg.tol, cfg.solver_method,
                        max_sweeps=cfg.max_sweeps)
    report = {"set": K.to_dict(), "law": law.to_dict(), "step": step.to_dict(),
              "fields": {f.quantity: f.to_dict() for f in (fields_.p_c, fields_.p_adj, fields_.p_minus, fields_.p_I)},
              "inequalities": inequality_report(fields_),
              "bcap_sum_escape": float(fields_.escape_on_K()["e_K"].sum())}
    if cfg.identities:
        B = one_step_hull(K, step)
        green = green_killed(K, fields_.p_adj, identity_targets(fields_, B), min(cfg.tol, 1e-12),
                             workers=cfg.workers)
        report["identities"] = identity_report(fields_, green, B, min(cfg.tol, 1e-12))
    if cfg.green_comparison:
        report["green_comparison"] = green_comparison(fields_, cfg.green_s_values(),
                                                      min(cfg.tol, 1e-12)).to_dict(orient="records")
    return report, fields_.to_frame()


def cmd_bcap(cfg: RunConfig) -> Result:
    law, step = _law(cfg), make_step_law(cfg.step, cfg.d)
    K = LatticeSet.parse(cfg.set_spec, cfg.d)
    params = _bcap_params(cfg)
    frame = None
    if cfg.bcap_method == "all":
        estimates = bcap_all(K, law, step, params, mc=cfg.mode == "mc")
    elif cfg.bcap_method == "sum":
        estimates = {"sum_escape": bcap_sum_escape(K, law, step, cfg.mode, params)}
    elif cfg.bcap_method == "far":
        estimates = {"far_field": bcap_far_field(K, law, step, None, cfg.mode, params)}
    else:
        estimates = {"harmonic_measure": bcap_harmonic(K, None, law, step, params)}
    if "far_field" in estimates:
        frame = estimates["far_field"].details["ladder"]
    report = {"set": K.to_dict(), "law": law.to_dict(), "step": step.to_dict(),
              "estimates": {k: v.to_dict() for k, v in estimates.items()}}
    if cfg.mode == "solver" and cfg.bcap_method == "all":
        diag = adjoint_ratio_diag(K, law, step, None, params)
        report["ratio_diagnostic"] = {k: v for k, v in diag.items() if k != "ladder"}
    return report, frame


def cmd_snake_series(cfg: RunConfig) -> Result:
    if cfg.a0 > 0:
        a0 = cfg.a0
    elif cfg.d == 6:
        a0 = ReferenceData().a0_d6()
    else:
        a0 = find_a0(cfg.d, cfg.t_probe, cfg.N, cfg.a0_tol).a0
    coeffs = series_coefficients(cfg.d, a0, cfg.N)
    sums = {str(t): float(coeffs.partial_sums(t)[-1]) for t in cfg.t_values() if t > coeffs.t_convergence}
    report = {"d": cfg.d, "a0": a0, "N": cfg.N, "radius_s": coeffs.radius_s,
              "t_convergence": coeffs.t_convergence, "u_partial_sums": sums}
    return report, coeffs.to_frame()


def cmd_snake_shoot(cfg: RunConfig) -> Result:
    grid = cfg.t_values()
    solution = shoot_radial(cfg.d, cfg.t_far)
    report = {**{k: v for k, v in solution.to_dict().items() if not callable(v) and k != "grid"},
              "ode_residual": ode_residual(solution),
              "integral_identity": integral_identity_check(cfg.d, solution)}
    return report, solution.table(grid)


def cmd_snake_a0(cfg: RunConfig) -> Result:
    report = find_a0(cfg.d, cfg.t_probe, cfg.N, cfg.a0_tol, strict=False).to_dict()
    if cfg.d == 6:
        reference = ReferenceData().a0_d6()
        report["reference_a0"] = reference
        report["relative_error"] = abs(report["a0"] / reference - 1.0)
    return report, None


def cmd_riesz(cfg: RunConfig) -> Result:
    params = RieszParams(tol=cfg.riesz_tol, workers=cfg.workers)
    cloud = DiscretizedCompact.parse(cfg.riesz_set, cfg.d, cfg.h)
    result = riesz_capacity(cloud, cfg.gamma, params)
    report = result.to_dict()
    if cfg.richardson:
        report["richardson"] = richardson(lambda h: DiscretizedCompact.parse(cfg.riesz_set, cfg.d, h),
                                          cfg.gamma, cfg.h, params=params)
    if cloud.extent is not None and cloud.dim == cfg.d:
        report["interior_weight"] = interior_weight(result, cloud.extent, 2.0 * cfg.h)
    if cfg.sweep:
        report["sweep"] = riesz_sweep(h=cfg.h, params=params).to_dict(orient="records")
    return report, result.weights_frame()


def cmd_scaling(cfg: RunConfig) -> Result:
    law, step = _law(cfg), make_step_law(cfg.step, cfg.d)
    a0_source: Any = cfg.a0_source
    try:
        a0_source = float(a0_source)
    except ValueError:
        pass
    params = ScalingParams(method=cfg.scaling_method, bcap=_bcap_params(cfg), a0_source=a0_source,
                           envelope_constant=cfg.bcap_upper_constant, workers=cfg.workers)
    run_ = run_scaling(cfg.rho, cfg.ladder_values(), law, step, params)
    return run_.to_dict(), run_.frame


HANDLERS = {
    "green": cmd_green,
    "tree-size-law": cmd_tree_size,
    "hit-mc": cmd_hit,
    "escape-mc": cmd_escape,
    "solve": cmd_solve,
    "bcap": cmd_bcap,
    "snake-series": cmd_snake_series,
    "snake-shoot": cmd_snake_shoot,
    "snake-a0": cmd_snake_a0,
    "riesz": cmd_riesz,
    "scaling": cmd_scaling,
}


# =============================================================================
# ARTIFACTS
# =============================================================================

def write_json(path: Path, payload: Dict[str, Any]) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2, default=json_default, allow_nan=True)
    path.write_text(text + "\n", encoding="utf-8")


def package_versions() -> Dict[str, Optional[str]]:
    versions: Dict[str, Optional[str]] = {}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_artifacts(cfg: RunConfig, report: Dict[str, Any], frame: Optional[pd.DataFrame]) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = cfg.command.replace("-", "_")
    write_json(out / f"{stem}.json", {"schema_version": SCHEMA_VERSION, "command": cfg.command, **report})
    if frame is not None:
        frame.to_csv(out / f"{stem}.csv", index=False, float_format="%.17g")
    write_json(out / "manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "branchcap_version": __version__,
        "command": cfg.command,
        "config": cfg.manifest_config(),
        "execution": cfg.execution_settings(),
        "packages": package_versions(),
        "created": datetime.now(timezone.utc).isoformat(),
    })
    return out


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        cfg = resolve_config(parser.parse_args(argv))
        setup_logging(cfg.log_level, cfg.log_file or None)
        logger.info("Running %s (d=%d, seed=%d)", cfg.command, cfg.d, cfg.seed)
        report, frame = HANDLERS[cfg.command](cfg)
        out = write_artifacts(cfg, report, frame)
        logger.info("Artifacts written to %s", out)
        return 0
    except BranchcapError as e:
        sys.stderr.write(json.dumps(e.to_dict(), sort_keys=True, default=json_default) + "\n")
        return e.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
