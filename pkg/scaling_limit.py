"""
SCALING LIMIT HARNESS
=====================
Rescaled discrete capacities Bcap(nK ∩ Z^d)/n^{d-4} along a dilation ladder,
compared with the continuum target c_θ · BScap(M_θ^{-1/2} K) for balls.

    c_θ = 2/(σ² c_g) = 4π^{d/2} √det M_θ / (σ² Γ((d-2)/2))

The simple-walk constant 2π^{d/2}/(σ² Γ(d/2)) is reported next to the target;
for the simple walk it exceeds the target by the factor d²/(d-2).
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import gamma

from bcap import BcapParams, CapacityEstimate, bcap_far_field, bcap_harmonic, bcap_sum_escape
from brw_mc import LatticeSet
from exceptions import BranchcapError, ValidationError
from lattice import StepLaw, c_g_constant, iter_ball_points
from offspring import OffspringLaw
from runtime import get_logger, parallel_map
from snake import find_a0, shoot_radial

logger = get_logger("scaling_limit")

SHAPES = ("ball", "box")


def c_theta(law: OffspringLaw, step: StepLaw) -> float:
    """Both forms of c_θ, cross-checked to 1e-12."""
    d = step.d
    if d < 5:
        raise ValidationError("c_θ is used for d >= 5", {"d": d})
    s2 = law.variance
    from_cg = 2.0 / (s2 * c_g_constant(step))
    closed = 4.0 * math.pi ** (d / 2.0) * math.sqrt(np.linalg.det(step.covariance)) / (s2 * gamma((d - 2) / 2.0))
    if abs(from_cg - closed) > 1e-12 * closed:
        raise ValidationError("The two forms of c_θ disagree", {"from_c_g": from_cg, "closed_form": closed})
    return closed


def simple_walk_constant(d: int, sigma2: float) -> float:
    """2π^{d/2} / (σ² Γ(d/2))."""
    return 2.0 * math.pi ** (d / 2.0) / (sigma2 * gamma(d / 2.0))


def isotropic_scale(step: StepLaw) -> float:
    """m with M_θ = m·I; anisotropic laws are rejected."""
    M = step.covariance
    m = float(M[0, 0])
    if not np.allclose(M, m * np.eye(step.d), rtol=1e-12, atol=1e-15):
        raise ValidationError("Ball targets need an isotropic covariance M_θ = m·I",
                              {"covariance_diag": np.diag(M).tolist()})
    return m


def resolve_a0(d: int, a0_source: Union[str, float] = "series") -> float:
    if isinstance(a0_source, (int, float)):
        return float(a0_source)
    if a0_source == "closed_form":
        if d != 6:
            raise ValidationError("The closed-form a₀ exists for d = 6 only", {"d": d})
        return 6.0
    if a0_source == "series":
        return 6.0 if d == 6 else find_a0(d).a0
    if a0_source == "shooting":
        return shoot_radial(d).a0
    raise ValidationError(f"Unknown a0 source: {a0_source}")


def continuum_target(rho: float, law: OffspringLaw, step: StepLaw,
                     a0_source: Union[str, float] = "series") -> float:
    """c_θ · (ρ/√m)^{d-4} · a₀ for K = B(0, ρ)."""
    if rho <= 0:
        raise ValidationError("Ball radius must be positive", {"rho": rho})
    d = step.d
    m = isotropic_scale(step)
    return c_theta(law, step) * (rho / math.sqrt(m)) ** (d - 4) * resolve_a0(d, a0_source)


# =============================================================================
# LADDER RUNS
# =============================================================================

def dilate(shape: str, rho: float, n: int, d: int) -> LatticeSet:
    """nK ∩ Z^d for K the closed ball or closed cube of radius ρ."""
    if shape == "ball":
        return LatticeSet(np.vstack(list(iter_ball_points(d, n * rho))), name=f"ball({n * rho:g})")
    if shape == "box":
        r = int(math.floor(n * rho + 1e-12))
        axes = [np.arange(-r, r + 1)] * d
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        return LatticeSet(pts, name=f"box({n * rho:g})")
    raise ValidationError(f"Unknown shape: {shape}")


def on_sphere(rho: float, n: int, d: int) -> int:
    """Lattice points with |x| = nρ exactly (open and closed balls differ there)."""
    target = (n * rho) ** 2
    if abs(target - round(target)) > 1e-9:
        return 0
    pts = np.vstack(list(iter_ball_points(d, n * rho)))
    return int(((pts ** 2).sum(axis=1) == int(round(target))).sum())


@dataclass
class ScalingParams:
    method: str = "solver"
    box_factor: float = 2.0
    margin: int = 4
    bcap: BcapParams = field(default_factory=BcapParams)
    a0_source: Union[str, float] = "series"
    envelope_constant: float = 50.0
    workers: Optional[int] = None


@dataclass
class ScalingRun:
    shape: str
    rho: float
    d: int
    ladder: List[int]
    estimates: Dict[int, CapacityEstimate]
    skipped: Dict[int, Dict]
    target: Optional[float]
    c_theta: float
    simple_walk_value: Optional[float]
    a0: Optional[float]
    frame: pd.DataFrame = field(repr=False)
    trend: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "shape": self.shape,
            "rho": self.rho,
            "d": self.d,
            "ladder": self.ladder,
            "target": self.target,
            "target_provenance": "c_theta * (rho/sqrt(m))^(d-4) * a0" if self.target is not None else None,
            "c_theta": self.c_theta,
            "simple_walk_value": self.simple_walk_value,
            "a0": self.a0,
            "skipped": {str(k): v for k, v in self.skipped.items()},
            "trend": self.trend,
            "rows": self.frame.to_dict(orient="records"),
        }


def _estimate(K: LatticeSet, law: OffspringLaw, step: StepLaw, n: int, rho: float,
              params: ScalingParams) -> CapacityEstimate:
    R_box = int(math.ceil(params.box_factor * n * rho)) + params.margin
    bp = replace(params.bcap, R_box=R_box)
    if params.method == "solver":
        return bcap_sum_escape(K, law, step, "solver", bp)
    if params.method == "harmonic":
        return bcap_harmonic(K, None, law, step, bp)
    if params.method == "far_field_mc":
        return bcap_far_field(K, law, step, None, "mc", bp)
    raise ValidationError(f"Unknown scaling method: {params.method}")


def run_scaling(rho: float, ladder: Sequence[int], law: OffspringLaw, step: StepLaw,
                params: Optional[ScalingParams] = None, shape: str = "ball") -> ScalingRun:
    """Bcap(nK)/n^{d-4} along the ladder, ratios to the target and Cauchy differences."""
    params = params or ScalingParams()
    d = step.d
    ladder = [int(n) for n in ladder]
    if not ladder or any(n < 1 for n in ladder) or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValidationError("Dilation ladder must be strictly increasing positive integers", {"ladder": ladder})
    if shape not in SHAPES:
        raise ValidationError(f"Unknown shape: {shape}")

    ct = c_theta(law, step)
    target = a0 = simple = None
    if shape == "ball":
        a0 = resolve_a0(d, params.a0_source)
        target = continuum_target(rho, law, step, a0)
        simple = simple_walk_constant(d, law.variance) * rho ** (d - 4) * a0
        logger.info("Continuum target %.8g (simple-walk constant form %.8g)", target, simple)
    else:
        logger.info("Shape %s runs in trend-only mode", shape)

    def run(n: int):
        K = dilate(shape, rho, n, d)
        if shape == "ball":
            count = on_sphere(rho, n, d)
            if count:
                logger.warning("%d lattice points lie exactly on the sphere of radius %g", count, n * rho)
        try:
            return n, _estimate(K, law, step, n, rho, params), None
        except BranchcapError as e:
            logger.warning("Ladder point n=%d skipped: %s", n, e.message)
            return n, None, e.to_dict()

    results = parallel_map(run, ladder, workers=params.workers)
    estimates = {n: est for n, est, _ in results if est is not None}
    skipped = {n: err for n, _, err in results if err is not None}

    envelope = params.envelope_constant * max(rho, 1.0) ** (d - 4)
    rows = []
    previous = None
    for n in ladder:
        if n not in estimates:
            continue
        est = estimates[n]
        rescaled = est.value / n ** (d - 4)
        rows.append({
            "n": n,
            "estimate": est.value,
            "uncertainty": est.half_width,
            "rescaled": rescaled,
            "ratio_to_target": rescaled / target if target else float("nan"),
            "cauchy_diff": abs(rescaled - previous) if previous is not None else float("nan"),
            "envelope": envelope,
            "within_envelope": bool(0.0 < rescaled <= envelope),
        })
        previous = rescaled
    frame = pd.DataFrame(rows, columns=["n", "estimate", "uncertainty", "rescaled", "ratio_to_target",
                                        "cauchy_diff", "envelope", "within_envelope"])
    trend = _trend(frame, target)
    return ScalingRun(shape, rho, d, ladder, estimates, skipped, target, ct, simple, a0, frame, trend)


def _trend(frame: pd.DataFrame, target: Optional[float]) -> Dict:
    diffs = frame["cauchy_diff"].dropna().to_numpy()
    trend = {
        "cauchy_decreasing": bool(np.all(np.diff(diffs) <= 0)) if len(diffs) >= 2 else None,
        "all_within_envelope": bool(frame["within_envelope"].all()) if len(frame) else None,
        "gap_non_increasing": None,
    }
    if target is not None and len(frame) >= 2:
        gap = np.abs(frame["rescaled"].to_numpy() - target)
        inversions = int((np.diff(gap) > 0).sum())
        trend["gap_non_increasing"] = inversions == 0
        if inversions:
            logger.warning("Gap to the continuum target grew at %d ladder step(s)", inversions)
    if trend["cauchy_decreasing"] is False:
        logger.warning("Cauchy differences are not decreasing along the ladder")
    return trend
