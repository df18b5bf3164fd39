"""
Branching capacity Bcap(K) by three routes:

    sum_escape        Σ_{a∈K} e_K(a), from Monte Carlo brackets or solver fields
    far_field         p_c(x)/g(x) along a ladder of far points
    harmonic_measure  Σ_{a∈K} Σ_{b∉B} H^B_K(b, a) e_K(b)

plus the far-field rate report and the adjoint / infinite-tree ratio ladders.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from brw_mc import LatticeSet, RemainderPolicy, escape_probability, hit_probability
from exceptions import ConvergenceError, ValidationError
from field_solver import (BoundaryPolicy, FieldSet, harmonic_capacity, harmonic_measure,
                          solve_all)
from lattice import StepLaw, green_table, second_order_table
from offspring import OffspringLaw, TreeBudget
from runtime import TableCache, content_hash, get_logger, parallel_map

logger = get_logger("bcap")

METHODS = ("sum_escape", "far_field", "harmonic_measure")


def rate_exponent(d: int) -> float:
    """α = (d - 4) / (2(d - 1))."""
    return (d - 4) / (2.0 * (d - 1))


@dataclass
class BcapParams:
    """Knobs shared by the estimators; unset fields fall back to sane defaults."""
    R_box: int = 12
    policy: BoundaryPolicy = field(default_factory=BoundaryPolicy)
    tol: float = 1e-10
    solver_method: str = "newton"
    samples: int = 20_000
    v_max: int = 200_000
    seed: int = 0
    block_size: int = 1000
    workers: Optional[int] = None
    remainder: RemainderPolicy = field(default_factory=RemainderPolicy)
    lam: float = 2.0
    min_hits: int = 20
    bcap_upper_constant: float = 50.0
    bracket: bool = False
    cache: Optional[TableCache] = None

    def to_dict(self) -> Dict:
        return {
            "R_box": self.R_box,
            "policy": self.policy.kind,
            "tol": self.tol,
            "solver_method": self.solver_method,
            "samples": self.samples,
            "v_max": self.v_max,
            "seed": self.seed,
            "block_size": self.block_size,
            "lambda": self.lam,
            "min_hits": self.min_hits,
            "safety_factor": self.remainder.safety,
            "bcap_upper_constant": self.bcap_upper_constant,
        }


@dataclass
class CapacityEstimate:
    value: float
    half_width: float
    method: str
    digest: str
    low: Optional[float] = None
    high: Optional[float] = None
    mixed_uncertainty: bool = False
    details: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "method": self.method,
            "value": self.value,
            "half_width": self.half_width,
            "bracket_low": self.low,
            "bracket_high": self.high,
            "mixed_uncertainty": self.mixed_uncertainty,
            "digest": self.digest,
            **{k: v for k, v in self.details.items() if not isinstance(v, pd.DataFrame)},
        }


def _digest(K: LatticeSet, law: OffspringLaw, step: StepLaw, method: str, params: BcapParams, **extra) -> str:
    return content_hash({"K": K.points, "law": law.pmf, "geometric": law.geometric, "step": step.digest(),
                         "method": method, "params": params.to_dict(), **extra})


def check_envelope(value: float, K: LatticeSet, constant: float) -> Dict[str, bool]:
    """0 < Bcap(K) ≤ constant · max(r, 1)^{d-4}."""
    upper = constant * max(K.spread, 1.0) ** (K.d - 4)
    report = {"positive": value > 0.0, "below_envelope": value <= upper}
    if not all(report.values()):
        logger.warning("Capacity %.6g outside the envelope (0, %.6g]", value, upper)
    return report


def _centered(K: LatticeSet) -> LatticeSet:
    shift = -np.rint(K.center).astype(np.int64)
    return K if not shift.any() else K.translate(shift)


def solver_fields(K: LatticeSet, law: OffspringLaw, step: StepLaw, params: BcapParams,
                  policy: Optional[BoundaryPolicy] = None) -> FieldSet:
    """Fields for K moved to the box centre (the box is translated with K)."""
    return solve_all(_centered(K), law, step, params.R_box, policy or params.policy, params.tol,
                     params.solver_method)


# =============================================================================
# SUM OF ESCAPE PROBABILITIES
# =============================================================================

def bcap_sum_escape(K: LatticeSet, law: OffspringLaw, step: StepLaw, mode: str = "solver",
                    params: Optional[BcapParams] = None, fields: Optional[FieldSet] = None) -> CapacityEstimate:
    params = params or BcapParams()
    digest = _digest(K, law, step, f"sum_escape/{mode}", params)
    if mode == "solver":
        fields = fields or solver_fields(K, law, step, params)
        e = fields.escape_on_K()["e_K"].to_numpy()
        value = float(e.sum())
        low = high = None
        half = 0.0
        if params.bracket and fields.problem.policy.kind != "dirichlet_zero":
            upper = solver_fields(K, law, step, params, BoundaryPolicy("dirichlet_zero"))
            high = float(upper.escape_on_K()["e_K"].sum())
            low, half = value, abs(high - value)
        est = CapacityEstimate(value, half, "sum_escape", digest, low, high,
                               details={"mode": mode, "e_K": e.tolist()})
    elif mode == "mc":
        est = _sum_escape_mc(K, law, step, params, digest)
    else:
        raise ValidationError(f"Unknown mode: {mode}")
    est.details["envelope"] = check_envelope(est.value, K, params.bcap_upper_constant)
    logger.info("Bcap sum_escape (%s) = %.6g ± %.2g", mode, est.value, est.half_width)
    return est


def _sum_escape_mc(K: LatticeSet, law: OffspringLaw, step: StepLaw, params: BcapParams,
                   digest: str) -> CapacityEstimate:
    budget = TreeBudget(params.v_max)
    policy = params.remainder

    def run(item):
        i, a = item
        return escape_probability(K, a, law, step, params.samples, policy, budget, params.seed + i,
                                  block_size=params.block_size, workers=1)

    estimates = parallel_map(run, list(enumerate(K.points)), workers=params.workers)
    n = params.samples
    hit_frac = np.array([e.hits / n for e in estimates])
    unit = np.array([e.unit_remainder for e in estimates])
    # e(a) = 1 - h_a/n - B·U_a with B = Σ e(a), solved for B
    value = float((1.0 - hit_frac).sum() / (1.0 + unit.sum()))
    priced = [e.with_bcap(value, policy.safety * policy.bcap_upper(K)) for e in estimates]
    escape = [p.complement() for p in priced]
    half = float(math.sqrt(sum(p.half_width ** 2 for p in priced)))
    low = float(sum(e.low for e in escape))
    high = float(sum(e.high for e in escape))
    capped = sum(e.capped for e in estimates)
    return CapacityEstimate(value, half, "sum_escape", digest, low, high, mixed_uncertainty=capped > 0,
                            details={"mode": "mc", "e_K": [e.estimate for e in escape], "capped": capped,
                                     "r_stop": estimates[0].r_stop,
                                     "remainder_dominates": any(e.remainder_dominates for e in estimates)})


# =============================================================================
# FAR-FIELD RATIO
# =============================================================================

def default_ladder(K: LatticeSet, lam: float, R_box: int, margin: int, count: int = 4) -> List[np.ndarray]:
    """Points along the first axis from λ·r out to the reliable edge of the box."""
    r = max(K.spread, 1.0)
    start = int(math.ceil(lam * r)) + 1
    stop = R_box - margin
    if stop < start:
        return []
    values = np.unique(np.linspace(start, stop, count).round().astype(np.int64))
    ladder = []
    for v in values:
        x = np.zeros(K.d, dtype=np.int64)
        x[0] = v
        ladder.append(x)
    return ladder


def _rate_report(distances: np.ndarray, ratios: np.ndarray, reference: Optional[float], r: float,
                 d: int) -> Dict:
    report = {"alpha": rate_exponent(d), "reference": reference, "slope": None,
              "cauchy_decreasing": None, "direction": None}
    if len(ratios) >= 3:
        diffs = np.abs(np.diff(ratios))
        report["cauchy_decreasing"] = bool(np.all(np.diff(diffs) <= 0))
    if len(ratios) >= 2:
        report["direction"] = "increasing" if ratios[-1] >= ratios[0] else "decreasing"
    if reference is not None and len(ratios) >= 2:
        gap = np.abs(ratios - reference)
        keep = gap > 0
        if keep.sum() >= 2:
            report["slope"] = float(np.polyfit(np.log(r / distances[keep]), np.log(gap[keep]), 1)[0])
    return report


def bcap_far_field(K: LatticeSet, law: OffspringLaw, step: StepLaw,
                   x_ladder: Optional[Sequence[Sequence[int]]] = None, mode: str = "solver",
                   params: Optional[BcapParams] = None, reference: Optional[float] = None,
                   fields: Optional[FieldSet] = None) -> CapacityEstimate:
    """p_c(x)/g(x) at the farthest reliable ladder point, with the ratio ladder."""
    params = params or BcapParams()
    Kc = _centered(K)
    shift = Kc.points[0] - K.points[0]
    margin = params.policy.far_width + step.support_radius
    ladder = [np.asarray(x, dtype=np.int64) for x in (x_ladder if x_ladder is not None
                                                      else default_ladder(Kc, params.lam, params.R_box, margin))]
    r = max(K.spread, 1.0)
    rows = []
    g_radius = max([int(np.abs(x + shift).max()) for x in ladder] + [1])
    gt = green_table(step, g_radius, cache=params.cache, workers=params.workers)
    if mode == "solver":
        fields = fields or solver_fields(K, law, step, params)
    elif mode != "mc":
        raise ValidationError(f"Unknown mode: {mode}")

    for i, x in enumerate(ladder):
        xc = x + shift
        dist = float(np.sqrt(((xc - Kc.center) ** 2).sum()))
        if dist < params.lam * r:
            logger.warning("Ladder point %s closer than λ·r; skipped", x.tolist())
            continue
        g = float(gt.value(xc[None, :] - np.rint(Kc.center).astype(np.int64))[0])
        if mode == "solver":
            reliable = int(np.abs(xc).max()) <= params.R_box - margin
            p = float(fields.p_c.value(xc[None, :])[0])
            half = 0.0
        else:
            est = hit_probability("critical", K, x, law, step, params.samples, TreeBudget(params.v_max),
                                  params.seed + i, params.remainder, prune_radius=2.0 * dist,
                                  block_size=params.block_size, workers=params.workers)
            reliable = est.hits >= params.min_hits and est.capped <= 0.1 * max(est.hits, 1)
            p, half = est.estimate, est.half_width
        rows.append({"x": " ".join(map(str, x.tolist())), "distance": dist, "p_c": p, "g": g,
                     "ratio": p / g, "ratio_half_width": half / g, "reliable": reliable})

    frame = pd.DataFrame(rows, columns=["x", "distance", "p_c", "g", "ratio", "ratio_half_width", "reliable"])
    good = frame[frame["reliable"]] if len(frame) else frame
    if not len(good):
        raise ConvergenceError("No ladder point satisfies the reliability thresholds",
                               {"ladder": len(ladder), "lambda": params.lam})
    last = good.iloc[-1]
    report = _rate_report(good["distance"].to_numpy(), good["ratio"].to_numpy(), reference, r, K.d)
    digest = _digest(K, law, step, f"far_field/{mode}", params, ladder=[x.tolist() for x in ladder])
    est = CapacityEstimate(float(last["ratio"]), float(last["ratio_half_width"]), "far_field", digest,
                           details={"mode": mode, "ladder": frame, "rate": report})
    est.details["envelope"] = check_envelope(est.value, K, params.bcap_upper_constant)
    logger.info("Bcap far_field (%s) = %.6g at |x|=%.3g", mode, est.value, last["distance"])
    return est


# =============================================================================
# HARMONIC MEASURE
# =============================================================================

def one_step_hull(K: LatticeSet, step: StepLaw) -> LatticeSet:
    """K together with every point one θ-step away."""
    pts = np.vstack([K.points] + [K.points + z for z in step.vectors])
    return LatticeSet(pts, name=f"hull({K.name})")


def bcap_harmonic(K: LatticeSet, B: Optional[LatticeSet], law: OffspringLaw, step: StepLaw,
                  params: Optional[BcapParams] = None, fields: Optional[FieldSet] = None) -> CapacityEstimate:
    params = params or BcapParams()
    Kc = _centered(K)
    shift = Kc.points[0] - K.points[0]
    Bc = one_step_hull(Kc, step) if B is None else B.translate(shift)
    if not np.all(Bc.contains(Kc.points)):
        raise ValidationError("B must contain K")
    fields = fields or solver_fields(K, law, step, params)
    table = harmonic_measure(Kc, Bc, fields.p_adj, tol=min(params.tol, 1e-12))
    value = harmonic_capacity(table, fields.p_minus)
    digest = _digest(K, law, step, "harmonic_measure", params, B=Bc.points)
    est = CapacityEstimate(value, 0.0, "harmonic_measure", digest,
                           details={"B_size": len(Bc), "shell_size": len(table.shell)})
    est.details["envelope"] = check_envelope(value, K, params.bcap_upper_constant)
    logger.info("Bcap harmonic_measure = %.10g (|B|=%d)", value, len(Bc))
    return est


def bcap_all(K: LatticeSet, law: OffspringLaw, step: StepLaw, params: Optional[BcapParams] = None,
             mc: bool = False) -> Dict[str, CapacityEstimate]:
    """All three estimators; the harmonic value serves as the far-field reference."""
    params = params or BcapParams()
    fields = solver_fields(K, law, step, params)
    out = {"harmonic_measure": bcap_harmonic(K, None, law, step, params, fields)}
    out["sum_escape"] = bcap_sum_escape(K, law, step, "mc" if mc else "solver", params,
                                        None if mc else fields)
    out["far_field"] = bcap_far_field(K, law, step, None, "solver", params,
                                      reference=out["harmonic_measure"].value, fields=fields)
    values = np.array([e.value for e in out.values()])
    spread = float(values.max() / values.min() - 1.0)
    for e in out.values():
        e.details["relative_spread"] = spread
    return out


# =============================================================================
# ADJOINT AND INFINITE-TREE RATIOS
# =============================================================================

def adjoint_ratio_diag(K: LatticeSet, law: OffspringLaw, step: StepLaw,
                       x_ladder: Optional[Sequence[Sequence[int]]] = None,
                       params: Optional[BcapParams] = None, fields: Optional[FieldSet] = None) -> Dict:
    """Ladders of p_adj/(g·Bcap), p_I/(G·Bcap) and p_-/(G·Bcap); their plateau targets σ²/2."""
    if not law.third_moment_finite:
        raise ValidationError("adjoint_ratio_diag needs a finite third moment", {"law": law.name})
    params = params or BcapParams()
    fields = fields or solver_fields(K, law, step, params)
    Kc = fields.problem.K
    shift = Kc.points[0] - K.points[0]
    margin = params.policy.far_width + step.support_radius
    ladder = [np.asarray(x, dtype=np.int64) + shift for x in x_ladder] if x_ladder is not None \
        else default_ladder(Kc, params.lam, params.R_box, margin)
    if not ladder:
        raise ConvergenceError("Empty ladder for the ratio diagnostic", {"R_box": params.R_box})
    bcap = float(fields.escape_on_K()["e_K"].sum())
    radius = max(int(np.abs(x).max()) for x in ladder)
    gt = green_table(step, radius, cache=params.cache, workers=params.workers)
    G2 = second_order_table(step, radius, cache=params.cache, workers=params.workers)
    pts = np.vstack(ladder)
    g, G = gt.value(pts), G2.value(pts)
    frame = pd.DataFrame({
        "x": [" ".join(map(str, (x - shift).tolist())) for x in ladder],
        "p_adj_ratio": fields.p_adj.value(pts) / (g * bcap),
        "p_I_ratio": fields.p_I.value(pts) / (G * bcap),
        "p_minus_ratio": fields.p_minus.value(pts) / (G * bcap),
    })
    target = law.variance / 2.0
    plateau = {col: float(frame[col].iloc[-1]) for col in ("p_adj_ratio", "p_I_ratio", "p_minus_ratio")}
    deviation = {col: abs(v / target - 1.0) for col, v in plateau.items()}
    logger.info("Ratio plateaus %s against σ²/2 = %.4g", plateau, target)
    return {"target": target, "bcap": bcap, "plateau": plateau, "relative_deviation": deviation,
            "ladder": frame}
