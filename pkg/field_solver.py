"""
FIELD SOLVER
============
Hitting probabilities as fixed points of lattice equations on a finite box:

    1 - p_c   = f((θ * (1 - p_c)))        off K,  p_c   = 1 on K
    1 - p_adj = f̃((θ * (1 - p_c)))        off K,  p_adj = 1 on K
    p_-       = θ * p_I,   p_I = p_adj + (1 - p_adj) p_-  off K,  p_I = 1 on K

plus the Green function G_K of the walk killed with probability p_adj, the
harmonic measures H^B_K and the identity residual report.

Out-of-box neighbours are closed either by zero (dirichlet_zero, a certified
lower bound for the probability fields) or by coefficient · power law with the
coefficient refitted from the field's own far zone (matched_asymptotic).
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse import linalg as spla

from brw_mc import LatticeSet
from exceptions import BracketInfeasibleError, ConvergenceError, ValidationError
from lattice import (AXIS_MODES, BoxGeometry, StepLaw, ThetaNorm, c_g_constant, is_invariant,
                     second_order_asymptotic_constant)
from offspring import DiscreteLaw, OffspringLaw, adjoint
from runtime import get_logger, parallel_map

logger = get_logger("field_solver")

POLICIES = ("dirichlet_zero", "matched_asymptotic")
DIRECT_LIMIT = 20_000
MAX_OUTER = 200


@dataclass(frozen=True)
class BoundaryPolicy:
    kind: str = "matched_asymptotic"
    coefficient: Optional[float] = None
    far_width: int = 2

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValidationError(f"Unknown boundary policy: {self.kind}")
        if self.far_width < 1:
            raise ValidationError("far_width must be >= 1")

    @property
    def matched(self) -> bool:
        return self.kind == "matched_asymptotic"

    @property
    def fitted(self) -> bool:
        return self.matched and self.coefficient is None


# =============================================================================
# BOX PROBLEM
# =============================================================================

class BoxProblem:
    """Geometry, stencil blocks and closure shapes shared by the field solves."""

    def __init__(self, K: LatticeSet, step: StepLaw, R_box: int, policy: BoundaryPolicy,
                 symmetric: bool = True):
        if K.d != step.d:
            raise ValidationError("K and the step law have different dimensions")
        if step.d < 5:
            raise ValidationError("The field solver needs d >= 5", {"d": step.d})
        margin = 2 * step.support_radius
        if int(np.abs(K.points).max()) > R_box - margin:
            raise ValidationError("K touches the boundary layer of the box",
                                  {"R_box": R_box, "margin": margin})
        mode = step.symmetry_mode if symmetric else "none"
        if mode != "none" and not is_invariant(K.points, mode):
            logger.info("K is not %s-invariant; solving on the full box", mode)
            mode = "none"
        self.K, self.step, self.R_box, self.policy = K, step, int(R_box), policy
        self.geometry = BoxGeometry(step.d, R_box, mode)
        stencil = self.geometry.stencil(step)
        self.inner = stencil.inner()
        self.outer = stencil.outer()
        self.exterior = stencil.exterior_points
        pts = self.geometry.points
        self.in_k = K.contains(pts)
        sup = np.abs(pts).max(axis=1)
        self.far = (sup >= R_box - policy.far_width) & ~self.in_k
        norm = ThetaNorm(step)
        self._r_pts = norm(pts)
        self._r_ext = norm(self.exterior)
        self.c_g = c_g_constant(step)
        self.A2 = second_order_asymptotic_constant(step)

    def __len__(self) -> int:
        return len(self.geometry)

    @property
    def symmetric(self) -> bool:
        return self.geometry.mode != "none"

    def shape(self, order: int, exterior: bool) -> np.ndarray:
        """Far-field shape: c_g r^{2-d} (order 1) or A r^{4-d} (order 2)."""
        r = self._r_ext if exterior else self._r_pts
        d = self.step.d
        with np.errstate(divide="ignore"):
            if order == 1:
                return self.c_g * r ** (2.0 - d)
            return self.A2 * r ** (4.0 - d)

    def fit(self, values: np.ndarray, order: int) -> float:
        if not self.policy.matched:
            return 0.0
        if not self.policy.fitted:
            return float(self.policy.coefficient)
        s = self.shape(order, exterior=False)[self.far]
        v = values[self.far]
        return float(v @ s / (s @ s)) if len(s) else 0.0

    def closure(self, coefficient: float, order: int) -> np.ndarray:
        if not self.policy.matched:
            return np.zeros(len(self.exterior))
        return coefficient * self.shape(order, exterior=True)


class _LinearSystem:
    """Factorize once when small, Krylov otherwise."""

    def __init__(self, matrix: sparse.spmatrix, tol: float):
        self.matrix = matrix.tocsr()
        self.tol = tol
        self._lu = spla.splu(self.matrix.tocsc()) if matrix.shape[0] <= DIRECT_LIMIT else None

    def solve(self, rhs: np.ndarray, x0: Optional[np.ndarray] = None) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs)
        x, info = spla.bicgstab(self.matrix, rhs, x0=x0, rtol=min(self.tol, 1e-12), atol=0.0,
                                maxiter=20 * self.matrix.shape[0])
        if info != 0:
            raise ConvergenceError("Krylov solve did not converge", {"info": int(info), "n": self.matrix.shape[0]})
        return x


# =============================================================================
# FIELDS
# =============================================================================

@dataclass
class LatticeField:
    """Values of one quantity on the (possibly orbit-reduced) box."""
    quantity: str
    problem: BoxProblem = field(repr=False)
    values: np.ndarray = field(repr=False)
    coefficient: float = 0.0
    iterations: int = 0
    residual: float = 0.0

    @property
    def order(self) -> int:
        return 2 if self.quantity in ("p_minus", "p_I") else 1

    @property
    def step(self) -> StepLaw:
        return self.problem.step

    @property
    def R_box(self) -> int:
        return self.problem.R_box

    @property
    def policy(self) -> BoundaryPolicy:
        return self.problem.policy

    @property
    def geometry(self) -> BoxGeometry:
        return self.problem.geometry

    @property
    def symmetric(self) -> bool:
        return self.problem.symmetric

    def exterior_values(self) -> np.ndarray:
        return self.problem.closure(self.coefficient, self.order)

    def value(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        idx = self.geometry.lookup(pts)
        out = np.empty(len(pts))
        out[idx >= 0] = self.values[idx[idx >= 0]]
        outside = idx < 0
        if outside.any():
            if self.policy.matched:
                r = ThetaNorm(self.step)(pts[outside])
                d = self.step.d
                base = self.problem.c_g * r ** (2.0 - d) if self.order == 1 else self.problem.A2 * r ** (4.0 - d)
                out[outside] = self.coefficient * base
            else:
                out[outside] = 0.0
        return out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "point": [" ".join(map(str, p)) for p in self.geometry.points.tolist()],
            "multiplicity": self.geometry.multiplicity,
            "in_K": self.problem.in_k,
            self.quantity: self.values,
        })

    def to_dict(self) -> Dict:
        return {
            "quantity": self.quantity,
            "R_box": self.R_box,
            "policy": self.policy.kind,
            "symmetric": self.symmetric,
            "coefficient": self.coefficient,
            "iterations": self.iterations,
            "residual": self.residual,
            "points": len(self.values),
        }


def _p_c_newton(problem: BoxProblem, law: DiscreteLaw, p: np.ndarray, ext_miss: np.ndarray,
                tol: float, max_iter: int) -> Tuple[np.ndarray, int, float]:
    off = ~problem.in_k
    ident = sparse.identity(len(p), format="csr")
    for it in range(1, max_iter + 1):
        s = problem.inner @ (1.0 - p) + problem.outer @ ext_miss
        F = np.where(off, p - 1.0 + law.gf(s), 0.0)
        res = float(np.abs(F).max())
        if res < tol:
            return p, it, res
        J = ident - sparse.diags(np.where(off, law.gf_derivative(s), 0.0)) @ problem.inner
        p = np.clip(p + _LinearSystem(J, tol).solve(-F), 0.0, 1.0)
        logger.debug("newton %d: residual %.3e", it, res)
    raise ConvergenceError("Newton iteration for p_c did not converge", {"iterations": max_iter, "residual": res})


def solve_p_c(K: LatticeSet, law: OffspringLaw, step: StepLaw, R_box: int,
              policy: Optional[BoundaryPolicy] = None, tol: float = 1e-10, method: str = "newton",
              max_sweeps: int = 200_000, symmetric: bool = True,
              problem: Optional[BoxProblem] = None) -> LatticeField:
    """Fixed point of 1 - p = f(θ * (1 - p)) off K.

    method='picard' sweeps up from p = 0 off K (every iterate is a lower
    bound); method='newton' converges quadratically for each closure
    coefficient.
    """
    policy = policy or BoundaryPolicy()
    problem = problem or BoxProblem(K, step, R_box, policy, symmetric)
    in_k = problem.in_k
    p = np.where(in_k, 1.0, 0.0)
    coef = problem.fit(p, 1)
    shape_max = float(problem.shape(1, exterior=True).max()) if len(problem.exterior) else 0.0
    iterations = 0

    if method == "picard":
        delta = np.inf
        while delta >= tol:
            if iterations >= max_sweeps:
                raise ConvergenceError("Picard sweeps for p_c did not converge",
                                       {"sweeps": iterations, "update": delta})
            s = problem.inner @ (1.0 - p) + problem.outer @ (1.0 - problem.closure(coef, 1))
            p_new = np.where(in_k, 1.0, 1.0 - law.gf(s))
            delta = float(np.abs(p_new - p).max())
            p = p_new
            new_coef = problem.fit(p, 1)
            delta = max(delta, abs(new_coef - coef) * shape_max)
            coef = new_coef
            iterations += 1
            if iterations % 1000 == 0:
                logger.debug("p_c sweep %d: update %.3e", iterations, delta)
        residual = delta
    elif method == "newton":
        for _ in range(MAX_OUTER):
            p, its, residual = _p_c_newton(problem, law, p, 1.0 - problem.closure(coef, 1), tol, 100)
            iterations += its
            new_coef = problem.fit(p, 1)
            shift = abs(new_coef - coef) * shape_max
            coef = new_coef
            if not policy.fitted or shift < tol:
                break
        else:
            raise ConvergenceError("Closure coefficient for p_c did not settle", {"coefficient": coef})
    else:
        raise ValidationError(f"Unknown solver method: {method}")

    logger.info("p_c solved on R_box=%d (%d points, %s): coefficient %.6g after %d iterations",
                R_box, len(problem), policy.kind, coef, iterations)
    return LatticeField("p_c", problem, p, coef, iterations, residual)


def solve_p_adj(K: LatticeSet, law: OffspringLaw, step: StepLaw, p_c_field: LatticeField,
                tol: float = 1e-10) -> LatticeField:
    """1 - p_adj = f̃(θ * (1 - p_c)) off K, evaluated in one pass."""
    problem = p_c_field.problem
    s = problem.inner @ (1.0 - p_c_field.values) + problem.outer @ (1.0 - p_c_field.exterior_values())
    values = np.where(problem.in_k, 1.0, 1.0 - adjoint(law).gf(s))
    return LatticeField("p_adj", problem, values, problem.fit(values, 1), 1, 0.0)


def solve_p_minus(K: LatticeSet, law: OffspringLaw, step: StepLaw, p_adj_field: LatticeField,
                  tol: float = 1e-10, method: str = "direct",
                  max_sweeps: int = 200_000) -> Tuple[LatticeField, LatticeField]:
    """p_- = θ * p_I with p_I = p_adj + (1 - p_adj) p_- off K and 1 on K.

    Returns (p_minus, p_I). The system is linear in p_-; 'picard' sweeps up
    from zero, 'direct' factorizes I - θ·D once.
    """
    problem = p_adj_field.problem
    in_k = problem.in_k
    b = np.where(in_k, 1.0, p_adj_field.values)
    D = np.where(in_k, 0.0, 1.0 - p_adj_field.values)
    shape_max = float(problem.shape(2, exterior=True).max()) if len(problem.exterior) else 0.0
    m = np.zeros(len(problem))
    coef = problem.fit(b, 2)
    iterations = 0
    base = problem.inner @ b

    if method == "direct":
        system = _LinearSystem(sparse.identity(len(m), format="csr") - problem.inner @ sparse.diags(D), tol)
        for _ in range(MAX_OUTER):
            m = system.solve(base + problem.outer @ problem.closure(coef, 2), x0=m)
            iterations += 1
            new_coef = problem.fit(b + D * m, 2)
            shift = abs(new_coef - coef) * shape_max
            coef = new_coef
            if not problem.policy.fitted or shift < tol:
                break
        else:
            raise ConvergenceError("Closure coefficient for p_I did not settle", {"coefficient": coef})
        residual = float(np.abs(m - base - problem.inner @ (D * m) - problem.outer @ problem.closure(coef, 2)).max())
    elif method == "picard":
        delta = np.inf
        while delta >= tol:
            if iterations >= max_sweeps:
                raise ConvergenceError("Picard sweeps for p_minus did not converge",
                                       {"sweeps": iterations, "update": delta})
            m_new = base + problem.inner @ (D * m) + problem.outer @ problem.closure(coef, 2)
            delta = float(np.abs(m_new - m).max())
            m = m_new
            new_coef = problem.fit(b + D * m, 2)
            delta = max(delta, abs(new_coef - coef) * shape_max)
            coef = new_coef
            iterations += 1
        residual = delta
    else:
        raise ValidationError(f"Unknown solver method: {method}")

    m = np.clip(m, 0.0, 1.0)
    p_i = b + D * m
    logger.info("p_minus solved: coefficient %.6g, min e_K on K %.6g", coef, float((1.0 - m)[in_k].min()))
    return (LatticeField("p_minus", problem, m, coef, iterations, residual),
            LatticeField("p_I", problem, p_i, coef, iterations, residual))


@dataclass
class FieldSet:
    p_c: LatticeField
    p_adj: LatticeField
    p_minus: LatticeField
    p_I: LatticeField
    law: OffspringLaw

    @property
    def problem(self) -> BoxProblem:
        return self.p_c.problem

    def escape_on_K(self) -> pd.DataFrame:
        """e_K(a) = 1 - p_-(a) for every a ∈ K."""
        pts = self.problem.K.points
        return pd.DataFrame({"point": [" ".join(map(str, p)) for p in pts.tolist()],
                             "e_K": 1.0 - self.p_minus.value(pts)})

    def to_frame(self) -> pd.DataFrame:
        frame = self.p_c.to_frame()
        for fld in (self.p_adj, self.p_minus, self.p_I):
            frame[fld.quantity] = fld.values
        return frame


def solve_all(K: LatticeSet, law: OffspringLaw, step: StepLaw, R_box: int,
              policy: Optional[BoundaryPolicy] = None, tol: float = 1e-10, method: str = "newton",
              symmetric: bool = True, max_sweeps: int = 200_000) -> FieldSet:
    p_c = solve_p_c(K, law, step, R_box, policy, tol, method, max_sweeps, symmetric)
    p_adj = solve_p_adj(K, law, step, p_c, tol)
    p_minus, p_i = solve_p_minus(K, law, step, p_adj, tol, "picard" if method == "picard" else "direct",
                                 max_sweeps)
    return FieldSet(p_c, p_adj, p_minus, p_i, law)


def inequality_report(fields: FieldSet) -> Dict[str, float]:
    """Largest violation (positive = violated) of each comparison off K."""
    law = fields.law
    off = ~fields.problem.in_k
    pc, pa = fields.p_c.values[off], fields.p_adj.values[off]
    pm, pi = fields.p_minus.values[off], fields.p_I.values[off]
    s2 = law.variance
    checks = {
        "adj_lower": 2.0 * (1.0 - law.mu0) / s2 * pa - pc,
        "adj_upper": pc - pa / law.mu0 if law.mu0 > 0 else np.zeros_like(pc),
        "c_below_I": pc - pi,
        "adj_below_minus": pa - s2 / 2.0 * pm,
        "minus_below_I": pm - pi,
        "I_below_minus": pi - (s2 / 2.0 + 1.0) * pm,
    }
    return {k: float(v.max()) if len(v) else 0.0 for k, v in checks.items()}


# =============================================================================
# KILLED WALK AND ITS GREEN FUNCTION
# =============================================================================

def target_mode(problem_mode: str, targets: np.ndarray) -> str:
    """Largest orbit reduction fixing every target.

    The origin is fixed by the whole group; points on the first axis by the
    stabilizer of that axis; anything else forces the full box.
    """
    targets = np.atleast_2d(targets)
    if problem_mode == "none" or not np.any(targets):
        return problem_mode
    if not np.any(targets[:, 1:]):
        return AXIS_MODES[problem_mode]
    logger.warning("Off-axis Green targets: solving on the full box")
    return "none"


@dataclass
class KilledWalk:
    """θ-walk killed at x with probability p_adj(x), on an orbit-reduced box.

    Only functions invariant under the geometry's group are represented;
    sources and targets must respect that.
    """
    p_adj: LatticeField
    geometry: BoxGeometry
    kill: np.ndarray
    inner: sparse.csr_matrix
    outer: sparse.csr_matrix
    exterior: np.ndarray

    @classmethod
    def from_field(cls, p_adj: LatticeField, mode: Optional[str] = None) -> "KilledWalk":
        base = p_adj.geometry.mode
        mode = mode or base
        allowed = {base, "none"} | ({AXIS_MODES[base]} if base in AXIS_MODES else set())
        if base == "hyperoctahedral":
            allowed |= {"signs", "axis_signs"}
        if mode not in allowed:
            raise ValidationError(f"Symmetry mode {mode} is coarser than the field's {base}")
        geom = BoxGeometry(p_adj.step.d, p_adj.R_box, mode)
        st = geom.stencil(p_adj.step)
        kill = p_adj.value(geom.points)
        logger.debug("Killed walk on %d points (%s)", len(geom), mode)
        return cls(p_adj, geom, kill, st.inner(), st.outer(), st.exterior_points)

    def potential(self, source: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Σ_y G_K(x, y) source(y) over the box (Dirichlet); source invariant."""
        return _LinearSystem(self.column_operator(), tol).solve(source)

    @property
    def survival(self) -> np.ndarray:
        return 1.0 - self.kill

    def transition(self, x) -> Tuple[float, List[Tuple[Tuple[int, ...], float]]]:
        """(killing probability, [(neighbour, probability), ...]) at x."""
        i = int(self.geometry.lookup(np.asarray(x)[None, :])[0])
        if i < 0:
            raise ValidationError("Point outside the box")
        surv = 1.0 - self.kill[i]
        moves = [(tuple(int(c) for c in np.asarray(x) + z), surv * float(p))
                 for z, p in zip(self.p_adj.step.vectors, self.p_adj.step.probs)]
        return float(self.kill[i]), moves

    def column_operator(self) -> sparse.csr_matrix:
        return (sparse.identity(len(self.kill), format="csr") - sparse.diags(self.survival) @ self.inner).tocsr()

    def row_operator(self) -> sparse.csr_matrix:
        return (sparse.identity(len(self.kill), format="csr") - self.inner @ sparse.diags(self.survival)).tocsr()


@dataclass
class KilledGreen:
    """Columns G_K(·, y_j) and rows G_K(y_j, ·) for a list of targets."""
    walk: KilledWalk
    targets: np.ndarray
    columns: np.ndarray
    rows: np.ndarray
    closure: str
    coefficients: np.ndarray

    @property
    def geometry(self) -> BoxGeometry:
        return self.walk.geometry

    def target_index(self, y) -> int:
        hit = np.nonzero(np.all(self.targets == np.asarray(y, dtype=np.int64), axis=1))[0]
        if not len(hit):
            raise ValidationError("Point is not a computed target", {"y": list(map(int, y))})
        return int(hit[0])

    def G(self, x, y) -> np.ndarray:
        """G_K(x, y) for points x and a target y."""
        idx = self.geometry.lookup(x)
        return self.columns[idx, self.target_index(y)]

    def G_from(self, y, x) -> np.ndarray:
        """G_K(y, x) for a target y and points x."""
        idx = self.geometry.lookup(x)
        return self.rows[idx, self.target_index(y)]


def identity_targets(fields: FieldSet, B: LatticeSet) -> np.ndarray:
    """Targets for identity_report: K, one point of B \\ K and one far point.

    On a reduced box only first-axis points are taken so that the columns
    stay on the axis stabilizer's orbits.
    """
    K = fields.problem.K
    far = np.zeros((1, K.d), dtype=np.int64)
    far[0, 0] = max(fields.p_adj.R_box // 2, int(np.abs(B.points).max()) + 1)
    rim = B.points[~K.contains(B.points)]
    if fields.p_adj.geometry.mode != "none":
        K_pts = K.points[~np.any(K.points[:, 1:], axis=1)]
        rim = rim[~np.any(rim[:, 1:], axis=1)]
    else:
        K_pts = K.points
    return np.unique(np.vstack([K_pts, rim[:1], far]), axis=0)


def green_killed(K: LatticeSet, p_adj_field: LatticeField, targets, tol: float = 1e-12,
                 closure: Optional[str] = None, workers: Optional[int] = None) -> KilledGreen:
    """Solve G = δ_y + (1 - p_adj)·θ * G for each target column, and the row system.

    closure defaults to the field's policy; matched_asymptotic closes each
    column with κ_y c_g |x - y|_θ^{2-d}, κ_y fitted from the far zone.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    walk = KilledWalk.from_field(p_adj_field, target_mode(p_adj_field.geometry.mode, targets))
    geom = walk.geometry
    idx = geom.lookup(targets)
    if np.any(idx < 0):
        raise ValidationError("Green targets must lie in the box", {"R_box": p_adj_field.R_box})
    closure = closure or p_adj_field.policy.kind
    if closure not in POLICIES:
        raise ValidationError(f"Unknown closure: {closure}")
    step = p_adj_field.step
    norm = ThetaNorm(step)
    c_g, d = c_g_constant(step), step.d
    far = np.abs(geom.points).max(axis=1) >= p_adj_field.R_box - p_adj_field.policy.far_width
    col_sys = _LinearSystem(walk.column_operator(), tol)
    row_sys = _LinearSystem(walk.row_operator(), tol)
    surv = walk.survival

    def solve_target(j: int) -> Tuple[np.ndarray, np.ndarray, float]:
        y = targets[j]
        delta = np.zeros(len(geom))
        delta[idx[j]] = 1.0
        if closure == "dirichlet_zero":
            return col_sys.solve(delta), row_sys.solve(delta), 0.0
        ext_shape = c_g * norm(walk.exterior - y) ** (2.0 - d)
        far_shape = c_g * norm(geom.points[far] - y) ** (2.0 - d)
        weighted = geom.multiplicity[far] * far_shape
        kappa, col = 0.0, None
        for _ in range(MAX_OUTER):
            col = col_sys.solve(delta + surv * (walk.outer @ (kappa * ext_shape)), x0=col)
            new = float(col[far] @ weighted / (far_shape @ weighted))
            done = abs(new - kappa) * float(ext_shape.max()) < tol
            kappa = new
            if done:
                break
        row = row_sys.solve(delta + walk.outer @ (kappa * ext_shape))
        return col, row, kappa

    solved = parallel_map(solve_target, range(len(targets)), workers=workers)
    columns = np.column_stack([s[0] for s in solved])
    rows = np.column_stack([s[1] for s in solved])
    logger.info("G_K solved for %d targets on %d points (%s)", len(targets), len(geom), closure)
    return KilledGreen(walk, targets, columns, rows, closure, np.array([s[2] for s in solved]))


# =============================================================================
# HARMONIC MEASURES
# =============================================================================

@dataclass
class SetStencil:
    """θ restricted to a finite set B and its outer shell {z ∉ B : z ~ B}."""
    B: LatticeSet
    shell: LatticeSet
    inside: sparse.csr_matrix
    to_shell: sparse.csr_matrix

    @classmethod
    def build(cls, B: LatticeSet, step: StepLaw) -> "SetStencil":
        n = len(B)
        neighbours = [B.points + z for z in step.vectors]
        outside = np.vstack([nb[~B.contains(nb)] for nb in neighbours])
        if not len(outside):
            raise ValidationError("B has no outer shell")
        shell = LatticeSet(outside, name=f"shell({B.name})")
        rows_in, cols_in, vals_in = [], [], []
        rows_sh, cols_sh, vals_sh = [], [], []
        for nb, p in zip(neighbours, step.probs):
            j = B.index(nb)
            k = shell.index(nb)
            mask = j >= 0
            rows_in.append(np.nonzero(mask)[0])
            cols_in.append(j[mask])
            vals_in.append(np.full(mask.sum(), p))
            rows_sh.append(np.nonzero(~mask)[0])
            cols_sh.append(k[~mask])
            vals_sh.append(np.full((~mask).sum(), p))
        inside = sparse.coo_matrix((np.concatenate(vals_in), (np.concatenate(rows_in), np.concatenate(cols_in))),
                                   shape=(n, n)).tocsr()
        to_shell = sparse.coo_matrix((np.concatenate(vals_sh), (np.concatenate(rows_sh), np.concatenate(cols_sh))),
                                     shape=(n, len(shell))).tocsr()
        return cls(B, shell, inside, to_shell)


@dataclass
class HarmonicMeasureTable:
    """Entrance weights H^B_K(b, a), b in the shell of B, a ∈ K, and exit data from B."""
    B: LatticeSet
    K: LatticeSet
    shell: np.ndarray
    entrance: np.ndarray
    exit_mass: np.ndarray
    exit_pairs: List[Tuple[Tuple[int, ...], Tuple[int, ...], float]]
    hit_weight: np.ndarray

    def weight(self, b, a) -> float:
        i = np.nonzero(np.all(self.shell == np.asarray(b), axis=1))[0]
        j = self.K.index(np.asarray(a)[None, :])[0]
        if not len(i) or j < 0:
            return 0.0
        return float(self.entrance[i[0], j])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, b in enumerate(self.shell.tolist()):
            for j, a in enumerate(self.K.points.tolist()):
                w = float(self.entrance[i, j])
                if w > 0:
                    rows.append({"b": " ".join(map(str, b)), "a": " ".join(map(str, a)), "weight": w})
        for x, z, w in self.exit_pairs:
            rows.append({"b": " ".join(map(str, x)), "a": " ".join(map(str, z)), "weight": w})
        return pd.DataFrame(rows, columns=["b", "a", "weight"])


def harmonic_measure(K: LatticeSet, B: LatticeSet, p_adj_field: LatticeField,
                     pairs: Optional[Sequence[Tuple[Sequence[int], Sequence[int]]]] = None,
                     tol: float = 1e-12) -> HarmonicMeasureTable:
    """H^B_K by absorbing linear systems on B.

    Entrance: H(b, a) = (1 - p_adj(b)) Σ_{w∈B} θ(w - b) h_a(w) with
    h_a = δ_a + (1 - p_adj)·θ_B h_a on B. Exit: for x ∈ B and z ∉ B, the
    killed walk's weight of leaving B at z.
    """
    if not np.all(B.contains(K.points)):
        raise ValidationError("K must be contained in B")
    st = SetStencil.build(B, p_adj_field.step)
    if np.abs(st.shell.points).max() > p_adj_field.R_box:
        raise ValidationError("The shell of B must lie in the solver box", {"R_box": p_adj_field.R_box})
    surv_B = 1.0 - p_adj_field.value(B.points)
    surv_sh = 1.0 - p_adj_field.value(st.shell.points)
    system = _LinearSystem(sparse.identity(len(B), format="csr") - sparse.diags(surv_B) @ st.inside, tol)

    k_rows = B.index(K.points)
    rhs = np.zeros((len(B), len(K)))
    rhs[k_rows, np.arange(len(K))] = 1.0
    h = np.column_stack([system.solve(rhs[:, j]) for j in range(len(K))])
    entrance = surv_sh[:, None] * (st.to_shell.T @ h)

    exit_mass = system.solve(surv_B * (st.to_shell @ np.ones(len(st.shell))))
    hit_weight = system.solve(rhs.sum(axis=1))

    exit_pairs = []
    by_target: Dict[Tuple[int, ...], List[Tuple[int, ...]]] = {}
    for x, z in pairs or []:
        by_target.setdefault(tuple(int(c) for c in z), []).append(tuple(int(c) for c in x))
    for z, xs in by_target.items():
        k = st.shell.index(np.asarray(z)[None, :])[0]
        if k < 0:
            raise ValidationError("Exit point is not adjacent to B", {"z": list(z)})
        e_z = np.zeros(len(st.shell))
        e_z[k] = 1.0
        u = system.solve(surv_B * (st.to_shell @ e_z))
        for x in xs:
            i = B.index(np.asarray(x)[None, :])[0]
            if i < 0:
                raise ValidationError("Start point must lie in B", {"x": list(x)})
            exit_pairs.append((x, z, float(u[i])))

    return HarmonicMeasureTable(B, K, st.shell.points, entrance, exit_mass, exit_pairs, hit_weight)


def harmonic_capacity(table: HarmonicMeasureTable, p_minus: LatticeField) -> float:
    """Σ_{a∈K} Σ_{b∉B} H^B_K(b, a) e_K(b)."""
    e_shell = 1.0 - p_minus.value(table.shell)
    return float(e_shell @ table.entrance.sum(axis=1))


# =============================================================================
# IDENTITY REPORT
# =============================================================================

def identity_report(fields: FieldSet, green: KilledGreen, B: Optional[LatticeSet] = None,
                    tol: float = 1e-12) -> Dict[str, float]:
    """Residuals of the exact identities tying G_K, H^B_K and the fields together.

    Exact up to solver precision under dirichlet_zero closure; under matched
    closure the G_K identities carry the closure mismatch and are reported only.
    """
    walk = green.walk
    K = fields.problem.K
    report: Dict[str, float] = {}

    # K-indicator and killing sources share the fields' full symmetry
    sym = walk if walk.geometry.mode == fields.p_adj.geometry.mode else KilledWalk.from_field(fields.p_adj)
    pts = sym.geometry.points
    p_c = fields.p_c.value(pts)
    sum_k = sym.potential(K.contains(pts).astype(float), tol)
    report["p_c_from_G"] = float(np.abs(sum_k - p_c).max())
    p_i = fields.p_I.value(pts)
    report["p_I_from_G"] = float(np.abs(sym.potential(sym.kill, tol) - p_i).max())

    surv = walk.survival
    worst = 0.0
    for j, y in enumerate(green.targets):
        jy = walk.geometry.lookup(y[None, :])[0]
        lhs = green.columns[:, j] * surv[jy]
        rhs = surv * green.rows[:, j]
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    report["reversibility"] = worst

    if B is not None:
        table = harmonic_measure(K, B, fields.p_adj, tol=tol)
        st = SetStencil.build(B, fields.p_adj.step)
        surv_B = 1.0 - fields.p_adj.value(B.points)
        system = _LinearSystem(sparse.identity(len(B), format="csr") - sparse.diags(surv_B) @ st.inside, tol)
        exit1 = exit2 = 0.0
        idx_B = walk.geometry.lookup(B.points)
        idx_sh = walk.geometry.lookup(st.shell.points)
        surv_sh = 1.0 - fields.p_adj.value(st.shell.points)
        in_B = [j for j, y in enumerate(green.targets) if B.contains(y[None, :])[0]]
        out_B = [j for j in range(len(green.targets)) if j not in in_B]
        for j in out_B:
            v = system.solve(surv_B * (st.to_shell @ green.columns[idx_sh, j]))
            exit1 = max(exit1, float(np.abs(v - green.columns[idx_B, j]).max()))
        for ix in in_B:
            delta = np.zeros(len(B))
            delta[B.index(green.targets[ix][None, :])[0]] = 1.0
            h_x = system.solve(delta)
            H_zx = surv_sh * (st.to_shell.T @ h_x)
            for jy in out_B:
                lhs = green.columns[walk.geometry.lookup(green.targets[jy][None, :])[0], ix]
                rhs = float(green.rows[idx_sh, jy] @ H_zx)
                exit2 = max(exit2, abs(lhs - rhs))
        report["first_entrance"] = exit1
        report["last_exit"] = exit2
        e_B = (1.0 - fields.p_adj.value(B.points)) * (1.0 - fields.p_minus.value(B.points))
        report["exit_mass_deficit"] = float(np.maximum(e_B - table.exit_mass, 0.0).max())
        e_K = 1.0 - fields.p_minus.value(K.points)
        report["bcap_harmonic_vs_sum"] = abs(harmonic_capacity(table, fields.p_minus) - float(e_K.sum()))

    domination = green_domination(green)
    report["G_K_over_box_green"] = domination
    for name, value in report.items():
        logger.debug("identity %s: %.3e", name, value)
    return report


def _box_green_columns(walk: KilledWalk, targets: np.ndarray, tol: float) -> np.ndarray:
    """Dirichlet Green function of the unkilled walk on the same box."""
    n = len(walk.kill)
    system = _LinearSystem(sparse.identity(n, format="csr") - walk.inner, tol)
    idx = walk.geometry.lookup(targets)
    cols = []
    for i in idx:
        delta = np.zeros(n)
        delta[i] = 1.0
        cols.append(system.solve(delta))
    return np.column_stack(cols)


def green_domination(green: KilledGreen, tol: float = 1e-12) -> float:
    """max (G_K - g_box) over the computed columns; never positive."""
    free = _box_green_columns(green.walk, green.targets, tol)
    return float((green.columns - free).max())


def green_comparison(fields: FieldSet, s_values: Sequence[float], tol: float = 1e-12) -> pd.DataFrame:
    """max over box pairs with |x|, |y| ≥ s·r of 1 - G_K(x, y)/g_box(x, y).

    y runs over ±s·r along the first axis; x over interior box points (one
    per orbit of the axis stabilizer). The killed walk is compared with the
    unkilled walk on the same box so the box's own absorption cancels.
    Every requested s must fit: s·r <= R_box - ρ.
    """
    K = fields.problem.K
    r = max(K.radius, 1.0)
    R_box = fields.p_adj.R_box
    rho = fields.p_adj.step.support_radius
    s_values = [float(s) for s in s_values]
    too_far = [s for s in s_values if int(math.ceil(s * r)) > R_box - rho]
    if too_far:
        raise BracketInfeasibleError("Green comparison rungs do not fit in the box",
                                     {"s": too_far, "r": r, "R_box": R_box,
                                      "R_box_needed": int(math.ceil(max(too_far) * r)) + rho})
    rows = []
    for s in s_values:
        radius = int(math.ceil(s * r))
        targets = np.zeros((2, K.d), dtype=np.int64)
        targets[0, 0], targets[1, 0] = radius, -radius
        gk = green_killed(K, fields.p_adj, targets, tol, closure="dirichlet_zero")
        pts = gk.geometry.points
        interior = np.abs(pts).max(axis=1) <= R_box - rho
        norms = np.sqrt((pts.astype(float) ** 2).sum(axis=1))
        free = _box_green_columns(gk.walk, targets, tol)
        sel = (interior & (norms >= s * r))[:, None] & (free > 0)
        deficit = 1.0 - gk.columns[sel] / free[sel]
        rows.append({"s": float(s), "max_deficit": float(deficit.max()), "pairs": int(deficit.size)})
    frame = pd.DataFrame(rows, columns=["s", "max_deficit", "pairs"])
    if len(frame) > 1 and np.any(np.diff(frame["max_deficit"].to_numpy()) > 0):
        logger.warning("Green comparison deficit is not monotone along the ladder")
    return frame
