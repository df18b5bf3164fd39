"""
Riesz capacities of discretized compact sets.

Cap_γ(K) = 1 / min_ν Σ_ij k_γ(x_i - x_j) ν_i ν_j over probability vectors ν on
the cloud, with k_γ(x) = C_{d,γ} |x|^{-γ} and the self-interaction of a cell
replaced by the kernel average over a ball of the same (intrinsic) volume.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from scipy.special import gamma as gamma_fn

from exceptions import ConvergenceError, ValidationError
from runtime import get_logger, parallel_map
from snake import find_a0

logger = get_logger("riesz")


def kernel_constant(d: int, gamma: float) -> float:
    """C_{d,γ} = π^{-γ+d/2} Γ(γ/2) / Γ((d-γ)/2)."""
    if not 0.0 < gamma < d:
        raise ValidationError("Riesz exponent must lie in (0, d)", {"d": d, "gamma": gamma})
    return math.pi ** (-gamma + d / 2.0) * gamma_fn(gamma / 2.0) / gamma_fn((d - gamma) / 2.0)


def _unit_ball_volume(k: int) -> float:
    return math.pi ** (k / 2.0) / gamma_fn(k / 2.0 + 1.0)


# =============================================================================
# POINT CLOUDS
# =============================================================================

@dataclass
class DiscretizedCompact:
    """Quadrature cloud: points, cell measures of intrinsic dimension `dim`, descriptor."""
    points: np.ndarray
    weights: np.ndarray
    descriptor: str
    h: float
    dim: int
    extent: Optional[float] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if len(self.points) == 0:
            raise ValidationError("Discretized set is empty", {"descriptor": self.descriptor})
        if len(self.weights) != len(self.points) or np.any(self.weights <= 0):
            raise ValidationError("Cell weights must be positive, one per point")
        if not 0 <= self.dim <= self.d:
            raise ValidationError("Intrinsic dimension out of range", {"dim": self.dim})

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def ball(cls, d: int, radius: float, h: float, center: Optional[Sequence[float]] = None) -> "DiscretizedCompact":
        m = int(math.floor(radius / h + 1e-9))
        axes = [np.arange(-m, m + 1) * h] * d
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        pts = grid[(grid ** 2).sum(axis=1) <= radius ** 2 * (1 + 1e-12)]
        if center is not None:
            pts = pts + np.asarray(center, dtype=float)
        return cls(pts, np.full(len(pts), h ** d), f"ball({radius:g})", h, d, radius)

    @classmethod
    def point(cls, d: int, h: float) -> "DiscretizedCompact":
        return cls(np.zeros((1, d)), np.array([h ** d]), "point", h, d)

    @classmethod
    def sphere(cls, d: int, radius: float, h: float) -> "DiscretizedCompact":
        """Grid points of a shell of width h projected onto the sphere, area-normalized."""
        m = int(math.ceil((radius + h) / h))
        axes = [np.arange(-m, m + 1) * h] * d
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        r = np.sqrt((grid ** 2).sum(axis=1))
        shell = grid[(r >= radius - h / 2) & (r < radius + h / 2)]
        proj = shell * (radius / np.sqrt((shell ** 2).sum(axis=1)))[:, None]
        proj, first = np.unique(np.round(proj, 12), axis=0, return_index=True)
        w = h ** (d - 1) * (radius / np.sqrt((shell[first] ** 2).sum(axis=1))) ** (d - 1)
        area = 2.0 * math.pi ** (d / 2.0) / gamma_fn(d / 2.0) * radius ** (d - 1)
        return cls(proj, w * area / w.sum(), f"sphere({radius:g})", h, d - 1, radius)

    @classmethod
    def box(cls, lo: Sequence[float], hi: Sequence[float], h: float) -> "DiscretizedCompact":
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValidationError("Box corners are inconsistent")
        axes = [lo[i] + h / 2 + np.arange(max(int(round((hi[i] - lo[i]) / h)), 1)) * h for i in range(len(lo))]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
        return cls(pts, np.full(len(pts), h ** len(lo)), "box", h, len(lo))

    @classmethod
    def from_file(cls, path: str, d: int, h: float, dim: Optional[int] = None) -> "DiscretizedCompact":
        """CSV with d coordinate columns and an optional weight column."""
        p = Path(path)
        if not p.exists():
            raise ValidationError("Points file not found", {"path": path})
        frame = pd.read_csv(p, header=None, comment="#")
        if frame.shape[1] not in (d, d + 1):
            raise ValidationError("Points file has the wrong number of columns", {"path": path, "d": d})
        pts = frame.iloc[:, :d].to_numpy(dtype=float)
        dim = d if dim is None else dim
        w = frame.iloc[:, d].to_numpy(dtype=float) if frame.shape[1] == d + 1 else np.full(len(pts), h ** dim)
        return cls(pts, w, p.stem, h, dim)

    @classmethod
    def parse(cls, spec: str, d: int, h: float) -> "DiscretizedCompact":
        """'ball:<r>', 'sphere:<r>', 'box:<side>', 'point' or 'points:<csv>'."""
        kind, _, arg = spec.partition(":")
        if kind == "ball":
            return cls.ball(d, float(arg or 1.0), h)
        if kind == "sphere":
            return cls.sphere(d, float(arg or 1.0), h)
        if kind == "box":
            side = float(arg or 1.0)
            return cls.box([-side / 2] * d, [side / 2] * d, h)
        if kind == "point":
            return cls.point(d, h)
        if kind == "points":
            return cls.from_file(arg, d, h)
        raise ValidationError(f"Unknown continuum set: {spec}")

    def translate(self, shift: Sequence[float]) -> "DiscretizedCompact":
        return DiscretizedCompact(self.points + np.asarray(shift, dtype=float), self.weights,
                                  f"{self.descriptor}+shift", self.h, self.dim, self.extent)

    def scale(self, a: float) -> "DiscretizedCompact":
        return DiscretizedCompact(self.points * a, self.weights * a ** self.dim, f"{a:g}*{self.descriptor}",
                                  self.h * a, self.dim, None if self.extent is None else self.extent * a)

    def union(self, other: "DiscretizedCompact") -> "DiscretizedCompact":
        if other.dim != self.dim:
            raise ValidationError("Cannot merge clouds of different intrinsic dimension")
        return DiscretizedCompact(np.vstack([self.points, other.points]), np.concatenate([self.weights, other.weights]),
                                  f"{self.descriptor}|{other.descriptor}", min(self.h, other.h), self.dim)

    def to_dict(self) -> Dict:
        return {"descriptor": self.descriptor, "d": self.d, "dim": self.dim, "h": self.h, "points": len(self)}


# =============================================================================
# ENERGY MINIMIZATION
# =============================================================================

@dataclass
class RieszParams:
    tol: float = 1e-6
    max_iter: int = 20_000
    dense_limit: int = 4000
    block: int = 1024
    armijo: float = 1e-4
    workers: Optional[int] = None


@dataclass
class EquilibriumResult:
    gamma: float
    energy: float
    capacity: float
    weights: np.ndarray = field(repr=False)
    kernel_constant: float
    kkt_residual: float
    iterations: int
    cloud: DiscretizedCompact = field(repr=False)

    def to_dict(self) -> Dict:
        return {
            "gamma": self.gamma,
            "energy": self.energy,
            "capacity": self.capacity,
            "kernel_constant": self.kernel_constant,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "support_size": int((self.weights > 0).sum()),
            **self.cloud.to_dict(),
        }

    def weights_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.cloud.points, columns=[f"x{i + 1}" for i in range(self.cloud.d)])
        frame["weight"] = self.weights
        return frame


def self_interaction(cloud: DiscretizedCompact, gamma: float, C: float) -> np.ndarray:
    """Average of C|x|^{-γ} over a ball of the cell's intrinsic volume."""
    k = cloud.dim
    if gamma >= k:
        raise ValidationError("Riesz exponent must be below the set's dimension", {"gamma": gamma, "dim": k})
    rho = (cloud.weights / _unit_ball_volume(k)) ** (1.0 / k)
    return C * k * rho ** (-gamma) / (k - gamma)


class _KernelOperator:
    """v ↦ K v, dense below the size limit and row-blocked above it."""

    def __init__(self, cloud: DiscretizedCompact, gamma: float, C: float, params: RieszParams):
        self.cloud, self.gamma, self.C, self.params = cloud, gamma, C, params
        self.diag = self_interaction(cloud, gamma, C)
        self.matrix = self._block(0, len(cloud)) if len(cloud) <= params.dense_limit else None

    def _block(self, start: int, stop: int) -> np.ndarray:
        dist = cdist(self.cloud.points[start:stop], self.cloud.points)
        with np.errstate(divide="ignore"):
            K = self.C * dist ** (-self.gamma)
        rows = np.arange(stop - start)
        K[rows, rows + start] = self.diag[start:stop]
        return K

    def __matmul__(self, v: np.ndarray) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix @ v
        n, b = len(self.cloud), self.params.block
        parts = parallel_map(lambda s: self._block(s, min(s + b, n)) @ v, range(0, n, b),
                             workers=self.params.workers)
        return np.concatenate(parts)


def simplex_projection(c: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {x ≥ 0, Σx = 1} by sorting."""
    n = len(c)
    a = -np.sort(-c)
    lambdas = (np.cumsum(a) - 1.0) / np.arange(1, n + 1)
    k = np.nonzero(a > lambdas)[0][-1]
    return np.maximum(c - lambdas[k], 0.0)


def kkt_residual(nu: np.ndarray, potential: np.ndarray, energy: float) -> float:
    """Relative gap of the potential to the energy level: equal on the support, not below it anywhere."""
    support = nu > 1e-3 / len(nu)
    on = np.abs(potential[support] - energy).max() if support.any() else 0.0
    below = np.maximum(energy - potential, 0.0).max()
    return float(max(on, below) / energy)


def riesz_capacity(cloud: DiscretizedCompact, gamma: float,
                   params: Optional[RieszParams] = None) -> EquilibriumResult:
    """Spectral projected gradient with Armijo backtracking on the simplex."""
    params = params or RieszParams()
    C = kernel_constant(cloud.d, gamma)
    K = _KernelOperator(cloud, gamma, C, params)
    n = len(cloud)
    nu = np.full(n, 1.0 / n)
    phi = K @ nu
    energy = float(nu @ phi)
    step = 1.0 / float(K.diag.max())
    residual = kkt_residual(nu, phi, energy)
    it = 0
    while residual >= params.tol:
        if it >= params.max_iter:
            raise ConvergenceError("Riesz energy minimization did not converge",
                                   {"iterations": it, "kkt_residual": residual, "n": n})
        grad = 2.0 * phi
        direction = simplex_projection(nu - step * grad) - nu
        k_dir = K @ direction
        slope = float(grad @ direction)
        curv = float(direction @ k_dir)
        lam = 1.0
        while energy + lam * slope + lam ** 2 * curv > energy + params.armijo * lam * slope and lam > 1e-12:
            lam *= 0.5
        nu = nu + lam * direction
        phi = phi + lam * k_dir
        energy = float(nu @ phi)
        # Barzilai-Borwein: s = λ·dir, y = 2λ·K dir
        step = float(direction @ direction) / (2.0 * curv) if curv > 0 else step
        it += 1
        residual = kkt_residual(nu, phi, energy)
        if it % 500 == 0:
            logger.debug("riesz iteration %d: energy %.10g, KKT %.2e", it, energy, residual)
    nu = np.where(nu > 0, nu, 0.0)
    logger.info("Cap_%g(%s) = %.8g after %d iterations (n=%d)", gamma, cloud.descriptor, 1.0 / energy, it, n)
    return EquilibriumResult(gamma, energy, 1.0 / energy, nu, C, residual, it, cloud)


def richardson(builder: Callable[[float], DiscretizedCompact], gamma: float, h: float, order: float = 1.0,
               params: Optional[RieszParams] = None) -> Dict:
    """Capacities at h and h/2 and the extrapolation assuming an O(h^order) error."""
    coarse = riesz_capacity(builder(h), gamma, params)
    fine = riesz_capacity(builder(h / 2.0), gamma, params)
    factor = 2.0 ** order
    extrapolated = (factor * fine.capacity - coarse.capacity) / (factor - 1.0)
    return {"h": h, "capacity_h": coarse.capacity, "capacity_h2": fine.capacity,
            "extrapolated": extrapolated, "order": order}


def interior_weight(result: EquilibriumResult, radius: float, shell: float) -> float:
    """Total equilibrium mass at distance below radius - shell from the origin."""
    r = np.sqrt((result.cloud.points ** 2).sum(axis=1))
    return float(result.weights[r < radius - shell].sum())


# =============================================================================
# SNAKE CAPACITY COMPARISON
# =============================================================================

def bscap_riesz_ratio(d: int, ball_result: EquilibriumResult, a0: float) -> Dict:
    """BScap(B(0,r)) / Cap_{d-4}(B(0,r)) for the ball the result was computed on."""
    if d < 5:
        raise ValidationError("The comparison needs d >= 5", {"d": d})
    if abs(ball_result.gamma - (d - 4)) > 1e-12:
        raise ValidationError("Ball result must use γ = d - 4", {"gamma": ball_result.gamma})
    radius = ball_result.cloud.extent
    if radius is None or ball_result.cloud.dim != d:
        raise ValidationError("The comparison needs a solid ball cloud", ball_result.cloud.to_dict())
    bscap = radius ** (d - 4) * a0
    ratio = bscap / ball_result.capacity
    return {"d": d, "radius": radius, "bscap": bscap, "riesz_capacity": ball_result.capacity,
            "ratio": ratio, "positive_finite": bool(np.isfinite(ratio) and ratio > 0)}


def riesz_sweep(dims: Sequence[int] = (5, 6, 7), radius: float = 1.0, h: float = 0.5,
                params: Optional[RieszParams] = None) -> pd.DataFrame:
    """The ratio report across dimensions, with a₀ from the series classifier."""
    rows: List[Dict] = []
    for d in dims:
        a0 = 6.0 if d == 6 else find_a0(d, strict=False).a0
        result = riesz_capacity(DiscretizedCompact.ball(d, radius, h * radius), d - 4, params)
        rows.append(bscap_riesz_ratio(d, result, a0))
    frame = pd.DataFrame(rows)
    if not frame["positive_finite"].all():
        logger.warning("Non-positive snake/Riesz ratio in the sweep")
    return frame
