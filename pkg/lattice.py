"""
LATTICE GEOMETRY, STEP LAWS AND GREEN FUNCTIONS
===============================================
Step distributions θ on Z^d, the θ-norm, the Green function
g(x) = Σ_n P_0(S_n = x) with its asymptotic constant c_g, and the
second-order kernel G(x) = Σ_y g(x - y) g(y).

Symmetry-reduced boxes (orbits of coordinate permutations and sign flips)
are shared with the field solver through BoxGeometry.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import gamma, gammainc, ive

from exceptions import ConvergenceError, ValidationError
from runtime import TableCache, content_hash, get_logger, parallel_map

logger = get_logger("lattice")

PROB_TOL = 1e-12
SYMMETRY_MODES = ("hyperoctahedral", "signs", "axis", "axis_signs", "none")
# Stabilizers of the first coordinate axis: coordinate 0 is left alone.
AXIS_MODES = {"hyperoctahedral": "axis", "signs": "axis_signs"}


# =============================================================================
# STEP LAWS
# =============================================================================

@dataclass(frozen=True, eq=False)
class StepLaw:
    """Symmetric finite-support step distribution θ on Z^d."""
    d: int
    vectors: np.ndarray
    probs: np.ndarray
    name: str = "custom"
    covariance: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.int64).reshape(-1, self.d)
        probs = np.asarray(self.probs, dtype=float).ravel()
        if self.d < 1:
            raise ValidationError("Dimension must be >= 1", {"d": self.d})
        if len(vectors) != len(probs) or len(vectors) == 0:
            raise ValidationError("Support vectors and probabilities must pair up")
        if np.any(probs < 0):
            raise ValidationError("Negative step probability")
        total = probs.sum()
        if abs(total - 1.0) > PROB_TOL:
            raise ValidationError("Step probabilities must sum to 1", {"sum": float(total)})

        # Merge repeated vectors, drop null atoms, fix a canonical order.
        uniq, inverse = np.unique(vectors, axis=0, return_inverse=True)
        merged = np.zeros(len(uniq))
        np.add.at(merged, inverse.ravel(), probs)
        keep = merged > 0
        uniq, merged = uniq[keep], merged[keep]

        lookup = {tuple(v): p for v, p in zip(uniq.tolist(), merged)}
        for v, p in lookup.items():
            q = lookup.get(tuple(-c for c in v), 0.0)
            if abs(p - q) > PROB_TOL:
                raise ValidationError("Step law is not symmetric", {"vector": list(v)})

        cov = (uniq.T * merged) @ uniq
        if np.linalg.matrix_rank(cov) < self.d or np.linalg.det(cov) <= 0:
            raise ValidationError("Degenerate covariance matrix")
        if _lattice_index(uniq) != 1:
            raise ValidationError("Support does not generate Z^d", {"name": self.name})

        object.__setattr__(self, "vectors", uniq)
        object.__setattr__(self, "probs", merged)
        object.__setattr__(self, "covariance", cov)

    @property
    def support_radius(self) -> int:
        return int(np.abs(self.vectors).max())

    @property
    def l1_radius(self) -> int:
        return int(np.abs(self.vectors).sum(axis=1).max())

    @property
    def is_axis_aligned(self) -> bool:
        return bool(np.all((self.vectors != 0).sum(axis=1) <= 1))

    @property
    def symmetry_mode(self) -> str:
        """Largest reduction group the law is invariant under."""
        for mode in ("hyperoctahedral", "signs"):
            if is_invariant(self.vectors, mode, weights=self.probs):
                return mode
        return "none"

    @property
    def period(self) -> int:
        return 2 if self.parity_vector is not None else 1

    @property
    def parity_vector(self) -> Optional[np.ndarray]:
        """v in {0,1}^d with v·z odd for every support vector, if one exists."""
        for bits in itertools.product((0, 1), repeat=self.d):
            v = np.array(bits, dtype=np.int64)
            if v.any() and np.all((self.vectors @ v) % 2 == 1):
                return v
        return None

    def digest(self) -> str:
        return content_hash({"d": self.d, "vectors": self.vectors, "probs": np.round(self.probs, 15)})

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "d": self.d,
            "support_size": int(len(self.vectors)),
            "covariance_diag": np.diag(self.covariance).tolist(),
            "symmetry": self.symmetry_mode,
            "period": self.period,
        }


def _lattice_index(vectors: np.ndarray) -> int:
    """Index of the sublattice generated by the vectors (0 if rank-deficient)."""
    rows = [list(map(int, v)) for v in vectors]
    d = len(rows[0])
    basis: List[List[int]] = []
    for col in range(d):
        pivot_rows = [r for r in rows if r[col] != 0]
        rest = [r for r in rows if r[col] == 0]
        # Euclid on the column until one row keeps a nonzero entry.
        while len(pivot_rows) > 1:
            pivot_rows.sort(key=lambda r: abs(r[col]))
            p = pivot_rows[0]
            reduced = [p]
            for r in pivot_rows[1:]:
                q = r[col] // p[col]
                r = [a - q * b for a, b in zip(r, p)]
                (reduced if r[col] != 0 else rest).append(r)
            pivot_rows = reduced
        if not pivot_rows:
            return 0
        basis.append(pivot_rows[0])
        rows = [r for r in rest if any(r)]
    det = 1
    for i, row in enumerate(basis):
        det *= row[i]
    return abs(det)


def make_step_law(kind: str, d: int, custom_support: Optional[Sequence[Tuple[Sequence[int], float]]] = None) -> StepLaw:
    if d < 1:
        raise ValidationError("Dimension must be >= 1", {"d": d})
    eye = np.eye(d, dtype=np.int64)
    if kind == "simple":
        vectors = np.vstack([eye, -eye])
        probs = np.full(2 * d, 1.0 / (2 * d))
    elif kind == "lazy_simple":
        vectors = np.vstack([np.zeros((1, d), dtype=np.int64), eye, -eye])
        probs = np.concatenate([[0.5], np.full(2 * d, 1.0 / (4 * d))])
    elif kind == "custom":
        if not custom_support:
            raise ValidationError("custom step law needs a support list")
        vectors = np.array([list(v) for v, _ in custom_support], dtype=np.int64)
        probs = np.array([float(p) for _, p in custom_support])
        if vectors.shape[1] != d:
            raise ValidationError("Support vectors have the wrong dimension", {"d": d})
    else:
        raise ValidationError(f"Unknown step law kind: {kind}")
    return StepLaw(d=d, vectors=vectors, probs=probs, name=kind)


class ThetaNorm:
    """|x|_θ = sqrt(xᵀ M_θ^{-1} x)."""

    def __init__(self, law: StepLaw):
        self.law = law
        self.inv_cov = np.linalg.inv(law.covariance)

    def squared(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.inv_cov, x)

    def __call__(self, points) -> np.ndarray:
        return np.sqrt(np.maximum(self.squared(points), 0.0))


def c_g_constant(law: StepLaw) -> float:
    d = law.d
    if d < 3:
        raise ValidationError("c_g is defined for d >= 3", {"d": d})
    return float(gamma((d - 2) / 2.0) / (2.0 * math.pi ** (d / 2.0) * math.sqrt(np.linalg.det(law.covariance))))


def gaussian_prefactor(law: StepLaw) -> float:
    """(2π)^{-d/2} det(M_θ)^{-1/2}, the local limit density at unit time."""
    return float((2.0 * math.pi) ** (-law.d / 2.0) / math.sqrt(np.linalg.det(law.covariance)))


# =============================================================================
# SYMMETRY ORBITS AND BOX GEOMETRY
# =============================================================================

def canonicalize(points, mode: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.int64)
    if mode == "hyperoctahedral":
        return -np.sort(-np.abs(pts), axis=-1)
    if mode == "signs":
        return np.abs(pts)
    if mode in ("axis", "axis_signs"):
        out = pts.copy()
        out[..., 1:] = canonicalize(pts[..., 1:], "hyperoctahedral" if mode == "axis" else "signs")
        return out
    if mode == "none":
        return pts.copy()
    raise ValidationError(f"Unknown symmetry mode: {mode}")


def orbit_sizes(canon: np.ndarray, mode: str) -> np.ndarray:
    canon = np.atleast_2d(canon)
    n, d = canon.shape
    if mode == "none":
        return np.ones(n, dtype=np.int64)
    if mode in ("axis", "axis_signs"):
        return orbit_sizes(canon[:, 1:], "hyperoctahedral" if mode == "axis" else "signs")
    sizes = np.left_shift(np.ones(n, dtype=np.int64), (canon != 0).sum(axis=1))
    if mode == "hyperoctahedral":
        fact = np.array([math.factorial(k) for k in range(d + 1)], dtype=np.int64)
        perms = np.full(n, fact[d], dtype=np.int64)
        for v in np.unique(canon):
            perms //= fact[(canon == v).sum(axis=1)]
        sizes *= perms
    return sizes


def is_invariant(points, mode: str, weights: Optional[np.ndarray] = None) -> bool:
    """True when the point set (optionally weighted) is a union of full orbits."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
    if mode == "none":
        return True
    canon = canonicalize(pts, mode)
    classes, inverse, counts = np.unique(canon, axis=0, return_inverse=True, return_counts=True)
    if not np.array_equal(counts, orbit_sizes(classes, mode)):
        return False
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        inverse = inverse.ravel()
        for c in range(len(classes)):
            vals = w[inverse == c]
            if np.ptp(vals) > PROB_TOL:
                return False
    return True


def _monotone_tuples(d: int, max_value: int, max_sum: Optional[int]) -> np.ndarray:
    """Nonincreasing tuples of nonnegative ints bounded by max_value (and max_sum)."""
    out: List[Tuple[int, ...]] = []

    def extend(prefix: List[int], cap: int, budget: int):
        if len(prefix) == d:
            out.append(tuple(prefix))
            return
        for v in range(min(cap, budget), -1, -1):
            prefix.append(v)
            extend(prefix, v, budget - v)
            prefix.pop()

    extend([], max_value, max_value * d if max_sum is None else max_sum)
    return np.array(out, dtype=np.int64).reshape(-1, d)


@dataclass
class Stencil:
    """Gather operator of θ on a geometry: row x -> Σ_z θ(z) f(x+z).

    Columns >= n refer to exterior points (canonical form), listed in
    exterior_points.
    """
    operator: sparse.csr_matrix
    exterior_points: np.ndarray
    interior_mask: np.ndarray

    @property
    def n_interior(self) -> int:
        return self.operator.shape[0]

    def inner(self) -> sparse.csr_matrix:
        return self.operator[:, : self.n_interior].tocsr()

    def outer(self) -> sparse.csr_matrix:
        return self.operator[:, self.n_interior:].tocsr()


class BoxGeometry:
    """Points of a sup-norm box (or l1 ball) in Z^d, optionally reduced to orbits."""

    def __init__(self, d: int, R: int, mode: str = "hyperoctahedral", norm: str = "sup"):
        if mode not in SYMMETRY_MODES:
            raise ValidationError(f"Unknown symmetry mode: {mode}")
        if norm not in ("sup", "l1"):
            raise ValidationError(f"Unknown box norm: {norm}")
        self.d, self.R, self.mode, self.norm = d, int(R), mode, norm
        points = self._enumerate()
        keys = self._encode(points)
        order = np.argsort(keys, kind="stable")
        self.points = points[order]
        self.keys = keys[order]
        self.multiplicity = orbit_sizes(self.points, mode)

    def __len__(self) -> int:
        return len(self.points)

    def _enumerate(self) -> np.ndarray:
        d, R = self.d, self.R
        if self.mode == "hyperoctahedral":
            return _monotone_tuples(d, R, R if self.norm == "l1" else None)
        if self.mode in ("axis", "axis_signs"):
            return self._enumerate_axis()
        lo = 0 if self.mode == "signs" else -R
        axes = [np.arange(lo, R + 1)] * d
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        if self.norm == "l1":
            grid = grid[np.abs(grid).sum(axis=1) <= R]
        return grid.astype(np.int64)

    def _enumerate_axis(self) -> np.ndarray:
        d, R = self.d, self.R
        blocks, cached = [], {}
        for head in range(-R, R + 1):
            budget = R - abs(head) if self.norm == "l1" else R
            if budget in cached:
                tail = cached[budget]
            elif self.mode == "axis":
                tail = _monotone_tuples(d - 1, budget, budget if self.norm == "l1" else None)
            else:
                axes = [np.arange(0, budget + 1)] * (d - 1)
                tail = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d - 1)
                if self.norm == "l1":
                    tail = tail[tail.sum(axis=1) <= budget]
            cached[budget] = tail
            blocks.append(np.hstack([np.full((len(tail), 1), head, dtype=np.int64), tail]))
        return np.vstack(blocks).astype(np.int64)

    def _encode(self, canon: np.ndarray, R: Optional[int] = None) -> np.ndarray:
        R = self.R if R is None else R
        signed = self.mode in ("none", "axis", "axis_signs")
        offset = R if signed else 0
        base = 2 * R + 1 if signed else R + 1
        powers = base ** np.arange(self.d, dtype=np.int64)
        return (canon + offset) @ powers

    def contains(self, canon: np.ndarray) -> np.ndarray:
        if self.norm == "l1":
            return np.abs(canon).sum(axis=-1) <= self.R
        return np.abs(canon).max(axis=-1) <= self.R

    def lookup(self, points, canonical: bool = False) -> np.ndarray:
        """Index of each point's orbit representative; -1 outside the box."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        canon = pts if canonical else canonicalize(pts, self.mode)
        idx = np.full(len(canon), -1, dtype=np.int64)
        inside = self.contains(canon)
        if inside.any():
            keys = self._encode(canon[inside])
            pos = np.searchsorted(self.keys, keys)
            pos = np.minimum(pos, len(self.keys) - 1)
            hit = self.keys[pos] == keys
            sub = np.where(hit, pos, -1)
            idx[inside] = sub
        return idx

    def stencil(self, law: StepLaw) -> Stencil:
        if law.d != self.d:
            raise ValidationError("Step law and geometry dimensions differ")
        n, rho = len(self), law.support_radius
        cols = np.empty((n, len(law.vectors)), dtype=np.int64)
        ext_canon = []
        for j, z in enumerate(law.vectors):
            nb = canonicalize(self.points + z, self.mode)
            idx = self.lookup(nb, canonical=True)
            cols[:, j] = idx
            if np.any(idx < 0):
                ext_canon.append(nb[idx < 0])
        if ext_canon:
            ext_all = np.vstack(ext_canon)
            ext_keys = self._encode(ext_all, self.R + rho * (self.d if self.norm == "l1" else 1))
            uniq_keys, first = np.unique(ext_keys, return_index=True)
            exterior = ext_all[first]
            for j, z in enumerate(law.vectors):
                miss = cols[:, j] < 0
                if miss.any():
                    nb = canonicalize(self.points[miss] + z, self.mode)
                    k = self._encode(nb, self.R + rho * (self.d if self.norm == "l1" else 1))
                    cols[miss, j] = n + np.searchsorted(uniq_keys, k)
        else:
            exterior = np.zeros((0, self.d), dtype=np.int64)
        rows = np.repeat(np.arange(n), len(law.vectors))
        data = np.tile(law.probs, n)
        op = sparse.coo_matrix((data, (rows, cols.ravel())), shape=(n, n + len(exterior))).tocsr()
        op.sum_duplicates()
        interior = np.all(cols < n, axis=1)
        return Stencil(operator=op, exterior_points=exterior, interior_mask=interior)


# =============================================================================
# GREEN FUNCTION TABLES
# =============================================================================

@dataclass
class GreenTable:
    """g (order 1) or G (order 2) on the symmetry-reduced box of radius R."""
    law: StepLaw
    R: int
    method: str
    tol: float
    geometry: BoxGeometry
    values: np.ndarray
    order: int = 1
    tail_bracket: float = 0.0

    @property
    def c_g(self) -> float:
        return c_g_constant(self.law)

    def value(self, points) -> np.ndarray:
        idx = self.geometry.lookup(points)
        if np.any(idx < 0):
            raise ValidationError("Point outside the Green table", {"R": self.R})
        return self.values[idx]

    def asymptotic(self, points) -> np.ndarray:
        """c_g |x|_θ^{2-d} (order 1) or its convolution square (order 2)."""
        r = ThetaNorm(self.law)(points)
        d = self.law.d
        with np.errstate(divide="ignore"):
            if self.order == 1:
                return self.c_g * r ** (2.0 - d)
            return second_order_asymptotic_constant(self.law) * r ** (4.0 - d)

    def harmonicity_residual(self) -> float:
        """max |g(x) - δ_{x,0} - Σ_z θ(z) g(x+z)| over interior points."""
        if self.order != 1:
            raise ValidationError("Harmonicity applies to order-1 tables")
        st = self.geometry.stencil(self.law)
        mask = st.interior_mask
        rhs = st.operator[:, : len(self.values)] @ self.values
        delta = np.zeros_like(self.values)
        delta[self.geometry.lookup(np.zeros((1, self.law.d), dtype=np.int64))] = 1.0
        res = np.abs(self.values - delta - rhs)[mask]
        return float(res.max()) if len(res) else 0.0

    def header(self) -> Dict:
        return {
            "d": self.law.d,
            "R": self.R,
            "method": self.method,
            "tol": self.tol,
            "order": self.order,
            "law_hash": self.law.digest(),
        }


def second_order_asymptotic_constant(law: StepLaw) -> float:
    """Constant A with Σ_y g(x-y)g(y) ~ A |x|_θ^{4-d}."""
    d = law.d
    if d < 5:
        raise ValidationError("Second-order kernel needs d >= 5", {"d": d})
    # Convolution of two Newtonian kernels in θ-coordinates.
    c_g = c_g_constant(law)
    sqrt_det = math.sqrt(np.linalg.det(law.covariance))
    a, b = (d - 2) / 2.0, (d - 2) / 2.0
    riesz = math.pi ** (d / 2.0) * gamma(d / 2.0 - a) * gamma(d / 2.0 - b) * gamma(a + b - d / 2.0) / (
        gamma(a) * gamma(b) * gamma(d - a - b))
    return float(c_g ** 2 * sqrt_det * riesz)


def _axis_kernels(law: StepLaw, m_max: int, t: np.ndarray) -> List[np.ndarray]:
    """Per-axis continuous-time transition weights J_i[m, node] for |m| <= m_max."""
    kernels = []
    cache: Dict[Tuple, np.ndarray] = {}
    for i in range(law.d):
        mask = (law.vectors[:, i] != 0) & ((law.vectors != 0).sum(axis=1) == 1)
        offs, pr = law.vectors[mask, i], law.probs[mask]
        key = tuple(sorted(zip(offs.tolist(), np.round(pr, 15).tolist())))
        if key in cache:
            kernels.append(cache[key])
            continue
        w = pr.sum()
        m = np.arange(m_max + 1)
        if np.all(np.abs(offs) == 1):
            J = ive(m[:, None], w * t[None, :])
        else:
            J = np.empty((m_max + 1, len(t)))
            var = float((pr * offs.astype(float) ** 2).sum())
            for j, tj in enumerate(t):
                spread = 2 * (m_max + 1) + 2 * int(math.ceil(12.0 * math.sqrt(tj * var) + 6 * np.abs(offs).max()))
                nk = max(64, 1 << (spread - 1).bit_length())
                k = 2.0 * math.pi * np.arange(nk) / nk
                h = np.exp(tj * (np.cos(np.outer(k, offs)) @ pr - w))
                J[:, j] = np.fft.fft(h).real[: m_max + 1] / nk
        cache[key] = J
        kernels.append(J)
    return kernels


def _gaussian_tail(law: StepLaw, q: np.ndarray, T: float, power: int) -> np.ndarray:
    """∫_T^∞ t^power (2πt)^{-d/2} det(M)^{-1/2} exp(-q/(2t)) dt."""
    a = law.d / 2.0 - 1.0 - power
    if a <= 0:
        raise ValidationError("Heat-kernel tail diverges", {"d": law.d, "power": power})
    z = np.asarray(q, dtype=float) / (2.0 * T)
    small = z < 1e-8
    ratio = np.empty_like(z)
    zs = np.where(small, 1.0, z)
    ratio[~small] = (gamma(a) * gammainc(a, zs) / zs ** a)[~small]
    ratio[small] = 1.0 / a - z[small] / (a + 1.0)
    return gaussian_prefactor(law) * T ** (-a) * ratio


def heat_kernel_integral(law: StepLaw, points: np.ndarray, power: int = 0, step: float = 0.05,
                         t_min: float = 1e-10, T: Optional[float] = None, chunk: int = 4096,
                         workers: Optional[int] = None) -> np.ndarray:
    """∫_0^∞ t^power p_t(x) dt for the rate-one continuous-time walk.

    power=0 gives g(x) = (2π)^{-d}∫cos(k·x)/(1-φ(k))dk through
    1/(1-φ) = ∫ e^{-t(1-φ)} dt; power=1 gives Σ_n (n+1)P(S_n=x).
    """
    if not law.is_axis_aligned:
        raise ValidationError("Heat-kernel route needs an axis-aligned step law")
    pts = np.abs(np.atleast_2d(np.asarray(points, dtype=np.int64)))
    q = ThetaNorm(law).squared(pts)
    if T is None:
        T = max(1e4 if power == 0 else 1e6, 50.0 * float(q.max(initial=0.0)))
    s = np.arange(math.log(t_min), math.log(T) + step / 2, step)
    t = np.exp(s)
    w = step * t ** (power + 1)
    w[0] *= 0.5
    w[-1] *= 0.5
    kernels = _axis_kernels(law, int(pts.max(initial=0)), t)

    def integrate(lo: int) -> np.ndarray:
        block = pts[lo: lo + chunk]
        prod = np.ones((len(block), len(t)))
        for i, J in enumerate(kernels):
            prod *= J[block[:, i]]
        head = prod[:, 0] * t_min ** (power + 1) / (power + 1)
        return prod @ w + head

    parts = parallel_map(integrate, range(0, len(pts), chunk), workers=workers)
    body = np.concatenate(parts) if parts else np.zeros(0)
    return body + _gaussian_tail(law, q, T, power)


def _green_tensor_fourier(law: StepLaw, points: np.ndarray, tol: float, cells: int = 16,
                          max_depth: int = 24) -> np.ndarray:
    """Midpoint tensor quadrature of (2π)^{-d}∫cos(k·x)/(1-φ(k))dk with dyadic shells."""
    if cells % 4:
        raise ValidationError("cells per axis must be a multiple of 4")
    d = law.d
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ratio = 2.0 ** (2 - d)
    total = np.zeros(len(pts))
    half = math.pi
    quad = law.covariance
    last_shell = None
    for depth in range(max_depth):
        h = 2 * half / cells
        axis = -half + h * (np.arange(cells) + 0.5)
        grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
        inner = np.all(np.abs(grid) < half / 2, axis=1)
        k = grid[~inner]
        phi = np.cos(k @ law.vectors.T) @ law.probs
        weight = h ** d / (1.0 - phi)
        shell = np.concatenate([np.cos(pts[lo:lo + 8] @ k.T) @ weight for lo in range(0, len(pts), 8)])
        shell /= (2 * math.pi) ** d
        total += shell
        last_shell = (2.0 / np.einsum("ij,jk,ik->i", k, quad, k) * h ** d).sum() / (2 * math.pi) ** d
        if np.max(np.abs(shell)) < tol / 2:
            break
        half /= 2
    else:
        raise ConvergenceError("Dyadic refinement did not reach tolerance", {"tol": tol})
    # The innermost cube behaves like the homogeneous 2/(kᵀMk) kernel.
    return total + last_shell * ratio / (1.0 - ratio)


def _green_neumann(law: StepLaw, table: BoxGeometry, tol: float, n_steps: int = 128) -> Tuple[np.ndarray, float]:
    """Σ_{n<=N} P_0(S_n=x) by repeated convolution plus a fitted local-limit tail."""
    d, mode = law.d, table.mode
    r1_table = int(np.abs(table.points).sum(axis=1).max())
    reach = int(math.ceil((r1_table + law.l1_radius * n_steps) / 2.0)) + law.l1_radius
    domain = BoxGeometry(d, reach, mode, norm="l1")
    op = domain.stencil(law).inner()
    origin = domain.lookup(np.zeros((1, d), dtype=np.int64))[0]
    at = domain.lookup(table.points, canonical=True)
    if np.any(at < 0):
        raise ValidationError("Convolution domain does not cover the table")

    P = np.zeros(len(domain))
    P[origin] = 1.0
    acc = P[at].copy()
    keep = 6
    history = np.zeros((keep, len(at)))
    for n in range(1, n_steps + 1):
        P = op @ P
        acc += P[at]
        if n > n_steps - keep:
            history[n - (n_steps - keep) - 1] = P[at]

    q = ThetaNorm(law).squared(table.points)
    ns = np.arange(n_steps - keep + 1, n_steps + 1)
    par = law.parity_vector
    period = law.period

    parity = (table.points @ par) % 2 if par is not None else None

    def lclt(i: int, n: np.ndarray) -> np.ndarray:
        """Local limit approximation of P_0(S_n = x_i), zero on the wrong parity."""
        base = period * gaussian_prefactor(law) * n ** (-d / 2.0) * np.exp(-q[i] / (2.0 * n))
        if parity is None:
            return base
        return np.where(n.astype(np.int64) % 2 == parity[i], base, 0.0)

    tail3 = np.zeros(len(at))
    tail2 = np.zeros(len(at))
    far = np.arange(n_steps + 1, 16 * n_steps + 1, dtype=float)
    for i in range(len(at)):
        L = lclt(i, ns.astype(float))
        use = np.nonzero(L > 0)[0][-3:]
        r = history[use, i] / L[use]
        inv = 1.0 / ns[use]
        A3 = np.stack([np.ones(3), inv, inv ** 2], axis=1)
        c3 = np.linalg.solve(A3, r)
        c2 = np.linalg.lstsq(A3[1:, :2], r[1:], rcond=None)[0]
        Lf = lclt(i, far)
        corr3 = c3[0] + c3[1] / far + c3[2] / far ** 2
        corr2 = c2[0] + c2[1] / far
        rest = _gaussian_tail(law, q[i:i + 1], float(far[-1]) + 0.5, 0)[0]
        tail3[i] = (Lf * corr3).sum() + c3[0] * rest
        tail2[i] = (Lf * corr2).sum() + c2[0] * rest
    bracket = float(np.max(np.abs(tail3 - tail2)))
    return acc + tail3, bracket


def _table_digest(law: StepLaw, R: int, method: str, tol: float, order: int) -> str:
    return content_hash({"law": law.digest(), "R": R, "method": method, "tol": tol, "order": order})


def green_table(law: StepLaw, R: int, method: str = "fourier", tol: float = 1e-10,
                cache: Optional[TableCache] = None, n_steps: int = 128,
                workers: Optional[int] = None) -> GreenTable:
    """Green function g on the symmetry-reduced box of sup-radius R."""
    if law.d < 5:
        raise ValidationError("Green tables are built for d >= 5", {"d": law.d})
    if R < 1:
        raise ValidationError("Box radius must be >= 1", {"R": R})
    if method not in ("fourier", "neumann"):
        raise ValidationError(f"Unknown Green method: {method}")

    geometry = BoxGeometry(law.d, R, law.symmetry_mode)
    digest = _table_digest(law, R, method, tol, 1)
    if cache is not None:
        hit = cache.load("green", digest)
        if hit is not None:
            return GreenTable(law, R, method, tol, geometry, hit["values"], 1, hit.get("tail_bracket", 0.0))

    bracket = 0.0
    if method == "fourier":
        if law.is_axis_aligned:
            values = heat_kernel_integral(law, geometry.points, power=0, workers=workers)
        else:
            values = _green_tensor_fourier(law, geometry.points, tol)
    else:
        values, bracket = _green_neumann(law, geometry, tol, n_steps)
        if bracket > tol:
            raise ConvergenceError("Neumann tail bracket exceeds tolerance",
                                   {"bracket": bracket, "tol": tol, "n_steps": n_steps})
    table = GreenTable(law, R, method, tol, geometry, values, 1, bracket)
    logger.info("Green table d=%d R=%d method=%s: g(0)=%.12f (%d orbits)",
                law.d, R, method, table.value(np.zeros((1, law.d)))[0], len(geometry))
    if cache is not None:
        cache.store("green", digest, table.header(), {"values": values, "tail_bracket": bracket})
    return table


def second_order_table(law: StepLaw, R: int, cache: Optional[TableCache] = None,
                       workers: Optional[int] = None) -> GreenTable:
    """G(x) = Σ_n (n+1) P_0(S_n = x) on the reduced box, for bulk lookups."""
    if law.d < 5:
        raise ValidationError("Second-order kernel needs d >= 5", {"d": law.d})
    geometry = BoxGeometry(law.d, R, law.symmetry_mode)
    digest = _table_digest(law, R, "heat", 0.0, 2)
    if cache is not None:
        hit = cache.load("second_order", digest)
        if hit is not None:
            return GreenTable(law, R, "fourier", 0.0, geometry, hit["values"], 2)
    values = heat_kernel_integral(law, geometry.points, power=1, workers=workers)
    table = GreenTable(law, R, "fourier", 0.0, geometry, values, 2)
    if cache is not None:
        cache.store("second_order", digest, table.header(), {"values": values})
    return table


def second_order_kernel(gt: GreenTable, x, tol: float = 5e-3, max_points: int = 3_000_000) -> float:
    """Σ_y g(x-y) g(y): truncated convolution over a θ-ball plus the power-law tail.

    For |x|_θ < L the tail over {|y|_θ > L} of c_g²|x-y|_θ^{2-d}|y|_θ^{2-d}
    equals c_g² √det M |S^{d-1}| L^{4-d}/(d-4) exactly (mean-value property).
    A first correction κ/|y|_θ² to g's power law, fitted near radius L, is
    added to the tail; its size is the reported tail uncertainty (relative
    to the result, compared with tol).
    """
    law, d = gt.law, gt.law.d
    if gt.order != 1:
        raise ValidationError("second_order_kernel needs an order-1 table")
    x = np.asarray(x, dtype=np.int64).reshape(d)
    lam_max = float(np.linalg.eigvalsh(law.covariance).max())
    half = gt.R - int(np.abs(x).max())
    half = min(half, int((max_points ** (1.0 / d) - 1) // 2))
    norm = ThetaNorm(law)
    L = half / math.sqrt(lam_max)
    if half < 1 or norm(x) >= L:
        raise ValidationError("Point too close to the table edge for the convolution",
                              {"x": x.tolist(), "R": gt.R})

    axes = [np.arange(-half, half + 1)] * d
    ys = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    ys = ys[norm(ys) <= L]
    body = float(np.dot(gt.value(x[None, :] - ys), gt.value(ys)))

    c_g = gt.c_g
    sphere = 2.0 * math.pi ** (d / 2.0) / gamma(d / 2.0)
    scale = c_g ** 2 * math.sqrt(np.linalg.det(law.covariance)) * sphere
    tail = scale * L ** (4 - d) / (d - 4)

    shell = ys[norm(ys) >= 0.8 * L]
    if len(shell) == 0:
        raise ValidationError("Empty fitting shell for the tail correction", {"x": x.tolist()})
    kappa = float(np.median((gt.value(shell) / gt.asymptotic(shell) - 1.0) * norm(shell) ** 2))
    correction = scale * 2.0 * kappa * L ** (2 - d) / (d - 2)
    tail += correction
    tail_error = abs(correction)
    if tail_error > tol * (body + tail):
        raise ValidationError("Tail estimate exceeds tolerance",
                              {"x": x.tolist(), "tail": tail, "tail_error": tail_error, "tol": tol})
    return body + tail


def green_ray(gt: GreenTable, direction: Sequence[int], steps: int) -> List[Dict]:
    """Rows (x, g, c_g|x|_θ^{2-d}, ratio) along k·direction, k = 0..steps."""
    direction = np.asarray(direction, dtype=np.int64)
    pts = np.outer(np.arange(steps + 1), direction)
    pts = pts[np.abs(pts).max(axis=1) <= gt.R]
    g = gt.value(pts)
    asym = gt.asymptotic(pts)
    rows = []
    for p, gv, av in zip(pts, g, asym):
        rows.append({
            "x": " ".join(map(str, p.tolist())),
            "g": float(gv),
            "asymptotic": float(av) if np.isfinite(av) else float("nan"),
            "ratio": float(gv / av) if np.isfinite(av) and av > 0 else float("nan"),
        })
    return rows


def iter_ball_points(d: int, radius: float) -> Iterator[np.ndarray]:
    """Lattice points with Euclidean norm <= radius, one coordinate slab at a time."""
    r = int(math.floor(radius + 1e-12))
    axes = [np.arange(-r, r + 1)] * (d - 1)
    rest = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d - 1) if d > 1 else np.zeros((1, 0), dtype=np.int64)
    r2 = radius * radius + 1e-9
    for first in range(-r, r + 1):
        slab = np.hstack([np.full((len(rest), 1), first), rest]).astype(np.int64)
        keep = (slab ** 2).sum(axis=1) <= r2
        if keep.any():
            yield slab[keep]
