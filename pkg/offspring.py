"""
Critical offspring laws, the adjoint (tail-sum) law, generating functions and
tree samplers.

Trees are flat parent arrays in breadth-first order (parent[0] == -1), so every
vertex appears after its parent; displacements are attached by the branching
random walk layer.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from exceptions import ValidationError
from runtime import STREAM_SIZE_BLOCK, STREAM_SPINE, STREAM_TREE, get_logger, parallel_map, rng_stream

logger = get_logger("offspring")

PMF_TOL = 1e-12
GEOMETRIC_TRUNCATION = 64


class DiscreteLaw:
    """Shared pmf machinery: moments, generating function, sampling."""

    pmf: np.ndarray
    geometric: bool

    @property
    def support_max(self) -> int:
        return len(self.pmf) - 1

    def mean(self) -> float:
        if self.geometric:
            return 1.0
        return float(np.arange(len(self.pmf)) @ self.pmf)

    def gf(self, s) -> np.ndarray:
        """f(s) = Σ_k μ(k) s^k, vectorized over s ∈ [0, 1]."""
        s = np.asarray(s, dtype=float)
        if self.geometric:
            return 1.0 / (2.0 - s)
        return np.polynomial.polynomial.polyval(s, self.pmf)

    def gf_derivative(self, s) -> np.ndarray:
        """f'(s), vectorized over s ∈ [0, 1]."""
        s = np.asarray(s, dtype=float)
        if self.geometric:
            return 1.0 / (2.0 - s) ** 2
        return np.polynomial.polynomial.polyval(s, np.polynomial.polynomial.polyder(self.pmf))

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n independent offspring counts."""
        if self.geometric:
            return rng.geometric(0.5, size=n).astype(np.int64) - 1
        cdf = np.cumsum(self.pmf)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, rng.random(n), side="right").astype(np.int64)

    def draw_sums(self, rng: np.random.Generator, counts: np.ndarray) -> np.ndarray:
        """Total offspring of counts[i] independent parents, for each i."""
        counts = np.asarray(counts, dtype=np.int64)
        if self.geometric:
            return rng.negative_binomial(np.maximum(counts, 1), 0.5) * (counts > 0)
        per_atom = rng.multinomial(counts, self.pmf)
        return per_atom @ np.arange(len(self.pmf))


@dataclass(frozen=True, eq=False)
class OffspringLaw(DiscreteLaw):
    """Critical offspring pmf μ with variance σ² ∈ (0, ∞)."""
    name: str
    pmf: np.ndarray
    geometric: bool = False

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float).ravel()
        if np.any(pmf < 0):
            raise ValidationError("Negative offspring probability", {"name": self.name})
        if not self.geometric:
            pmf = np.trim_zeros(pmf, "b")
            if abs(pmf.sum() - 1.0) > PMF_TOL:
                raise ValidationError("Offspring pmf must sum to 1", {"sum": float(pmf.sum())})
            mean = float(np.arange(len(pmf)) @ pmf)
            if abs(mean - 1.0) > PMF_TOL:
                raise ValidationError("Offspring law must have mean 1", {"mean": mean})
        if len(pmf) > 1 and pmf[1] >= 1.0 - PMF_TOL:
            raise ValidationError("Degenerate law mu(1) = 1 is excluded")
        object.__setattr__(self, "pmf", pmf)
        if self.variance <= 0:
            raise ValidationError("Offspring variance must be positive")

    @property
    def variance(self) -> float:
        if self.geometric:
            return 2.0
        k = np.arange(len(self.pmf))
        return float((k * k) @ self.pmf - 1.0)

    @property
    def sigma2(self) -> float:
        return self.variance

    @property
    def third_moment(self) -> float:
        """E[k^3]. Every law here has finite support or is Geometric(1/2), so it is finite."""
        if self.geometric:
            # factorial moments of Geometric(1/2) on {0, 1, ...} are r!
            return 6.0 + 3.0 * 2.0 + 1.0
        k = np.arange(len(self.pmf))
        return float((k ** 3) @ self.pmf)

    @property
    def third_moment_finite(self) -> bool:
        return math.isfinite(self.third_moment)

    @property
    def mu0(self) -> float:
        return float(self.pmf[0])

    @property
    def period(self) -> int:
        """Span of the support of μ; tree sizes live on 1 + period·Z."""
        if self.geometric:
            return 1
        support = np.nonzero(self.pmf > 0)[0]
        g = 0
        for k in support:
            g = math.gcd(g, int(k - support[0]))
        return max(g, 1)

    def adjoint(self) -> "AdjointLaw":
        return adjoint(self)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "sigma2": self.variance,
            "mu0": self.mu0,
            "support_max": None if self.geometric else self.support_max,
            "geometric": self.geometric,
            "third_moment": self.third_moment,
        }


@dataclass(frozen=True, eq=False)
class AdjointLaw(DiscreteLaw):
    """μ̃(k) = Σ_{j>k} μ(j); its mean is σ²/2."""
    pmf: np.ndarray
    geometric: bool = False

    def mean(self) -> float:
        if self.geometric:
            return 1.0
        return super().mean()


def _geometric_pmf() -> np.ndarray:
    return 0.5 ** (np.arange(GEOMETRIC_TRUNCATION) + 1.0)


def make_offspring(kind: str, params: Optional[Dict] = None) -> OffspringLaw:
    params = dict(params or {})
    if kind == "binary_critical":
        return OffspringLaw("binary_critical", np.array([0.5, 0.0, 0.5]))
    if kind == "geometric_half":
        return OffspringLaw("geometric_half", _geometric_pmf(), geometric=True)
    if kind == "poisson_trunc":
        k_max = int(params.get("k_max", 12))
        if k_max < 2:
            raise ValidationError("poisson_trunc needs k_max >= 2", {"k_max": k_max})
        pmf = stats.poisson.pmf(np.arange(k_max + 1), 1.0)
        pmf /= pmf.sum()
        # Move mass from the empty atom to the top atom until the mean is 1.
        shift = (1.0 - np.arange(k_max + 1) @ pmf) / k_max
        pmf[0] -= shift
        pmf[-1] += shift
        return OffspringLaw(f"poisson_trunc_{k_max}", pmf)
    if kind == "custom":
        if "pmf" not in params:
            raise ValidationError("custom offspring law needs a pmf")
        return OffspringLaw(str(params.get("name", "custom")), np.asarray(params["pmf"], dtype=float))
    raise ValidationError(f"Unknown offspring kind: {kind}")


def adjoint(law: OffspringLaw) -> AdjointLaw:
    if law.geometric:
        return AdjointLaw(law.pmf.copy(), geometric=True)
    tail = np.cumsum(law.pmf[::-1])[::-1]
    pmf = tail[1:] if len(tail) > 1 else np.array([1.0])
    return AdjointLaw(pmf)


# =============================================================================
# TREE SAMPLERS
# =============================================================================

class Outcome(str, Enum):
    COMPLETED = "completed"
    CAPPED = "capped"


@dataclass(frozen=True)
class TreeBudget:
    v_max: int

    def __post_init__(self):
        if self.v_max < 1:
            raise ValidationError("Vertex cap must be >= 1", {"v_max": self.v_max})


@dataclass
class SampledTree:
    parent: np.ndarray
    depth: np.ndarray
    outcome: Outcome
    frontier: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.parent)

    def generations(self) -> List[np.ndarray]:
        """Vertex indices grouped by depth."""
        if self.size == 0:
            return []
        bounds = np.searchsorted(self.depth, np.arange(self.depth[-1] + 2))
        return [np.arange(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def grow_tree(root_law: DiscreteLaw, law: DiscreteLaw, budget: TreeBudget,
              rng: np.random.Generator) -> SampledTree:
    """Breadth-first growth; stops with CAPPED before exceeding the budget."""
    parents = [np.array([-1], dtype=np.int64)]
    depths = [np.array([0], dtype=np.int64)]
    current = np.array([0], dtype=np.int64)
    total, depth = 1, 0
    first = True
    while len(current):
        counts = (root_law if first else law).draw(rng, len(current))
        first = False
        n_children = int(counts.sum())
        if n_children == 0:
            break
        if total + n_children > budget.v_max:
            return SampledTree(np.concatenate(parents), np.concatenate(depths), Outcome.CAPPED, current)
        depth += 1
        kids_parent = np.repeat(current, counts)
        parents.append(kids_parent)
        depths.append(np.full(n_children, depth, dtype=np.int64))
        current = np.arange(total, total + n_children, dtype=np.int64)
        total += n_children
    return SampledTree(np.concatenate(parents), np.concatenate(depths), Outcome.COMPLETED)


def sample_critical_tree(law: OffspringLaw, budget: TreeBudget, seed: int, index: int = 0) -> SampledTree:
    return grow_tree(law, law, budget, rng_stream(seed, index, STREAM_TREE))


def sample_adjoint_tree(law: OffspringLaw, budget: TreeBudget, seed: int, index: int = 0) -> SampledTree:
    return grow_tree(adjoint(law), law, budget, rng_stream(seed, index, STREAM_TREE))


def spine_iterator(law: OffspringLaw, seed: int, budget: Optional[TreeBudget] = None,
                   start: int = 0) -> Iterator[Tuple[int, SampledTree]]:
    """Adjoint bushes hanging from spine vertices start, start+1, ...

    Item i depends on (seed, i) only; start=1 gives the bushes of T_-.
    """
    budget = budget or TreeBudget(10 ** 6)
    root_law = adjoint(law)
    i = start
    while True:
        yield i, grow_tree(root_law, law, budget, rng_stream(seed, i, STREAM_SPINE))
        i += 1


# =============================================================================
# TREE-SIZE LAW
# =============================================================================

@dataclass
class TreeSizeLaw:
    law_name: str
    sigma2: float
    period: int
    samples: int
    capped: int
    v_max: int
    counts: np.ndarray

    def pmf(self, n) -> np.ndarray:
        return self.counts[np.asarray(n)] / self.samples

    def normalized(self, n) -> np.ndarray:
        """P(#T = n) n^{3/2} σ √(2π); periodic laws divided by the period."""
        n = np.asarray(n)
        ratio = self.pmf(n) * n ** 1.5 * math.sqrt(self.sigma2) * math.sqrt(2 * math.pi)
        return ratio / self.period

    def rows(self, n_values: Sequence[int]) -> List[Dict]:
        out = []
        for n in n_values:
            residue = (n - 1) % self.period
            out.append({
                "n": int(n),
                "residue": int(residue),
                "empirical_pmf": float(self.pmf(n)),
                "normalized_ratio": float(self.normalized(n)) if residue == 0 else float("nan"),
                "std_error": float(math.sqrt(self.counts[n]) / self.samples * n ** 1.5
                                   * math.sqrt(2 * math.pi * self.sigma2) / self.period),
            })
        return out

    def to_dict(self) -> Dict:
        return {
            "law": self.law_name,
            "sigma2": self.sigma2,
            "period": self.period,
            "samples": self.samples,
            "capped": self.capped,
            "v_max": self.v_max,
        }


def _size_block(law: DiscreteLaw, root_law: DiscreteLaw, n_trees: int, v_max: int,
                rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """Sizes of n_trees independent trees grown generation by generation."""
    sizes = np.ones(n_trees, dtype=np.int64)
    active = np.arange(n_trees)
    gen = root_law.draw(rng, n_trees)
    capped = 0
    while len(active):
        sizes_active = sizes[active] + gen
        over = sizes_active > v_max
        capped += int(over.sum())
        sizes[active] = np.minimum(sizes_active, v_max + 1)
        alive = (gen > 0) & ~over
        active, gen = active[alive], gen[alive]
        if len(active):
            gen = law.draw_sums(rng, gen)
    counts = np.bincount(sizes[sizes <= v_max], minlength=v_max + 1)
    return counts, capped


def tree_size_counts(law: OffspringLaw, samples: int, v_max: int, seed: int, block_size: int = 100_000,
                     root: str = "critical", workers: Optional[int] = None) -> TreeSizeLaw:
    """Histogram of total progeny over `samples` trees, in reproducible blocks."""
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    root_law = law if root == "critical" else adjoint(law)
    n_blocks = (samples + block_size - 1) // block_size

    def run(b: int) -> Tuple[np.ndarray, int]:
        n = min(block_size, samples - b * block_size)
        return _size_block(law, root_law, n, v_max, rng_stream(seed, b, STREAM_SIZE_BLOCK))

    parts = parallel_map(run, range(n_blocks), workers=workers)
    counts = np.zeros(v_max + 1, dtype=np.int64)
    capped = 0
    for c, k in parts:
        counts += c
        capped += k
    logger.info("Tree sizes for %s: %d samples, %d capped at %d", law.name, samples, capped, v_max)
    return TreeSizeLaw(law.name, law.variance, law.period, samples, capped, v_max, counts)
