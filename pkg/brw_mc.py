"""
MONTE CARLO HITTING PROBABILITIES FOR BRANCHING RANDOM WALKS
============================================================
Direct simulation of tree-indexed walks for

    p_c(x)    critical tree from x hits K
    p_adj(x)  adjoint-rooted tree from x hits K
    p_I(x)    infinite tree T_I (spine from x, bushes at every spine vertex)
    p_-(x)    T_- (spine from x, bushes from the first spine step on)
    e_K(x)    = 1 - p_-(x)

Samples are processed in fixed-size blocks; block b draws from the stream
(seed, b) so results do not depend on the worker count. Capped trees are
counted both ways in the bracket. Far vertices can be pruned; their
descendants' chance of reaching K is carried as a remainder term measured
in units of Bcap(K).
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from exceptions import BracketInfeasibleError, ValidationError
from lattice import (BoxGeometry, StepLaw, ThetaNorm, c_g_constant, iter_ball_points,
                     second_order_asymptotic_constant)
from offspring import DiscreteLaw, OffspringLaw, TreeBudget, adjoint, spine_iterator
from runtime import STREAM_ESCAPE, STREAM_HIT, get_logger, parallel_map, rng_stream

logger = get_logger("brw_mc")

Z95 = float(stats.norm.ppf(0.975))
# Default cap on the adaptive R_stop per dimension.
MAX_RADIUS_BY_D = {5: 64.0, 6: 32.0}
OPEN, HIT, CAPPED = 0, 1, 2


# =============================================================================
# LATTICE SETS
# =============================================================================

class LatticeSet:
    """Finite nonempty K ⊂ Z^d with a hashed membership index."""

    def __init__(self, points, name: str = "custom"):
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        if pts.size == 0:
            raise ValidationError("Lattice set must be nonempty")
        self.points = np.unique(pts, axis=0)
        self.d = self.points.shape[1]
        self.name = name
        self.lo = self.points.min(axis=0)
        self.hi = self.points.max(axis=0)
        self._base = self.hi - self.lo + 1
        self._powers = np.concatenate([[1], np.cumprod(self._base[:-1])]).astype(np.int64)
        keys = self._encode(self.points)
        self._order = np.argsort(keys, kind="stable")
        self._keys = keys[self._order]

    @classmethod
    def ball(cls, d: int, radius: float, center: Optional[Sequence[int]] = None) -> "LatticeSet":
        pts = np.vstack(list(iter_ball_points(d, radius)))
        if center is not None:
            pts = pts + np.asarray(center, dtype=np.int64)
        return cls(pts, name=f"ball({radius:g})")

    @classmethod
    def point(cls, coords: Sequence[int]) -> "LatticeSet":
        return cls([list(coords)], name="point")

    @classmethod
    def parse(cls, spec: str, d: int) -> "LatticeSet":
        """'point:0', 'point:1,0,0,0,0', 'ball:2' or 'points:<csv file>'."""
        kind, _, arg = spec.partition(":")
        if kind == "point":
            coords = [int(c) for c in arg.split(",")] if arg else [0]
            if len(coords) == 1:
                coords = coords * d if coords[0] == 0 else coords + [0] * (d - 1)
            if len(coords) != d:
                raise ValidationError("Point has the wrong dimension", {"spec": spec, "d": d})
            return cls.point(coords)
        if kind == "ball":
            return cls.ball(d, float(arg))
        if kind == "points":
            path = Path(arg)
            if not path.exists():
                raise ValidationError("Points file not found", {"path": arg})
            frame = pd.read_csv(path, header=None, comment="#")
            if frame.shape[1] != d:
                raise ValidationError("Points file has the wrong dimension", {"path": arg, "d": d})
            return cls(frame.to_numpy(dtype=np.int64), name=path.stem)
        raise ValidationError(f"Unknown set spec: {spec}")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def radius(self) -> float:
        return float(np.sqrt((self.points.astype(float) ** 2).sum(axis=1)).max())

    @property
    def center(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def spread(self) -> float:
        """Largest distance from the centroid; translation invariant."""
        return float(np.sqrt(((self.points - self.center) ** 2).sum(axis=1)).max())

    def _encode(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.lo) @ self._powers

    def index(self, points) -> np.ndarray:
        """Row of each point in self.points, -1 for non-members."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        out = np.full(len(pts), -1, dtype=np.int64)
        if inside.any():
            keys = self._encode(pts[inside])
            pos = np.minimum(np.searchsorted(self._keys, keys), len(self._keys) - 1)
            out[inside] = np.where(self._keys[pos] == keys, self._order[pos], -1)
        return out

    def contains(self, points) -> np.ndarray:
        return self.index(points) >= 0

    def translate(self, shift: Sequence[int]) -> "LatticeSet":
        return LatticeSet(self.points + np.asarray(shift, dtype=np.int64), name=f"{self.name}+shift")

    def union(self, other) -> "LatticeSet":
        return LatticeSet(np.vstack([self.points, np.atleast_2d(other)]), name=f"{self.name}+")

    def to_dict(self) -> Dict:
        return {"name": self.name, "size": len(self), "radius": self.radius, "d": self.d}


# =============================================================================
# ESTIMATES AND POLICIES
# =============================================================================

@dataclass
class HitEstimate:
    quantity: str
    x: Tuple[int, ...]
    estimate: float
    half_width: float
    samples: int
    hits: int
    capped: int
    low: float
    high: float
    unit_remainder: float = 0.0
    r_stop: Optional[float] = None
    remainder_dominates: bool = False

    def __post_init__(self):
        self.low = min(self.low, self.estimate)
        self.high = max(self.high, self.estimate)

    def complement(self, quantity: str = "e_K") -> "HitEstimate":
        return replace(self, quantity=quantity, estimate=1.0 - self.estimate,
                       low=1.0 - self.high, high=1.0 - self.low)

    def with_bcap(self, bcap: float, bracket_scale: float) -> "HitEstimate":
        """Re-evaluate with the remainder priced at a given capacity."""
        n = self.samples
        est = min(1.0, (self.hits + bcap * self.unit_remainder * n) / n)
        high = min(1.0, (self.hits + self.capped) / n + bracket_scale * self.unit_remainder)
        return replace(self, estimate=est, half_width=_half_width(est, n), low=self.hits / n, high=high)

    def to_dict(self) -> Dict:
        return {
            "quantity": self.quantity,
            "x": " ".join(map(str, self.x)),
            "estimate": self.estimate,
            "ci_half_width": self.half_width,
            "bracket_low": self.low,
            "bracket_high": self.high,
            "samples": self.samples,
            "hits": self.hits,
            "capped": self.capped,
            "unit_remainder": self.unit_remainder,
            "r_stop": self.r_stop,
            "remainder_dominates": self.remainder_dominates,
        }


def _half_width(p: float, n: int) -> float:
    return Z95 * math.sqrt(max(p * (1.0 - p), 0.0) / n)


@dataclass
class RemainderPolicy:
    """Stopping and pruning radii plus the constants of the remainder bound.

    safety and bcap_upper_constant are conventions recorded in the run
    config, not derived values.
    """
    r_stop: float = 8.0
    prune_factor: float = 1.25
    safety: float = 10.0
    bcap_upper_constant: float = 50.0
    bcap_hint: Optional[float] = None
    max_radius: Optional[float] = None
    fraction: float = 0.5
    adaptive: bool = True
    tolerance: Optional[float] = None

    def bcap_upper(self, K: LatticeSet) -> float:
        r = max(K.spread, 1.0)
        return min(float(len(K)), self.bcap_upper_constant * r ** (K.d - 4))

    def spine_bound(self, R: float, K: LatticeSet, law: OffspringLaw, step: StepLaw) -> float:
        """safety · (σ²/2) A (R/√λ_max)^{4-d} · Bcap_upper(K)."""
        d = step.d
        lam = float(np.linalg.eigvalsh(step.covariance).max())
        A = second_order_asymptotic_constant(step)
        return self.safety * law.variance / 2.0 * A * (R / math.sqrt(lam)) ** (4 - d) * self.bcap_upper(K)

    def radius_cap(self, d: int) -> float:
        """Largest R_stop the adaptive rule may reach; the bound decays like R^{4-d}."""
        if self.max_radius is not None:
            return float(self.max_radius)
        return MAX_RADIUS_BY_D.get(d, 16.0)

    def target(self, samples: int) -> float:
        return self.fraction * Z95 * 0.5 / math.sqrt(samples)

    def dominates(self, R: float, K: LatticeSet, law: OffspringLaw, step: StepLaw, samples: int) -> bool:
        """True when the remainder bound at R exceeds its share of the CI half-width."""
        return self.spine_bound(R, K, law, step) > self.target(samples)

    def choose_r_stop(self, K: LatticeSet, law: OffspringLaw, step: StepLaw, samples: int) -> float:
        R = max(self.r_stop, 2.0 * K.spread + 2.0)
        target, cap = self.target(samples), self.radius_cap(step.d)
        while self.adaptive and self.spine_bound(R, K, law, step) > target and 2 * R <= cap:
            R *= 2.0
        bound = self.spine_bound(R, K, law, step)
        if self.tolerance is not None and bound > self.tolerance:
            raise BracketInfeasibleError("Remainder bound wider than the requested tolerance",
                                         {"r_stop": R, "bound": bound, "tolerance": self.tolerance})
        if bound > target:
            logger.warning("Remainder bound %.3g at R_stop=%g exceeds %.3g of the CI half-width",
                           bound, R, self.fraction)
        return R


@dataclass
class ForestResult:
    status: np.ndarray
    remainder: np.ndarray
    sizes: np.ndarray


class _StepSampler:
    def __init__(self, step: StepLaw):
        self.vectors = step.vectors
        self.cdf = np.cumsum(step.probs)
        self.cdf[-1] = 1.0

    def __call__(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.vectors[np.searchsorted(self.cdf, rng.random(n), side="right")]


def run_forest(root_pos: np.ndarray, root_tree: np.ndarray, n_trees: int, root_law: DiscreteLaw,
               law: DiscreteLaw, step: StepLaw, K: LatticeSet, v_max: int, rng: np.random.Generator,
               prune_center: Optional[np.ndarray] = None, prune_radius: Optional[float] = None,
               max_generations: Optional[int] = None, early_exit: bool = True) -> ForestResult:
    """Grow n_trees branching random walks generation by generation.

    Tree t starts from every root with root_tree == t; roots reproduce with
    root_law, later vertices with law. Status per tree is OPEN (no hit),
    HIT or CAPPED (vertex count would exceed v_max before a hit).
    """
    sampler = _StepSampler(step)
    norm = ThetaNorm(step)
    c_g = c_g_constant(step)
    d = step.d
    status = np.zeros(n_trees, dtype=np.int8)
    remainder = np.zeros(n_trees)
    sizes = np.bincount(root_tree, minlength=n_trees).astype(np.int64)
    pos, tree = root_pos.astype(np.int64), root_tree.astype(np.int64)

    def settle(pos, tree):
        hit = K.contains(pos)
        if hit.any():
            hit_trees = np.unique(tree[hit])
            status[hit_trees[status[hit_trees] == OPEN]] = HIT
        status[(sizes > v_max) & (status == OPEN)] = CAPPED
        if prune_radius is not None and len(pos):
            far = np.sqrt(((pos - prune_center) ** 2).sum(axis=1)) > prune_radius
            far &= status[tree] == OPEN
            if far.any():
                tails = c_g * norm(pos[far] - prune_center) ** (2.0 - d)
                remainder[:] += np.bincount(tree[far], weights=tails, minlength=n_trees)
                pos, tree = pos[~far], tree[~far]
        keep = status[tree] == OPEN
        if not early_exit:
            keep |= (status[tree] == HIT) & (sizes[tree] <= v_max)
        return pos[keep], tree[keep]

    pos, tree = settle(pos, tree)
    generation = 0
    current_law = root_law
    while len(pos) and (max_generations is None or generation < max_generations):
        counts = current_law.draw(rng, len(pos))
        current_law = law
        parent = np.repeat(np.arange(len(pos)), counts)
        pos = pos[parent] + sampler(rng, len(parent))
        tree = tree[parent]
        sizes += np.bincount(tree, minlength=n_trees)
        generation += 1
        pos, tree = settle(pos, tree)
    return ForestResult(status, remainder, sizes)


# =============================================================================
# HIT PROBABILITIES
# =============================================================================

def _blocks(samples: int, block_size: int) -> List[Tuple[int, int]]:
    return [(b, min(block_size, samples - b * block_size)) for b in range((samples + block_size - 1) // block_size)]


def _finalize(quantity: str, x, hits: int, capped: int, unit: float, samples: int,
              policy: RemainderPolicy, K: LatticeSet, r_stop: Optional[float] = None,
              dominates: bool = False) -> HitEstimate:
    n = samples
    bcap = policy.bcap_hint or 0.0
    est = min(1.0, (hits + bcap * unit) / n)
    high = min(1.0, (hits + capped) / n + policy.safety * policy.bcap_upper(K) * unit / n)
    return HitEstimate(quantity, tuple(int(c) for c in x), est, _half_width(est, n), n, hits, capped,
                       hits / n, high, unit / n, r_stop, dominates)


def _exact_one(quantity: str, x) -> HitEstimate:
    return HitEstimate(quantity, tuple(int(c) for c in x), 1.0, 0.0, 1, 1, 0, 1.0, 1.0)


def hit_probability(kind: str, K: LatticeSet, x, law: OffspringLaw, step: StepLaw, samples: int,
                    budget: TreeBudget, seed: int, policy: Optional[RemainderPolicy] = None,
                    prune_radius: Optional[float] = None, max_generations: Optional[int] = None,
                    early_exit: bool = True, prune_center: Optional[Sequence[float]] = None,
                    block_size: int = 10_000, workers: Optional[int] = None) -> HitEstimate:
    """p_c (kind='critical') or p_adj (kind='adjoint') at x by direct simulation."""
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    if kind not in ("critical", "adjoint"):
        raise ValidationError(f"Unknown tree kind: {kind}")
    quantity = "p_c" if kind == "critical" else "p_adj"
    x = np.asarray(x, dtype=np.int64).reshape(step.d)
    if K.contains(x)[0]:
        return _exact_one(quantity, x)
    policy = policy or RemainderPolicy()
    root_law = law if kind == "critical" else adjoint(law)
    center = K.center if prune_center is None else np.asarray(prune_center, dtype=float)

    def run(block: Tuple[int, int]) -> Tuple[int, int, float]:
        b, n = block
        res = run_forest(np.tile(x, (n, 1)), np.arange(n), n, root_law, law, step, K, budget.v_max,
                         rng_stream(seed, b, STREAM_HIT), center, prune_radius, max_generations, early_exit)
        return int((res.status == HIT).sum()), int((res.status == CAPPED).sum()), float(res.remainder.sum())

    parts = parallel_map(run, _blocks(samples, block_size), workers=workers)
    hits, capped, unit = (sum(p[i] for p in parts) for i in range(3))
    est = _finalize(quantity, x, hits, capped, unit, samples, policy, K)
    if capped:
        logger.warning("%s at %s: %d of %d trees capped at %d vertices", quantity, x.tolist(), capped,
                       samples, budget.v_max)
    return est


def _spine_paths(starts: np.ndarray, step: StepLaw, center: np.ndarray, r_stop: float,
                 rng: np.random.Generator, include_start: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Walk every spine until it leaves the ball B(center, r_stop).

    Returns (positions, owner sample, exit positions); the exit vertex itself
    is not part of the explored spine.
    """
    sampler = _StepSampler(step)
    n = len(starts)
    pos = starts.astype(np.int64).copy()
    owners = np.arange(n)
    path_pos: List[np.ndarray] = [pos.copy()] if include_start else []
    path_own: List[np.ndarray] = [owners.copy()] if include_start else []
    exits = np.zeros_like(pos)
    active = np.arange(n)
    r2 = r_stop * r_stop
    while len(active):
        pos[active] += sampler(rng, len(active))
        out = ((pos[active] - center) ** 2).sum(axis=1) >= r2
        exits[active[out]] = pos[active[out]]
        active = active[~out]
        if len(active):
            path_pos.append(pos[active].copy())
            path_own.append(active.copy())
    if path_pos:
        return np.vstack(path_pos), np.concatenate(path_own), exits
    return np.zeros((0, step.d), dtype=np.int64), np.zeros(0, dtype=np.int64), exits


def _infinite_tree(quantity: str, K: LatticeSet, x, law: OffspringLaw, step: StepLaw, samples: int,
                   policy: Optional[RemainderPolicy], budget: TreeBudget, seed: int, include_start: bool,
                   engine: str, block_size: int, workers: Optional[int]) -> HitEstimate:
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    policy = policy or RemainderPolicy()
    x = np.asarray(x, dtype=np.int64).reshape(step.d)
    if include_start and K.contains(x)[0]:
        return _exact_one(quantity, x)
    r_stop = policy.choose_r_stop(K, law, step, samples)
    center = K.center
    d = step.d
    norm = ThetaNorm(step)
    spine_unit = law.variance / 2.0 * second_order_asymptotic_constant(step)
    adj = adjoint(law)

    if engine == "spine":
        def run(block: Tuple[int, int]) -> Tuple[int, int, float]:
            b, n = block
            hits = capped = 0
            unit = 0.0
            for j in range(n):
                h, c, u = _spine_engine_sample(K, x, law, step, budget, seed, b * block_size + j,
                                               r_stop, include_start, center, spine_unit)
                hits, capped, unit = hits + h, capped + c, unit + u
            return hits, capped, unit
    elif engine == "batched":
        def run(block: Tuple[int, int]) -> Tuple[int, int, float]:
            b, n = block
            rng = rng_stream(seed, b, STREAM_ESCAPE)
            roots, owners, exits = _spine_paths(np.tile(x, (n, 1)), step, center, r_stop, rng, include_start)
            res = run_forest(roots, owners, n, adj, law, step, K, budget.v_max, rng,
                             center, policy.prune_factor * r_stop, None, True)
            open_ = res.status == OPEN
            exit_unit = spine_unit * norm(exits - center) ** (4.0 - d)
            unit = float((res.remainder + exit_unit)[open_].sum())
            return int((res.status == HIT).sum()), int((res.status == CAPPED).sum()), unit
    else:
        raise ValidationError(f"Unknown escape engine: {engine}")

    parts = parallel_map(run, _blocks(samples, block_size), workers=workers)
    hits, capped, unit = (sum(p[i] for p in parts) for i in range(3))
    logger.info("%s at %s: %d hits, %d capped of %d (R_stop=%g)", quantity, x.tolist(), hits, capped,
                samples, r_stop)
    dominates = policy.dominates(r_stop, K, law, step, samples)
    return _finalize(quantity, x, hits, capped, unit, samples, policy, K, r_stop, dominates)


def _spine_engine_sample(K: LatticeSet, x: np.ndarray, law: OffspringLaw, step: StepLaw, budget: TreeBudget,
                         seed: int, sample: int, r_stop: float, include_start: bool, center: np.ndarray,
                         spine_unit: float) -> Tuple[int, int, float]:
    """One T_- (or T_I) sample with bushes read from spine_iterator."""
    sampler = _StepSampler(step)
    sample_seed = (int(seed) << 40) + int(sample)
    walk_rng = rng_stream(sample_seed, 0, STREAM_HIT)
    pos = x.copy()
    capped = False
    for i, bush in spine_iterator(law, sample_seed, budget, start=0 if include_start else 1):
        if i > 0:
            pos = pos + sampler(walk_rng, 1)[0]
            if ((pos - center) ** 2).sum() >= r_stop * r_stop:
                tail = spine_unit * ThetaNorm(step)(pos - center) ** (4.0 - step.d)
                return 0, int(capped), 0.0 if capped else float(tail)
        disp_rng = rng_stream(sample_seed, i, STREAM_ESCAPE)
        steps = sampler(disp_rng, bush.size - 1)
        where = np.zeros((bush.size, step.d), dtype=np.int64)
        where[0] = pos
        for level in bush.generations()[1:]:
            where[level] = where[bush.parent[level]] + steps[level - 1]
        if K.contains(where).any():
            return 1, 0, 0.0
        capped = capped or bush.outcome != "completed"
    return 0, int(capped), 0.0


def escape_probability(K: LatticeSet, x, law: OffspringLaw, step: StepLaw, samples: int,
                       policy: Optional[RemainderPolicy], budget: TreeBudget, seed: int,
                       engine: str = "batched", block_size: int = 1000,
                       workers: Optional[int] = None) -> HitEstimate:
    """p_-(x) for the T_- walk; e_K(x) is its complement()."""
    return _infinite_tree("p_minus", K, x, law, step, samples, policy, budget, seed, False,
                          engine, block_size, workers)


def p_infinite(K: LatticeSet, x, law: OffspringLaw, step: StepLaw, samples: int, budget: TreeBudget,
               seed: int, policy: Optional[RemainderPolicy] = None, engine: str = "batched",
               block_size: int = 1000, workers: Optional[int] = None) -> HitEstimate:
    """p_I(x): the adjoint bush at x plus the T_- walk from x."""
    return _infinite_tree("p_I", K, x, law, step, samples, policy, budget, seed, True,
                          engine, block_size, workers)


# =============================================================================
# EXACT DEPTH-LIMITED ORACLE
# =============================================================================

def depth_limited_hit_probability(kind: str, K: LatticeSet, x, law: OffspringLaw, step: StepLaw,
                                  generations: int) -> float:
    """P(tree truncated after `generations` generations hits K), exactly.

    p^(0) = 1_K and 1 - p^(n) = f(θ * (1 - p^(n-1))) off K; the adjoint root
    uses f̃ at the last stage.
    """
    x = np.asarray(x, dtype=np.int64).reshape(step.d)
    if K.contains(x)[0]:
        return 1.0
    R = int(max(np.abs(x).max(), np.abs(K.points).max())) + generations * step.support_radius
    geom = BoxGeometry(step.d, R, "none")
    st = geom.stencil(step)
    inner, outer = st.inner(), st.outer()
    in_k = K.contains(geom.points)
    miss = (~in_k).astype(float)
    ext_miss = np.ones(outer.shape[1])
    root = geom.lookup(x[None, :])[0]
    root_law = law if kind == "critical" else adjoint(law)
    for n in range(1, generations + 1):
        s = inner @ miss + outer @ ext_miss
        if n == generations:
            return float(1.0 - root_law.gf(s[root]))
        miss = np.where(in_k, 0.0, law.gf(s))
    return float(1.0 - miss[root])
