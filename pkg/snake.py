"""
SNAKE CAPACITY OF BALLS
=======================
Radial maximal solution of Δu = 4u² outside the unit ball,

    u''(t) + (d-1)/t · u'(t) = 4 u(t)²,   u(t) → ∞ as t ↓ 1,   u(t) ~ a₀ t^{2-d},

computed three ways (power series in s = t^{-(d-4)}, inward shooting, and the
closed form 6/(t²-1)² for d = 6), together with the integral representation
of a₀, the ball scaling u_{B(0,r)}(x) = r^{-2} u(|x|/r) and the low-dimension
normalizers φ_d.

Series coefficients are accumulated with mpmath; the maximal a₀ is the radius
of convergence of Σ b_n w^n where a_n = a₀^{n+1} b_n.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import mpmath as mp
import numpy as np
import pandas as pd
from scipy import integrate
from scipy.special import gamma

from exceptions import ConvergenceError, ValidationError
from runtime import get_logger

logger = get_logger("snake")

SERIES_DPS = 40
U_BIG = 1e10
INIT_TERMS = 12


def delta_exponent(d: int) -> float:
    return (d - 4) / (d - 2)


def _check_dimension(d: int) -> None:
    if int(d) != d or d < 5:
        raise ValidationError("The snake capacity needs an integer d >= 5", {"d": d})


def c_d_constant(d: int) -> float:
    """c_d = Γ(d/2 - 1) / (2π^{d/2})."""
    return gamma(d / 2.0 - 1.0) / (2.0 * math.pi ** (d / 2.0))


def sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / gamma(d / 2.0)


# =============================================================================
# SERIES
# =============================================================================

def _unit_coefficients(d: int, N: int, dps: int = SERIES_DPS) -> List[mp.mpf]:
    """b_0..b_N for a₀ = 1; every a_n equals a₀^{n+1} b_n."""
    with mp.workdps(dps):
        dl = mp.mpf(d - 4) / (d - 2)
        pref = mp.mpf(4) / (d - 2) ** 2
        b = [mp.mpf(1)]
        for n in range(1, N + 1):
            conv = mp.fsum(b[k] * b[n - 1 - k] for k in range(n))
            b.append(pref * conv / (n * dl * (n * dl + 1)))
    return b


@dataclass
class SeriesCoefficients:
    d: int
    a0: float
    exact: List[mp.mpf] = field(repr=False)
    radius_s: float
    ratio_limit: float

    @property
    def values(self) -> np.ndarray:
        return np.array([float(a) for a in self.exact])

    @property
    def t_convergence(self) -> float:
        """Smallest t where the series still converges (1 at the critical a₀)."""
        return max(self.radius_s, 0.0) ** (-1.0 / (self.d - 4)) if self.radius_s > 0 else math.inf

    def partial_sums(self, t: float) -> np.ndarray:
        with mp.workdps(SERIES_DPS):
            t = mp.mpf(t)
            s = t ** (-(self.d - 4))
            pref = t ** (2 - self.d)
            out, acc, power = [], mp.mpf(0), mp.mpf(1)
            for a in self.exact:
                acc += a * power
                power *= s
                out.append(float(pref * acc))
        return np.array(out)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"n": np.arange(len(self.exact)), "a_n": self.values})


def _domb_sykes(b: Sequence[mp.mpf], window: int) -> float:
    """Limit of b_{n+1}/b_n from a quadratic fit in 1/n over the last `window` ratios."""
    N = len(b) - 1
    n = np.arange(max(N - window, 1), N)
    r = np.array([float(b[k + 1] / b[k]) for k in n])
    return float(np.polyfit(1.0 / n, r, 2)[-1])


def series_coefficients(d: int, a0: float, N: int, dps: int = SERIES_DPS) -> SeriesCoefficients:
    """a_0..a_N of u(t) = t^{2-d} Σ a_n t^{-n(d-4)}, plus the ratio-test radius in s."""
    _check_dimension(d)
    if a0 <= 0:
        raise ValidationError("a0 must be positive", {"a0": a0})
    if N < 0:
        raise ValidationError("N must be >= 0", {"N": N})
    b = _unit_coefficients(d, max(N, 8), dps)
    with mp.workdps(dps):
        A = mp.mpf(a0)
        exact = [A ** (n + 1) * b[n] for n in range(N + 1)]
        if not all(mp.isfinite(a) for a in exact):
            raise ValidationError("Series coefficients overflow", {"d": d, "a0": a0, "N": N})
    limit = _domb_sykes(b, max(len(b) // 4, 4))
    ratio = a0 * limit
    radius = 1.0 / ratio if ratio > 0 else math.inf
    logger.debug("series d=%d a0=%g N=%d: radius in s %.8g", d, a0, N, radius)
    return SeriesCoefficients(d, float(a0), exact, radius, ratio)


@dataclass
class A0Result:
    d: int
    a0: float
    low: float
    high: float
    N: int
    conclusive: bool
    ratio_limit: float
    t_probe: float
    tail_at_probe: float

    def to_dict(self) -> Dict:
        return {
            "d": self.d,
            "a0": self.a0,
            "bracket": [self.low, self.high],
            "N": self.N,
            "conclusive": self.conclusive,
            "ratio_limit": self.ratio_limit,
            "t_probe": self.t_probe,
            "tail_at_probe": self.tail_at_probe,
        }


def find_a0(d: int, t_probe: float = 1.01, N: int = 400, tolerance: float = 1e-6,
            strict: bool = True) -> A0Result:
    """Largest a₀ for which the series converges for every t > 1.

    Classification uses the Domb-Sykes limit L of b_{n+1}/b_n: a₀ is
    convergent when a₀(L + η) < 1 and divergent when a₀(L - η) > 1, with η the
    disagreement of fits over the last N/4 and N/8 ratios. Bisection stops at
    the tolerance or when the classifier cannot separate further.
    """
    _check_dimension(d)
    if t_probe <= 1.0:
        raise ValidationError("t_probe must exceed 1", {"t_probe": t_probe})
    if N < 32:
        raise ValidationError("N must be >= 32 for the tail-ratio classifier", {"N": N})
    b = _unit_coefficients(d, N)
    L = _domb_sykes(b, N // 4)
    eta = abs(L - _domb_sykes(b, N // 8))

    def classify(a: float) -> Optional[bool]:
        if a * (L + eta) < 1.0:
            return True
        if a * (L - eta) > 1.0:
            return False
        return None

    lo = 1.0
    while classify(lo) is not True:
        lo /= 2.0
    hi = 2.0 * lo
    while classify(hi) is True:
        lo, hi = hi, 2.0 * hi
    conclusive = True
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        verdict = classify(mid)
        if verdict is None:
            conclusive = False
            break
        lo, hi = (mid, hi) if verdict else (lo, mid)
    a0 = 0.5 * (lo + hi)
    s = t_probe ** (-(d - 4))
    with mp.workdps(SERIES_DPS):
        terms = [mp.mpf(a0) ** (n + 1) * b[n] * mp.mpf(s) ** n for n in range(N + 1)]
        tail = float(terms[-1] / mp.fsum(terms))
    result = A0Result(d, a0, lo, hi, N, conclusive and hi - lo <= tolerance, float(L), t_probe, tail)
    if not result.conclusive:
        logger.warning("a0 classification for d=%d stopped at bracket [%.10g, %.10g]", d, lo, hi)
        if strict:
            raise ConvergenceError("Series classification inconclusive at this N", result.to_dict())
    logger.info("a0(d=%d) = %.10g, bracket width %.2e", d, a0, hi - lo)
    return result


# =============================================================================
# RADIAL SOLUTIONS
# =============================================================================

@dataclass
class RadialSolution:
    """u on (1, ∞): an inner evaluator up to t_switch, the series beyond."""
    d: int
    a0: float
    coefficients: np.ndarray = field(repr=False)
    method: str
    t_switch: float = 1.0
    t_min: float = 1.0
    inner: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    bracket: Optional[Tuple[float, float]] = None
    details: Dict = field(default_factory=dict)

    @property
    def delta(self) -> float:
        return delta_exponent(self.d)

    def series(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        s = t ** (-(self.d - 4.0))
        return t ** (2.0 - self.d) * np.polynomial.polynomial.polyval(s, self.coefficients)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_min):
            raise ValidationError("t below the evaluated range", {"t_min": self.t_min, "method": self.method})
        if self.inner is None:
            return self.series(t)
        return np.where(t >= self.t_switch, self.series(np.maximum(t, self.t_switch)),
                        self.inner(np.minimum(t, self.t_switch)))

    def envelope(self, t) -> np.ndarray:
        """t^{d-2} u(t), which tends to a₀."""
        t = np.asarray(t, dtype=float)
        return t ** (self.d - 2.0) * self(t)

    def ball(self, r: float) -> Callable[[np.ndarray], np.ndarray]:
        """x ↦ u_{B(0,r)}(x) = r^{-2} u(|x|/r) for points x with |x| > r."""
        def u_ball(x) -> np.ndarray:
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return self(np.linalg.norm(x, axis=1) / r) / r ** 2
        return u_ball

    def table(self, grid: Sequence[float]) -> pd.DataFrame:
        grid = np.asarray(grid, dtype=float)
        return pd.DataFrame({"t": grid, "u": self(grid)})

    def to_dict(self) -> Dict:
        return {
            "d": self.d,
            "a0": self.a0,
            "delta": self.delta,
            "method": self.method,
            "terms": len(self.coefficients),
            "bracket": list(self.bracket) if self.bracket else None,
            **self.details,
        }


def closed_form_d6() -> RadialSolution:
    coeffs = 6.0 * np.arange(1, 61, dtype=float)
    return RadialSolution(6, 6.0, coeffs, "closed_form_d6", t_switch=math.inf, t_min=1.0 + 1e-12,
                          inner=lambda t: 6.0 / (t ** 2 - 1.0) ** 2)


def series_solution(d: int, a0: float, N: int = 400) -> RadialSolution:
    coeffs = series_coefficients(d, a0, N)
    values = coeffs.values
    # lowest t where the dropped tail is below 1e-14 of the leading term
    t_min = max(1.0, float(((1e-14 * values[0] / max(values[-1], 1e-300)) ** (1.0 / N)) ** (-1.0 / (d - 4))))
    return RadialSolution(d, a0, values, "series", t_min=t_min,
                          details={"radius_s": coeffs.radius_s})


def _initial_state(b: Sequence[float], a: float, d: int, t: float) -> np.ndarray:
    n = np.arange(len(b))
    c = a ** (n + 1) * np.asarray(b)
    powers = 2.0 - d - n * (d - 4.0)
    return np.array([float(c @ t ** powers), float(c @ (powers * t ** (powers - 1.0)))])


def _rhs(d: int):
    def f(t, y):
        return [y[1], 4.0 * y[0] ** 2 - (d - 1.0) / t * y[1]]
    return f


def _blowup_point(d: int, a: float, b: Sequence[float], t_far: float, t_low: float,
                  u_big: float, rtol: float, dense: bool = False):
    """Integrate inward from t_far; returns (estimated blow-up t or -inf, solution object)."""
    def event(t, y):
        return y[0] - u_big
    event.terminal = True
    sol = integrate.solve_ivp(_rhs(d), (t_far, t_low), _initial_state(b, a, d, t_far), method="DOP853",
                              rtol=rtol, atol=1e-300, events=event, dense_output=dense)
    if sol.status == -1:
        raise ConvergenceError("Step size underflow in radial shooting", {"a": a, "message": sol.message})
    if sol.t_events[0].size:
        t_e = float(sol.t_events[0][0])
        return t_e - math.sqrt(1.5 / u_big), sol
    return -math.inf, sol


def shoot_radial(d: int, t_far: float = 40.0, a_guess: Optional[float] = None,
                 grid: Optional[Sequence[float]] = None, u_big: float = U_BIG, rtol: float = 1e-13,
                 rel_tol: float = 1e-12, max_iter: int = 200) -> RadialSolution:
    """Maximal radial solution by inward shooting with blow-up placed at t = 1.

    The amplitude a of u ~ a t^{2-d} at t_far is first moved with the exact
    scaling a ← a·t_b^{4-d}, then bisected on the sign of t_b(a) - 1.
    """
    _check_dimension(d)
    if t_far <= 2.0:
        raise ValidationError("t_far must exceed 2", {"t_far": t_far})
    b = [float(v) for v in _unit_coefficients(d, INIT_TERMS)]
    t_low = 0.5

    def tb(a: float) -> float:
        return _blowup_point(d, a, b, t_far, t_low, u_big, rtol)[0]

    a = a_guess or 1.0
    for _ in range(60):
        t_b = tb(a)
        if not math.isfinite(t_b):
            a *= 4.0
            continue
        step = t_b ** (4.0 - d)
        a *= step
        if abs(step - 1.0) < 1e-10:
            break

    width = 1e-8
    lo, hi = a * (1 - width), a * (1 + width)
    while tb(lo) >= 1.0:
        lo *= 1 - width
        width *= 2
    while tb(hi) < 1.0:
        hi *= 1 + width
        width *= 2
    for it in range(max_iter):
        if hi - lo <= rel_tol * hi:
            break
        mid = 0.5 * (lo + hi)
        if tb(mid) >= 1.0:
            hi = mid
        else:
            lo = mid
    else:
        raise ConvergenceError("Shooting bisection did not reach the tolerance", {"bracket": [lo, hi]})

    a0 = 0.5 * (lo + hi)
    t_b, sol = _blowup_point(d, a0, b, t_far, t_low, u_big, rtol, dense=True)
    if not math.isfinite(t_b):
        raise ConvergenceError("Shooting solution does not blow up", {"a0": a0})
    t_end = float(sol.t[-1])
    dense = sol.sol
    coeffs = np.array([a0 ** (n + 1) * float(v) for n, v in enumerate(_unit_coefficients(d, 60))])
    solution = RadialSolution(d, a0, coeffs, "shooting", t_switch=t_far, t_min=t_end,
                              inner=lambda t: dense(np.atleast_1d(t))[0].reshape(np.shape(t)),
                              bracket=(lo, hi), details={"t_far": t_far, "blowup": t_b, "u_big": u_big})
    solution.details["derivative"] = lambda t: dense(np.atleast_1d(t))[1].reshape(np.shape(t))
    if grid is not None:
        solution.details["grid"] = solution.table(grid)
    logger.info("shooting d=%d: a0 = %.12g (blow-up at %.3e from 1)", d, a0, t_b - 1.0)
    return solution


def solve_radial(d: int, method: str = "auto", **kwargs) -> RadialSolution:
    if method == "closed_form_d6" or (method == "auto" and d == 6):
        if d != 6:
            raise ValidationError("The closed form exists for d = 6 only", {"d": d})
        return closed_form_d6()
    if method in ("shooting", "auto"):
        return shoot_radial(d, **kwargs)
    if method == "series":
        res = find_a0(d, **kwargs)
        return series_solution(d, res.a0, res.N)
    raise ValidationError(f"Unknown radial method: {method}")


def ode_residual(solution: RadialSolution, t_lo: float = 1.1, t_hi: Optional[float] = None,
                 points: int = 400, h: float = 1e-3) -> float:
    """Scaled sup of |u'' + (d-1)/t u' - 4u²| with derivatives by fourth-order differences."""
    d = solution.d
    t_hi = t_hi or min(solution.t_switch, 40.0)
    t = np.linspace(t_lo + 2 * h, t_hi - 2 * h, points)
    u = solution(t)

    def diff(f, x):
        return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)

    derivative = solution.details.get("derivative")
    du = derivative(t) if derivative else diff(solution, t)
    d2u = diff(derivative, t) if derivative else diff(lambda x: diff(solution, x), t)
    drift = (d - 1.0) / t * du
    scale = np.maximum.reduce([4.0 * u ** 2, np.abs(d2u), np.abs(drift)])
    return float((np.abs(d2u + drift - 4.0 * u ** 2) / scale).max())


# =============================================================================
# INTEGRAL REPRESENTATION
# =============================================================================

def quintic_cutoff(t) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ψ, ψ', ψ'' for the radial cutoff: 0 on [0,2], 1 on [3,∞), 6x⁵-15x⁴+10x³ between."""
    x = np.clip(np.asarray(t, dtype=float) - 2.0, 0.0, 1.0)
    psi = x ** 3 * (10 - 15 * x + 6 * x ** 2)
    dpsi = 30 * x ** 2 * (1 - x) ** 2
    d2psi = 60 * x * (1 - x) * (1 - 2 * x)
    return psi, dpsi, d2psi


def integral_identity_check(d: int, solution: RadialSolution, cutoff_profile: str = "quintic",
                            t_cut: Optional[float] = None) -> Dict[str, float]:
    """|rhs - a₀|/a₀ for a₀ = -(c_d/2) ∫ (4ψu² - uΔψ) dx, integrated radially."""
    if cutoff_profile != "quintic":
        raise ValidationError(f"Unknown cutoff profile: {cutoff_profile}")
    if solution.d != d:
        raise ValidationError("Solution dimension mismatch", {"d": d, "solution_d": solution.d})
    area = sphere_area(d)
    t_cut = t_cut or (solution.t_switch if math.isfinite(solution.t_switch) else 50.0)

    def bridge(t):
        psi, dpsi, d2psi = quintic_cutoff(t)
        lap = d2psi + (d - 1.0) / t * dpsi
        u = float(solution(t))
        return (4.0 * psi * u ** 2 - u * lap) * area * t ** (d - 1)

    def bulk(t):
        return 4.0 * float(solution(t)) ** 2 * area * t ** (d - 1)

    opts = {"epsabs": 0.0, "epsrel": 1e-12, "limit": 400}
    parts = [integrate.quad(bridge, 2.0, 3.0, **opts), integrate.quad(bulk, 3.0, t_cut, **opts),
             integrate.quad(bulk, t_cut, np.inf, **opts)]
    total = sum(p[0] for p in parts)
    err = sum(p[1] for p in parts)
    if not np.isfinite(total):
        raise ConvergenceError("Quadrature failed in the integral identity", {"d": d})
    rhs = -c_d_constant(d) / 2.0 * total
    leading_tail = 4.0 * solution.a0 ** 2 * area * t_cut ** (4.0 - d) / (d - 4.0)
    residual = abs(rhs - solution.a0) / solution.a0
    logger.info("integral identity d=%d: rhs %.10g vs a0 %.10g (residual %.2e)", d, rhs, solution.a0, residual)
    return {"rhs": rhs, "a0": solution.a0, "residual": residual, "quad_error": c_d_constant(d) / 2.0 * err,
            "tail_beyond_cut": c_d_constant(d) / 2.0 * parts[2][0],
            "tail_leading_term": c_d_constant(d) / 2.0 * leading_tail, "t_cut": t_cut}


# =============================================================================
# SCALING AND LOW DIMENSIONS
# =============================================================================

def bscap_ball(d: int, r: float, a0: Optional[float] = None) -> float:
    """BScap(B(0,r)) = r^{d-4} a₀."""
    _check_dimension(d)
    if r <= 0:
        raise ValidationError("Radius must be positive", {"r": r})
    if a0 is None:
        a0 = 6.0 if d == 6 else find_a0(d).a0
    return r ** (d - 4) * a0


@dataclass(frozen=True)
class LowDimNormalizer:
    d: int

    def __post_init__(self):
        if self.d not in (1, 2, 3, 4):
            raise ValidationError("Low-dimension normalizers exist for d in {1,2,3,4}", {"d": self.d})

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t <= 1.0):
            raise ValidationError("φ_d is defined for t > 1")
        if self.d == 4:
            return 2.0 * t ** 2 * np.log(t)
        return 2.0 / (4.0 - self.d) * t ** 2


def phi_low_dim(d: int, t) -> float:
    return float(LowDimNormalizer(d)(t))
