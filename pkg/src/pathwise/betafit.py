"""Beta-distribution numerics and fitting of elicited quantile triples.

Three fitting routes are provided: least-squares matching of the 5%/50%/95%
quantiles, a mode + 95%-quantile conversion, and method of moments. Rows with
more than two categories are sampled through a conditional-beta chain so every
realized probability vector lies exactly on the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize
from scipy.special import betainc, betaincinv

from .diagram import CptRow, Elicited, ElicitedTriple, Point, Remainder, Structural

LOG_GRID_LO, LOG_GRID_HI = np.log(0.05), np.log(200.0)
GRID_SIDE = 60
TWO_POINT_B_MAX = 1e4


class DegenerateTriple(Exception):
    pass


class NoSolution(Exception):
    pass


class VarianceTooLarge(Exception):
    pass


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b) and self.a > 0 and self.b > 0):
            raise ValueError(f"beta shapes must be positive and finite, got ({self.a}, {self.b})")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)

    @property
    def variance(self) -> float:
        s = self.a + self.b
        return self.a * self.b / (s * s * (s + 1.0))


@dataclass(frozen=True)
class FitReport:
    params: BetaParams
    achieved_quantiles: tuple[float, float, float]
    objective_value: float
    method: str  # "three-point" | "two-point" | "moment-match"


def beta_cdf(params: BetaParams, x: float | np.ndarray) -> float | np.ndarray:
    """Regularized incomplete beta I_x(a, b)."""
    return betainc(params.a, params.b, x)


def beta_quantile(params: BetaParams, p: float | np.ndarray) -> float | np.ndarray:
    """Inverse of beta_cdf; beta_cdf(result) matches p to ~1e-14."""
    return betaincinv(params.a, params.b, p)


def _achieved(params: BetaParams) -> tuple[float, float, float]:
    q = betaincinv(params.a, params.b, [0.05, 0.5, 0.95])
    return (float(q[0]), float(q[1]), float(q[2]))


def _three_point_objective(log_ab: np.ndarray, targets: np.ndarray) -> float:
    a, b = np.exp(log_ab)
    q = betaincinv(a, b, [0.05, 0.5, 0.95])
    return float(np.sum((q - targets) ** 2))


@lru_cache(maxsize=4096)
def _fit_three_point_cached(q05: float, best: float, q95: float) -> FitReport:
    targets = np.array([q05, best, q95])
    # Coarse global grid over (log a, log b), then simplex refinement.
    side = np.linspace(LOG_GRID_LO, LOG_GRID_HI, GRID_SIDE)
    la, lb = np.meshgrid(side, side, indexing="ij")
    a, b = np.exp(la)[..., None], np.exp(lb)[..., None]
    q = betaincinv(a, b, np.array([0.05, 0.5, 0.95]))
    obj = np.sum((q - targets) ** 2, axis=-1)
    i, j = np.unravel_index(np.argmin(obj), obj.shape)
    x0 = np.array([side[i], side[j]])
    res = minimize(_three_point_objective, x0, args=(targets,), method="Nelder-Mead",
                   options={"fatol": 1e-12, "xatol": 1e-10, "maxiter": 2000, "maxfev": 4000})
    params = BetaParams(float(np.exp(res.x[0])), float(np.exp(res.x[1])))
    return FitReport(params=params, achieved_quantiles=_achieved(params),
                     objective_value=float(res.fun), method="three-point")


def fit_three_point(triple: ElicitedTriple) -> FitReport:
    """Least-squares fit of (a, b) to the elicited 5%/50%/95% quantiles."""
    if triple.q05 == triple.q95:
        raise DegenerateTriple(f"q05 == q95 == {triple.q05}")
    if not (0.0 < triple.q05 and triple.q95 < 1.0):
        raise DegenerateTriple(f"outer quantiles must lie strictly inside (0, 1): "
                               f"({triple.q05}, {triple.q95})")
    return _fit_three_point_cached(triple.q05, triple.best, triple.q95)


def _two_point_a(mode: float, b: float) -> float:
    return (1.0 + mode * (b - 2.0)) / (1.0 - mode)


@lru_cache(maxsize=4096)
def _fit_two_point_cached(mode: float, q95: float) -> FitReport:
    if not (0.0 <= mode < 1.0):
        raise NoSolution(f"mode must lie in [0, 1), got {mode}")
    if not (mode < q95 < 1.0):
        raise NoSolution(f"q95 must lie in (mode, 1), got {q95}")
    # a(b) > 0 requires b > 2 - 1/mode.
    b_lo = 1e-9 if mode == 0.0 else max(1e-9, 2.0 - 1.0 / mode + 1e-9)

    def residual(b: float) -> float:
        params = BetaParams(_two_point_a(mode, b), b)
        return float(betaincinv(params.a, params.b, 0.95)) - q95

    # b -> q95 is not globally monotone for large modes; scan a log grid and
    # bisect inside the sign-change interval with the largest b (the less
    # extreme of the candidate shapes).
    grid = np.geomspace(b_lo, TWO_POINT_B_MAX, 400)
    vals = np.array([residual(b) for b in grid])
    bracket = None
    for k in range(len(grid) - 1, 0, -1):
        if vals[k] == 0.0:
            bracket = (grid[k], grid[k])
            break
        if vals[k - 1] * vals[k] < 0.0:
            bracket = (grid[k - 1], grid[k])
            break
    if bracket is None:
        raise NoSolution(f"no beta with mode {mode} attains q95 = {q95}")
    lo, hi = bracket
    f_lo = residual(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = residual(mid)
        if f_mid == 0.0:
            lo = hi = mid
            break
        if f_lo * f_mid < 0.0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    b = 0.5 * (lo + hi)
    params = BetaParams(_two_point_a(mode, b), b)
    achieved = _achieved(params)
    return FitReport(params=params, achieved_quantiles=achieved,
                     objective_value=(achieved[2] - q95) ** 2, method="two-point")


def fit_two_point(mode: float, q95: float) -> FitReport:
    """Convert an elicited mode and 95% quantile to beta shapes.

    a is tied to b through the mode identity a = (1 + m(b-2)) / (1 - m);
    b is found by root search on the implied 95% quantile.
    """
    return _fit_two_point_cached(float(mode), float(q95))


def fit_moments(mean: float, sd: float) -> BetaParams:
    """Method-of-moments beta from a sample mean and standard deviation."""
    if not (0.0 < mean < 1.0):
        raise VarianceTooLarge(f"mean must lie in (0, 1), got {mean}")
    var = sd * sd
    if var >= mean * (1.0 - mean):
        raise VarianceTooLarge(f"sd^2 = {var} >= mean(1-mean) = {mean * (1.0 - mean)}")
    nu = mean * (1.0 - mean) / var - 1.0
    return BetaParams(mean * nu, (1.0 - mean) * nu)


def _fit(triple: ElicitedTriple, method: str) -> FitReport:
    if method == "three-point":
        return fit_three_point(triple)
    if method == "two-point":
        return fit_two_point(triple.best, triple.q95)
    raise ValueError(f"unknown fit method {method!r}")


@dataclass(frozen=True)
class SampledCell:
    """One chained beta draw: category index, fit, and its conditional triple."""

    index: int
    fit: FitReport
    conditional_triple: ElicitedTriple


@dataclass(frozen=True)
class RowSampler:
    """Immutable sampler for one CPT row; draws need an explicit uniform stream.

    Sampled cells are transformed by inverse CDF, one uniform per cell per
    draw, so a caller supplying counter-based uniforms gets reproducible
    output under any partitioning of the draws.
    """

    n_categories: int
    fixed: tuple[tuple[int, float], ...]         # (category index, value)
    sampled: tuple[SampledCell, ...]             # in chain order
    remainder_index: int | None

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        """Map uniforms of shape (n_sampled, draws) to simplex vectors
        (n_categories, draws)."""
        if uniforms.shape[0] != len(self.sampled):
            raise ValueError(f"expected {len(self.sampled)} uniform rows, "
                             f"got {uniforms.shape[0]}")
        draws = uniforms.shape[1] if uniforms.ndim == 2 else 0
        out = np.zeros((self.n_categories, draws))
        for idx, value in self.fixed:
            out[idx, :] = value
        remaining = np.full(draws, 1.0 - sum(v for _, v in self.fixed))
        for k, cell in enumerate(self.sampled):
            z = betaincinv(cell.fit.params.a, cell.fit.params.b, uniforms[k])
            v = z * remaining
            out[cell.index, :] = v
            remaining = remaining - v
        if self.remainder_index is not None:
            out[self.remainder_index, :] = remaining
        return out

    def best_vector(self) -> np.ndarray:
        """Row best estimates as stored (not the sampler's mean)."""
        out = np.zeros(self.n_categories)
        for idx, value in self.fixed:
            out[idx] = value
        remaining = 1.0 - sum(v for _, v in self.fixed)
        # Chain bests are conditional; undo the scaling for reporting.
        for cell in self.sampled:
            v = cell.conditional_triple.best * remaining
            out[cell.index] = v
            remaining -= v
        if self.remainder_index is not None:
            out[self.remainder_index] = remaining
        return out


def _conditional_triple(triple: ElicitedTriple, scale: float, method: str) -> ElicitedTriple:
    q05 = min(max(triple.q05 / scale, 0.0), 1.0)
    best = min(max(triple.best / scale, 0.0), 1.0)
    q95 = min(max(triple.q95 / scale, 0.0), 1.0)
    best_is = "mode" if method == "two-point" else "median"
    return ElicitedTriple(q05=q05, best=best, q95=q95, best_is=best_is)


def _chain_fits(order: list[tuple[int, ElicitedTriple]], method: str,
                initial_mass: float, strict: bool) -> list[SampledCell] | None:
    """Fit the chain in the given order; None if a rescaled triple needs
    clipping and strict is set."""
    cells: list[SampledCell] = []
    remaining = initial_mass
    for idx, triple in order:
        if remaining <= 0.0:
            return None
        if strict and (triple.q95 > remaining + 1e-12 or triple.q05 < 0.0):
            return None
        cond = _conditional_triple(triple, remaining, method)
        if not cond.q05 < cond.q95:
            return None
        cells.append(SampledCell(index=idx, fit=_fit(cond, method), conditional_triple=cond))
        remaining -= triple.best
    return cells


def build_row_sampler(row: CptRow, method: str = "three-point") -> RowSampler:
    """Build the conditional-beta sampler for one CPT row.

    Structural and point cells stay fixed; elicited cells are chained betas
    with one category left as the exact remainder, so sampled vectors always
    sum to 1. For rows with three or more elicited cells the chain order is
    chosen to avoid rescaled quantiles leaving [0, 1]: remainder candidates
    are tried smallest-best first, the rest sampled largest-best first; if no
    clip-free order exists the declared category order is used with clipping.
    """
    fixed: list[tuple[int, float]] = []
    elicited: list[tuple[int, ElicitedTriple]] = []
    explicit_remainder: int | None = None
    for i, entry in enumerate(row):
        if isinstance(entry, (Structural, Point)):
            fixed.append((i, entry.p))
        elif isinstance(entry, Elicited):
            elicited.append((i, entry.triple))
        elif isinstance(entry, Remainder):
            explicit_remainder = i
    initial_mass = 1.0 - sum(v for _, v in fixed)

    if not elicited:
        return RowSampler(n_categories=len(row), fixed=tuple(fixed), sampled=(),
                          remainder_index=explicit_remainder)

    if explicit_remainder is not None:
        candidates = [(explicit_remainder, None, elicited)]
    elif len(elicited) <= 2:
        # Binary convention: sample the first printed column, derive the rest.
        candidates = [(elicited[-1][0], None, elicited[:-1])]
    else:
        candidates = []
        by_best = sorted(elicited, key=lambda e: (e[1].best, -e[0]))
        for rem_idx, rem_triple in by_best:
            rest = [e for e in elicited if e[0] != rem_idx]
            rest.sort(key=lambda e: (-e[1].best, e[0]))
            candidates.append((rem_idx, rem_triple, rest))

    for rem_idx, _, order in candidates:
        cells = _chain_fits(order, method, initial_mass, strict=True)
        if cells is not None:
            return RowSampler(n_categories=len(row), fixed=tuple(fixed),
                              sampled=tuple(cells), remainder_index=rem_idx)

    # Fallback: category order, last elicited as remainder, clipped rescaling.
    order = elicited[:-1]
    rem_idx = elicited[-1][0] if explicit_remainder is None else explicit_remainder
    if explicit_remainder is not None:
        order = elicited
    cells = _chain_fits(order, method, initial_mass, strict=False)
    if cells is None:
        raise DegenerateTriple("row cannot be sampled: conditional triples collapse")
    return RowSampler(n_categories=len(row), fixed=tuple(fixed),
                      sampled=tuple(cells), remainder_index=rem_idx)
