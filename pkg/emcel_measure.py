#!/usr/bin/env python3

import logging
logger = logging.getLogger(__name__)
import functools
import math
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import integrate

from emcel_const import (BoundaryKind, ArgumentError, DomainError,
                         ConfigurationError, QUAD_TOL, AUDIT_GRID_SIZE,
                         MAX_PIECES, GAUSS_ORDERS)


class StateSpace:
    """ The interval I on which the diffusion lives.

    An infinite endpoint is always inaccessible. A finite endpoint is
    absorbing unless declared inaccessible.

    :param left: the left endpoint l (may be -inf)
    :param right: the right endpoint r (may be inf)
    :param left_kind: classification of l
    :param right_kind: classification of r
    """

    def __init__(self, left: float = -math.inf, right: float = math.inf,
                 left_kind: str = None, right_kind: str = None):
        left = float(left)
        right = float(right)
        if not left < right:
            raise ConfigurationError("empty state space: l=%g, r=%g"
                                     % (left, right))
        if left_kind is None:
            left_kind = (BoundaryKind.INACCESSIBLE if math.isinf(left)
                         else BoundaryKind.ABSORBING)
        if right_kind is None:
            right_kind = (BoundaryKind.INACCESSIBLE if math.isinf(right)
                          else BoundaryKind.ABSORBING)
        for value, kind in ((left, left_kind), (right, right_kind)):
            if kind not in (BoundaryKind.INACCESSIBLE, BoundaryKind.ABSORBING):
                raise ConfigurationError("unknown boundary kind %s" % kind)
            if math.isinf(value) and kind != BoundaryKind.INACCESSIBLE:
                raise ConfigurationError("an infinite endpoint must be "
                                         "inaccessible")
        self.left = left
        self.right = right
        self.left_kind = left_kind
        self.right_kind = right_kind

    @property
    def left_accessible(self) -> bool:
        return self.left_kind == BoundaryKind.ABSORBING

    @property
    def right_accessible(self) -> bool:
        return self.right_kind == BoundaryKind.ABSORBING

    def in_interior(self, y: float) -> bool:
        return self.left < y < self.right

    def in_space(self, y: float) -> bool:
        """ Membership in I, i.e. the interior plus absorbing endpoints.
        """
        if self.in_interior(y):
            return True
        return ((y == self.left and self.left_accessible) or
                (y == self.right and self.right_accessible))

    def in_closure(self, y: float, slack: float = 0.0) -> bool:
        return self.left - slack <= y <= self.right + slack

    def __str__(self):
        return "%s%g, %g%s" % ('[' if self.left_accessible else '(',
                               self.left, self.right,
                               ']' if self.right_accessible else ')')


class Density:
    """ Density of the absolutely continuous part of a speed measure.

    :param func: the density x -> nonnegative real
    :param breakpoints: points where func is not smooth; quadrature \
                        is always split there
    :param constant: if set, the density equals this value everywhere \
                     and closed forms are used
    :param vectorized: True when func maps numpy arrays elementwise
    """

    def __init__(self, func: Callable[[float], float],
                 breakpoints: Iterable[float] = (),
                 constant: Optional[float] = None,
                 vectorized: bool = False):
        self.func = func
        self.breakpoints = tuple(sorted(float(b) for b in breakpoints))
        self.constant = constant
        self.vectorized = vectorized
        self._elementwise = np.vectorize(func, otypes=[float])

    @classmethod
    def uniform(cls, value: float) -> 'Density':
        if value < 0:
            raise ConfigurationError("negative density %g" % value)
        value = float(value)
        return cls(lambda x: value, constant=value)

    def __call__(self, x: float) -> float:
        return self.func(x)

    def many(self, xs: np.ndarray) -> np.ndarray:
        if self.constant is not None:
            return np.full(np.shape(xs), self.constant)
        if self.vectorized:
            return np.asarray(self.func(xs), dtype=float)
        return self._elementwise(xs)

    def kinks_in(self, a: float, b: float) -> List[float]:
        return [k for k in self.breakpoints if a < k < b]


class SelfSimilarMeasure:
    """ Invariant measure of a finite family of affine contractions.

    Each map is x -> scale*x + offset with an attached probability.
    The maps send [u, v] into itself with disjoint interiors.

    :param support: the interval [u, v]
    :param maps: list of (scale, offset, probability)
    :param total_mass: the mass of the whole component
    """

    def __init__(self, support: Tuple[float, float],
                 maps: Sequence[Tuple[float, float, float]],
                 total_mass: float = 1.0):
        u, v = float(support[0]), float(support[1])
        if not u < v:
            raise ConfigurationError("degenerate self-similar support")
        if total_mass <= 0:
            raise ConfigurationError("self-similar mass must be positive")
        if not maps:
            raise ConfigurationError("a self-similar measure needs maps")
        images = []
        for scale, offset, prob in maps:
            if not 0 < scale < 1:
                raise ConfigurationError("map with scale %g is not a "
                                         "contraction" % scale)
            if prob <= 0:
                raise ConfigurationError("map weights must be positive")
            lo, hi = scale * u + offset, scale * v + offset
            eps = 1e-12 * max(1.0, abs(u), abs(v))
            if lo < u - eps or hi > v + eps:
                raise ConfigurationError("map image [%g, %g] leaves the "
                                         "support" % (lo, hi))
            images.append((lo, hi))
        images.sort()
        for (lo1, hi1), (lo2, hi2) in zip(images, images[1:]):
            if lo2 < hi1 - 1e-12 * max(1.0, abs(hi1)):
                raise ConfigurationError("map images overlap")
        if abs(sum(m[2] for m in maps) - 1.0) > 1e-12:
            raise ConfigurationError("map weights must sum to one")

        self.support = (u, v)
        self.maps = [(float(s), float(b), float(p)) for s, b, p in maps]
        self.total_mass = float(total_mass)
        # barycenter: fixed point of mean = sum p (s mean + b)
        self.mean = (sum(p * b for s, b, p in self.maps) /
                     (1.0 - sum(p * s for s, b, p in self.maps)))

    @classmethod
    def cantor(cls, left: float = 0.0, right: float = 1.0,
               mass: float = 1.0) -> 'SelfSimilarMeasure':
        """ The standard Cantor measure transported to [left, right].
        """
        width = right - left
        return cls((left, right),
                   [(1.0 / 3.0, left * 2.0 / 3.0, 0.5),
                    (1.0 / 3.0, left * 2.0 / 3.0 + width * 2.0 / 3.0, 0.5)],
                   total_mass=mass)

    def pieces(self):
        """ The root piece as (scale, offset, mass) of the identity map.
        """
        return [(1.0, 0.0, self.total_mass)]

    def children(self, scale: float, offset: float, mass: float):
        for sj, bj, pj in self.maps:
            yield scale * sj, scale * bj + offset, mass * pj

    def piece_interval(self, scale: float, offset: float):
        u, v = self.support
        return scale * u + offset, scale * v + offset


class SpeedMeasure:
    """ A speed measure m = density + atoms + self-similar parts on a state space.

    The object is immutable after construction. The construction checks
    that atoms are distinct and inside the interior, and that
    0 < m([a, b]) < inf on a validation grid of compact intervals.

    :param space: the state space I
    :param density: the absolutely continuous part
    :param atoms: list of (position, weight)
    :param singular_parts: list of self-similar components
    """

    def __init__(self, space: StateSpace, density: Density = None,
                 atoms: Sequence[Tuple[float, float]] = (),
                 singular_parts: Sequence[SelfSimilarMeasure] = ()):
        self.space = space
        self.density = density if density is not None else Density.uniform(0.0)
        atoms = sorted((float(x), float(w)) for x, w in atoms)
        for x, w in atoms:
            if not space.in_interior(x):
                raise ConfigurationError("atom at %g outside the interior %s"
                                         % (x, space))
            if w <= 0:
                raise ConfigurationError("atom weight must be positive")
        for (x1, _), (x2, _) in zip(atoms, atoms[1:]):
            if x1 == x2:
                raise ConfigurationError("duplicated atom at %g" % x1)
        self.atoms = tuple(atoms)
        self.singular_parts = tuple(singular_parts)
        for part in self.singular_parts:
            u, v = part.support
            if not (space.in_closure(u) and space.in_closure(v)):
                raise ConfigurationError("self-similar support outside %s"
                                         % space)
        self._validate()

    def _validate(self):
        grid = _validation_grid(self.space)
        for a, b in zip(grid, grid[1:]):
            mass = measure_of_interval(self, a, b)
            if not (0.0 < mass < math.inf):
                raise ConfigurationError("m([%g, %g]) = %g violates "
                                         "0 < m < inf" % (a, b, mass))

    def __str__(self):
        return ("speed measure on %s with %d atoms and %d singular parts"
                % (self.space, len(self.atoms), len(self.singular_parts)))


class ConditionCReport(BaseModel):
    """ Outcome of the grid audit of the Cauchy lower bound.
    """
    k1: float = Field(..., gt=0)
    k2: int = Field(..., ge=0, le=1)
    passes: bool
    first_violation: Optional[float] = None
    n_points: int = Field(..., ge=1)


def _density_integral(density: Density, lo: float, hi: float,
                      weight: Callable[[float], float], tol: float) -> float:
    """ Integrate weight*density on [lo, hi], split at the declared kinks.
    """
    points = [lo] + density.kinks_in(lo, hi) + [hi]
    total = 0.0
    for a, b in zip(points, points[1:]):
        if b <= a:
            continue
        value, _ = integrate.quad(lambda u: weight(u) * density(u), a, b,
                                  epsabs=tol, epsrel=1e-13, limit=200)
        total += value
    return total


def singular_component_integral(c: SelfSimilarMeasure, y: float, a: float,
                                tol: float = QUAD_TOL) -> float:
    """ Integral of (a - |u - y|)^+ against a self-similar component.

    Pieces that miss (y-a, y+a) contribute nothing, pieces on which the
    integrand is linear are integrated exactly through their barycenter,
    pieces with mass times length below tol/3 use the midpoint, and the
    remaining pieces are subdivided.

    :return: the integral, within absolute error tol

    :param c: the self-similar component
    :param y: the center of the triangle
    :param a: the half-width of the triangle
    :param tol: the absolute tolerance
    """
    if tol <= 0:
        raise ArgumentError("tol must be positive")
    if a < 0:
        raise ArgumentError("negative half-width %g" % a)
    if a == 0:
        return 0.0
    lo_cut, hi_cut = y - a, y + a
    threshold = tol / 3.0
    total = 0.0
    stack = c.pieces()
    while stack:
        scale, offset, mass = stack.pop()
        lo, hi = c.piece_interval(scale, offset)
        if hi <= lo_cut or lo >= hi_cut:
            continue
        if lo >= lo_cut and hi <= hi_cut and (hi <= y or lo >= y):
            center = scale * c.mean + offset
            total += mass * (a - abs(center - y))
            continue
        if mass * (hi - lo) < threshold:
            total += mass * max(a - abs(0.5 * (lo + hi) - y), 0.0)
            continue
        stack.extend(c.children(scale, offset, mass))
    return total


class PieceTable:
    """ A self-similar component flattened into pieces sorted by barycenter.

    Pieces are subdivided until mass times length is at most threshold.
    Replacing every piece by a point mass at its barycenter changes
    int (a - |u - y|)^+ c(du) by at most 3 * threshold: the integrand
    is linear on every piece that does not contain y - a, y or y + a.

    :param c: the self-similar component
    :param threshold: the largest mass times length of a piece
    """

    def __init__(self, c: SelfSimilarMeasure, threshold: float):
        if threshold <= 0:
            raise ArgumentError("threshold must be positive")
        u, v = c.support
        maps = np.array(c.maps)
        scales, offsets = np.ones(1), np.zeros(1)
        masses = np.array([c.total_mass])
        kept = []
        count = 0
        while scales.size:
            fine = masses * scales * (v - u) <= threshold
            kept.append((scales[fine], offsets[fine], masses[fine]))
            count += int(fine.sum())
            scales, offsets, masses = (scales[~fine], offsets[~fine],
                                       masses[~fine])
            if count + scales.size * len(maps) > MAX_PIECES:
                raise ArgumentError("threshold %g needs more than %d pieces"
                                    % (threshold, MAX_PIECES))
            scales, offsets, masses = (
                np.concatenate([scales * s for s in maps[:, 0]]),
                np.concatenate([scales * b + offsets for b in maps[:, 1]]),
                np.concatenate([masses * p for p in maps[:, 2]]))
        scales = np.concatenate([k[0] for k in kept])
        offsets = np.concatenate([k[1] for k in kept])
        masses = np.concatenate([k[2] for k in kept])
        centers = scales * c.mean + offsets
        order = np.argsort(centers, kind='stable')
        self.centers = centers[order]
        masses = masses[order]
        self.mass_sums = np.concatenate([[0.0], np.cumsum(masses)])
        self.moment_sums = np.concatenate([[0.0],
                                           np.cumsum(masses * self.centers)])
        logger.debug("piece table with %d pieces at threshold %g"
                     % (self.centers.size, threshold))

    def __len__(self):
        return self.centers.size

    def _cuts(self, ys: np.ndarray, a: np.ndarray):
        lo = np.searchsorted(self.centers, ys - a, side='right')
        mid = np.searchsorted(self.centers, ys, side='right')
        hi = np.maximum(np.searchsorted(self.centers, ys + a, side='left'),
                        mid)
        return lo, mid, hi

    def integral(self, ys: np.ndarray, a: np.ndarray) -> np.ndarray:
        """ Sum of mass * (a - |center - y|)^+ over the pieces.
        """
        lo, mid, hi = self._cuts(ys, a)
        M, C = self.mass_sums, self.moment_sums
        left = (a - ys) * (M[mid] - M[lo]) + (C[mid] - C[lo])
        right = (a + ys) * (M[hi] - M[mid]) - (C[hi] - C[mid])
        return left + right

    def mass_within(self, ys: np.ndarray, a: np.ndarray) -> np.ndarray:
        """ Mass of the pieces with barycenter in (y - a, y + a).
        """
        lo, _, hi = self._cuts(ys, a)
        return self.mass_sums[hi] - self.mass_sums[lo]


@functools.lru_cache(maxsize=16)
def piece_table(c: SelfSimilarMeasure, threshold: float) -> PieceTable:
    return PieceTable(c, threshold)


def _self_similar_mass(c: SelfSimilarMeasure, a: float, b: float,
                       tol: float) -> float:
    total = 0.0
    stack = c.pieces()
    while stack:
        scale, offset, mass = stack.pop()
        lo, hi = c.piece_interval(scale, offset)
        if hi < a or lo > b:
            continue
        if lo >= a and hi <= b:
            total += mass
            continue
        if mass < tol:
            overlap = min(hi, b) - max(lo, a)
            total += mass * max(overlap, 0.0) / (hi - lo)
            continue
        stack.extend(c.children(scale, offset, mass))
    return total


def triangle_integral(m: SpeedMeasure, y: float, a: float,
                      tol: float = QUAD_TOL) -> float:
    """ Compute G(y, a) = 1/2 * int_{(y-a, y+a)} (a - |u - y|) m(du).

    G(y, a) is the expected exit time of the diffusion started in y from
    (y - a, y + a).

    :return: the nonnegative value G(y, a)

    :param m: the speed measure
    :param y: a point of the interior of the state space
    :param a: the half-width, such that y +/- a stays in the closure
    :param tol: absolute quadrature tolerance
    """
    space = m.space
    if not space.in_interior(y):
        raise DomainError("y=%g is not in the interior %s" % (y, space))
    if a < 0:
        raise DomainError("negative half-width %g" % a)
    slack = 1e-12 * max(1.0, abs(y))
    if not (space.in_closure(y - a, slack) and space.in_closure(y + a, slack)):
        raise DomainError("(%g, %g) leaves the closure of %s"
                          % (y - a, y + a, space))
    if a == 0:
        return 0.0

    density = m.density
    if density.constant is not None:
        value = 0.5 * density.constant * a * a
    else:
        weight = lambda u: a - abs(u - y)
        value = 0.5 * (_density_integral(density, y - a, y, weight, tol) +
                       _density_integral(density, y, y + a, weight, tol))

    for x, w in m.atoms:
        d = abs(x - y)
        if d < a:
            value += 0.5 * w * (a - d)

    for part in m.singular_parts:
        value += 0.5 * singular_component_integral(part, y, a, tol)
    return value


@functools.lru_cache(maxsize=4)
def _gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(order)


def _density_integral_many(density: Density, ys: np.ndarray, a: np.ndarray,
                           triangle: bool, tol: float) -> np.ndarray:
    """ Integrate density, times (a - |u - y|) if triangle, on each (y-a, y+a).

    Gauss-Legendre rules of two orders run on the pieces between y and
    the declared kinks. Points where they disagree by more than tol are
    integrated again with adaptive quadrature.
    """
    cuts = [ys - a, ys, ys + a]
    cuts += [np.clip(k, ys - a, ys + a) for k in density.breakpoints]
    cuts = np.sort(np.stack(cuts, axis=1), axis=1)
    estimates = []
    for order in GAUSS_ORDERS:
        nodes, weights = _gauss_legendre(order)
        value = np.zeros(ys.shape)
        for j in range(cuts.shape[1] - 1):
            half = 0.5 * (cuts[:, j + 1] - cuts[:, j])
            center = 0.5 * (cuts[:, j + 1] + cuts[:, j])
            u = center[:, None] + half[:, None] * nodes[None, :]
            f = density.many(u)
            if triangle:
                f = f * (a[:, None] - np.abs(u - ys[:, None]))
            value += half * (f @ weights)
        estimates.append(value)
    coarse, fine = estimates
    for i in np.flatnonzero(~(np.abs(fine - coarse) <= tol)):
        y, w = float(ys[i]), float(a[i])
        if triangle:
            weight = lambda u: w - abs(u - y)
        else:
            weight = lambda u: 1.0
        fine[i] = (_density_integral(density, y - w, y, weight, tol) +
                   _density_integral(density, y, y + w, weight, tol))
    return fine


def triangle_integral_many(m: SpeedMeasure, ys: np.ndarray, a: np.ndarray,
                           tol: float = QUAD_TOL) -> np.ndarray:
    """ Vectorized :func:`triangle_integral` for points of the interior.

    The caller guarantees y +/- a stays in the closure. Self-similar
    parts go through their cached :class:`PieceTable`.

    :return: G(y, a) for every pair, within absolute error tol

    :param m: the speed measure
    :param ys: points of the interior
    :param a: nonnegative half-widths, same shape as ys
    :param tol: absolute tolerance
    """
    ys = np.asarray(ys, dtype=float)
    a = np.asarray(a, dtype=float)
    density = m.density
    if density.constant is not None:
        value = density.constant * a * a
    else:
        value = _density_integral_many(density, ys, a, True, tol)
    for x, w in m.atoms:
        value += w * np.maximum(a - np.abs(x - ys), 0.0)
    for part in m.singular_parts:
        value += piece_table(part, tol / 3.0).integral(ys, a)
    return 0.5 * value


def triangle_slope_many(m: SpeedMeasure, ys: np.ndarray, a: np.ndarray,
                        tol: float = QUAD_TOL) -> np.ndarray:
    """ dG/da = 1/2 m((y - a, y + a)).
    """
    ys = np.asarray(ys, dtype=float)
    a = np.asarray(a, dtype=float)
    density = m.density
    if density.constant is not None:
        value = 2.0 * density.constant * a
    else:
        value = _density_integral_many(density, ys, a, False, tol)
    for x, w in m.atoms:
        value += np.where(np.abs(x - ys) < a, w, 0.0)
    for part in m.singular_parts:
        value += piece_table(part, tol / 3.0).mass_within(ys, a)
    return 0.5 * value


def measure_of_interval(m: SpeedMeasure, a: float, b: float,
                        tol: float = QUAD_TOL) -> float:
    """ Compute m([a, b]) for a compact interval inside the interior.

    :return: the mass of [a, b]

    :param m: the speed measure
    :param a: left end
    :param b: right end
    """
    if a > b:
        raise ArgumentError("a=%g > b=%g" % (a, b))
    if math.isinf(a) or math.isinf(b):
        raise DomainError("infinite intervals are not measured")
    if not (m.space.in_interior(a) and m.space.in_interior(b)):
        raise DomainError("[%g, %g] is not inside the interior %s"
                          % (a, b, m.space))
    density = m.density
    if density.constant is not None:
        total = density.constant * (b - a)
    else:
        total = _density_integral(density, a, b, lambda u: 1.0, tol)
    total += sum(w for x, w in m.atoms if a <= x <= b)
    for part in m.singular_parts:
        total += _self_similar_mass(part, a, b, tol)
    return total


def _validation_grid(space: StateSpace, n: int = 33) -> List[float]:
    """ Compact test intervals for the 0 < m([a, b]) < inf invariant.
    """
    l, r = space.left, space.right
    lo = l if not math.isinf(l) else (min(r, 0.0) - 10.0)
    hi = r if not math.isinf(r) else (max(l, 0.0) + 10.0)
    grid = lo + (hi - lo) * (np.arange(n) + 0.5) / n
    return [float(x) for x in grid]


def default_audit_grid(space: StateSpace,
                       n: int = AUDIT_GRID_SIZE) -> List[float]:
    """ Grid strictly inside the interior, geometric toward infinite ends.

    :return: a sorted list of n points

    :param space: the state space
    :param n: the number of points
    """
    if n < 2:
        raise ArgumentError("audit grid needs at least two points")
    l, r = space.left, space.right
    if not math.isinf(l) and not math.isinf(r):
        grid = l + (r - l) * (np.arange(n) + 0.5) / n
    elif math.isinf(l) and math.isinf(r):
        half = n // 2
        tail = np.geomspace(1e-3, 1e6, half)
        grid = np.concatenate([-tail[::-1], tail] +
                              ([np.zeros(1)] if n % 2 else []))
    elif math.isinf(r):
        grid = l + np.geomspace(1e-6, 1e6, n)
    else:
        grid = r - np.geomspace(1e-6, 1e6, n)[::-1]
    grid = np.unique(grid)
    return [float(x) for x in grid if space.in_interior(float(x))]


def check_condition_C(m: SpeedMeasure, space: StateSpace, k1: float, k2: int,
                      audit_grid: Sequence[float]) -> ConditionCReport:
    """ Audit m(dx) >= 2 / (k1 (1 + k2 x^2)) dx on a grid.

    Atoms and singular parts only add mass, so checking the density is
    enough for a pass. The audit rejects soundly but accepts only
    heuristically: nothing is known between grid points.

    :return: the audit report

    :param m: the speed measure
    :param space: the state space of m
    :param k1: positive constant
    :param k2: 0 or 1
    :param audit_grid: points of the interior
    """
    if len(audit_grid) == 0:
        raise ArgumentError("empty audit grid")
    if k1 <= 0 or k2 not in (0, 1):
        raise ArgumentError("need k1 > 0 and k2 in {0, 1}")
    violation = None
    for x in audit_grid:
        if not space.in_interior(x):
            raise DomainError("audit point %g outside %s" % (x, space))
        bound = 2.0 / (k1 * (1.0 + k2 * x * x))
        if m.density(x) < bound * (1.0 - 1e-12):
            violation = float(x)
            break
    report = ConditionCReport(k1=k1, k2=k2, passes=violation is None,
                              first_violation=violation,
                              n_points=len(audit_grid))
    if not report.passes:
        logger.warning("Condition (C) fails with k1=%g, k2=%d at x=%g"
                       % (k1, k2, violation))
    return report


def is_brownian(m: SpeedMeasure) -> Optional[float]:
    """ Return sigma if m = 2/sigma^2 dx on the real line, None otherwise.
    """
    space = m.space
    if not (math.isinf(space.left) and math.isinf(space.right)):
        return None
    if m.atoms or m.singular_parts or m.density.constant is None:
        return None
    return math.sqrt(2.0 / m.density.constant)
