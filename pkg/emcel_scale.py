#!/usr/bin/env python3

import logging
logger = logging.getLogger(__name__)
import functools
import math
import threading
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from emcel_const import (ArgumentError, DomainError,
                         BoundaryInconsistencyError, TOL_CAP, TOL_FACTOR,
                         SCALE_CACHE_SIZE)
from emcel_measure import (SpeedMeasure, StateSpace, triangle_integral,
                           triangle_integral_many, triangle_slope_many,
                           is_brownian)

# relative bracket width at which bisection stops
WIDTH_TOL = 1e-15
MAX_ITERATIONS = 200


def default_tolerance(h: float) -> float:
    """ h -> min(1e-10, 0.1 h^{3/2}).

    Solving the EMCEL equation to this precision gives Condition (A)
    with lambda = 1/2 and K <= 0.1.
    """
    return min(TOL_CAP, TOL_FACTOR * h ** 1.5)


def _check_h(h: float, h_max: float):
    if not 0 < h < h_max:
        raise ArgumentError("time step h=%g outside (0, %g)" % (h, h_max))


def _smallest_reaching(phi: Callable[[float], float], target: float,
                       a_cap: float, scale: float) -> Optional[float]:
    """ inf{a in (0, a_cap] : phi(a) >= target} for nondecreasing phi.

    :return: the infimum, or None when phi(a_cap) < target

    :param phi: the nondecreasing map
    :param target: the level to reach
    :param a_cap: the largest admissible a (may be inf)
    :param scale: magnitude used for the stopping width
    """
    hi = math.sqrt(target)
    if hi >= a_cap:
        hi = a_cap
    while phi(hi) < target:
        if hi >= a_cap:
            return None
        hi = min(2.0 * hi, a_cap)
        logger.debug("threshold bracket grown to %g" % hi)
    lo = 0.0
    width = WIDTH_TOL * max(1.0, abs(scale))
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if phi(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def boundary_threshold_left(m: SpeedMeasure, space: StateSpace, h: float,
                            h_max: float = 1.0) -> float:
    """ Compute l_h.

    l_h = l + inf{a in (0, (r-l)/2] : 1/2 int_{(l, l+2a)} (a - |u-(l+a)|) m(du) >= h}
    with inf of the empty set equal to (r-l)/2.

    :return: l_h (equal to l when l is inaccessible)

    :param m: the speed measure
    :param space: the state space
    :param h: the time step
    :param h_max: upper bound of admissible time steps
    """
    _check_h(h, h_max)
    l, r = space.left, space.right
    if math.isinf(l) or not space.left_accessible:
        return l
    half = (r - l) / 2.0
    phi = lambda a: triangle_integral(m, l + a, a)
    a = _smallest_reaching(phi, h, half, l)
    if a is None:
        a = half
    return l + a


def boundary_threshold_right(m: SpeedMeasure, space: StateSpace, h: float,
                             h_max: float = 1.0) -> float:
    """ Compute r_h, the mirror image of :func:`boundary_threshold_left`.
    """
    _check_h(h, h_max)
    l, r = space.left, space.right
    if math.isinf(r) or not space.right_accessible:
        return r
    half = (r - l) / 2.0
    phi = lambda a: triangle_integral(m, r - a, a)
    a = _smallest_reaching(phi, h, half, r)
    if a is None:
        a = half
    return r - a


class BoundaryThresholds:
    """ The thresholds l_h <= r_h outside of which scale factors are clipped.
    """

    def __init__(self, h: float, left: float, right: float):
        self.h = h
        self.left = left
        self.right = right

    def __str__(self):
        return "h=%g: l_h=%g, r_h=%g" % (self.h, self.left, self.right)


def _atom_roots(c: float, atoms, ys: np.ndarray, h: float) -> np.ndarray:
    """ Exact roots of 1/2 (c a^2 + sum_j w_j (a - |x_j - y|)^+) = h.

    With the atoms sorted by distance d_(1) <= ... <= d_(J) from y the
    left side is c a^2 / 2 + (W_k a - S_k) / 2 on [d_(k), d_(k+1)],
    where W_k and S_k are the sums of w and w d over the k nearest
    atoms. The root is taken from the first piece whose quadratic root
    lies below its right end.

    :return: the roots, inf where G stays below h
    """
    n = ys.size
    if not atoms:
        if c > 0:
            return np.full(n, math.sqrt(2.0 * h / c))
        return np.full(n, math.inf)
    xs = np.array([x for x, _ in atoms])
    ws = np.array([w for _, w in atoms])
    d = np.abs(ys[:, None] - xs[None, :])
    order = np.argsort(d, axis=1, kind='stable')
    d = np.take_along_axis(d, order, axis=1)
    w = ws[order]
    zeros = np.zeros((n, 1))
    W = np.concatenate([zeros, np.cumsum(w, axis=1)], axis=1)
    S = np.concatenate([zeros, np.cumsum(w * d, axis=1)], axis=1)
    upper = np.concatenate([d, np.full((n, 1), math.inf)], axis=1)
    target = S + 2.0 * h
    with np.errstate(divide='ignore'):
        roots = 2.0 * target / (W + np.sqrt(W * W + 4.0 * c * target))
    first = np.argmax(roots <= upper, axis=1)
    return roots[np.arange(n), first]


def _solve_bracketed(m: SpeedMeasure, ys: np.ndarray, h: float,
                     hi: np.ndarray, g: np.ndarray, tol: float) -> np.ndarray:
    """ Safeguarded Newton iteration on [0, hi] where G(y, hi) >= h.

    G is convex in a, so Newton steps from the right stay above the
    root; a step leaving the bracket, or a missing slope, falls back to
    the midpoint.
    """
    result = hi.copy()
    todo = np.flatnonzero(np.abs(g - h) > tol)
    y, a, g = ys[todo], hi[todo], g[todo]
    lo, up = np.zeros(todo.size), a.copy()
    width = WIDTH_TOL * np.maximum(1.0, np.abs(y))
    slope = triangle_slope_many(m, y, a, tol)
    for _ in range(MAX_ITERATIONS):
        if todo.size == 0:
            break
        above = g > h
        up = np.where(above, a, up)
        lo = np.where(above, lo, a)
        mid = 0.5 * (lo + up)
        with np.errstate(divide='ignore', invalid='ignore'):
            step = a - (g - h) / slope
        a = np.where((step > lo) & (step < up), step, mid)
        narrow = up - lo <= width
        result[todo[narrow]] = mid[narrow]
        keep = ~narrow
        todo, y, a, lo, up, width = (todo[keep], y[keep], a[keep], lo[keep],
                                     up[keep], width[keep])
        g = triangle_integral_many(m, y, a, tol)
        slope = triangle_slope_many(m, y, a, tol)
        done = np.abs(g - h) <= tol
        result[todo[done]] = a[done]
        keep = ~done
        todo, y, a, g, slope, lo, up, width = (
            todo[keep], y[keep], a[keep], g[keep], slope[keep], lo[keep],
            up[keep], width[keep])
    if todo.size:
        logger.debug("%d roots stopped after %d iterations"
                     % (todo.size, MAX_ITERATIONS))
        result[todo] = 0.5 * (lo + up)
    return result


def _emcel_roots(m: SpeedMeasure, space: StateSpace, h: float, ys: np.ndarray,
                 tol: float) -> np.ndarray:
    """ Roots of G(y, a) = h for points of (l_h, r_h), within tol.
    """
    a_max = np.minimum(ys - space.left, space.right - ys)
    # the solve and the piece tables share the tolerance
    half = 0.5 * tol
    if m.density.constant is not None:
        # singular parts only add mass, so this root is an upper bound
        hi = _atom_roots(m.density.constant, m.atoms, ys, h)
        if not m.singular_parts and np.all(hi <= a_max):
            return hi
        hi = np.minimum(hi, a_max)
        g = triangle_integral_many(m, ys, hi, half)
        short = g < h - half
    else:
        hi = np.minimum(math.sqrt(h), a_max)
        g = triangle_integral_many(m, ys, hi, half)
        short = g < h - half
        grow = short & (hi < a_max)
        while grow.any():
            hi[grow] = np.minimum(2.0 * hi[grow], a_max[grow])
            g[grow] = triangle_integral_many(m, ys[grow], hi[grow], half)
            short = g < h - half
            grow = short & (hi < a_max)
    if short.any():
        i = int(np.flatnonzero(short)[0])
        raise BoundaryInconsistencyError(
            "G(%g, %g) = %g < h = %g at the edge of %s"
            % (ys[i], hi[i], g[i], h, space))
    if not m.singular_parts and m.density.constant is not None:
        return hi
    return _solve_bracketed(m, ys, h, hi, g, half)


def emcel_scale_factors(m: SpeedMeasure, space: StateSpace, h: float,
                        ys: np.ndarray, tol: float, h_max: float = 1.0,
                        thresholds: BoundaryThresholds = None) -> np.ndarray:
    """ The EMCEL scale factors at an array of points of the interior.

    Inside (l_h, r_h) the factor is the positive root of G(y, a) = h. For
    a constant density with atoms it has a closed form; otherwise it is
    found by a safeguarded Newton iteration. On (l, l_h] it is y - l and
    on [r_h, r) it is r - y; the left rule is checked first.

    :return: the scale factors, same shape as ys

    :param m: the speed measure
    :param space: the state space
    :param h: the time step
    :param ys: points of the interior
    :param tol: tolerance on |G(y, a) - h|
    :param h_max: upper bound of admissible time steps
    :param thresholds: precomputed thresholds for this h, if any
    """
    if tol <= 0:
        raise ArgumentError("tol must be positive")
    _check_h(h, h_max)
    ys = np.asarray(ys, dtype=float)
    flat = ys.ravel()
    outside = ~((flat > space.left) & (flat < space.right))
    if outside.any():
        raise DomainError("y=%g is not in the interior %s"
                          % (flat[np.flatnonzero(outside)[0]], space))
    if thresholds is None:
        thresholds = BoundaryThresholds(
            h,
            boundary_threshold_left(m, space, h, h_max),
            boundary_threshold_right(m, space, h, h_max))
    left = flat <= thresholds.left
    right = ~left & (flat >= thresholds.right)
    inner = ~(left | right)
    out = np.empty(flat.shape)
    out[left] = flat[left] - space.left
    out[right] = space.right - flat[right]
    if inner.any():
        out[inner] = _emcel_roots(m, space, h, flat[inner], tol)
    return out.reshape(ys.shape)


def emcel_scale_factor(m: SpeedMeasure, space: StateSpace, h: float, y: float,
                       tol: float, h_max: float = 1.0,
                       thresholds: BoundaryThresholds = None) -> float:
    """ The EMCEL scale factor at y, see :func:`emcel_scale_factors`.

    :return: the scale factor a_h(y)
    """
    return float(emcel_scale_factors(m, space, h, np.array([float(y)]), tol,
                                     h_max, thresholds)[0])


class ScaleFactorScheme:
    """ A family h -> a_h of scale factors on a state space.

    Evaluation is pure. Scalar queries are memoized in a bounded LRU
    cache; vectorized queries solve each distinct point of the batch
    once and keep nothing.

    :param measure: the speed measure of the target diffusion
    :param space: the state space
    :param h_max: the time steps are restricted to (0, h_max)
    :param evaluate: the raw scale factor (h, y) -> a_h(y) on the interior
    :param tolerance_policy: h -> tolerance used to build the scheme
    :param metadata: optional dict with 'lambda', 'K', 'gamma'
    :param name: a label for logs
    :param homogeneous: True when a_h does not depend on y (Brownian
                        measures); vectorized evaluation then solves once
    :param evaluate_many: optional raw vector form (h, ys) -> a_h(ys) on \
                          the interior; scalar queries then go through it too
    """

    def __init__(self, measure: SpeedMeasure, space: StateSpace, h_max: float,
                 evaluate: Callable[[float, float], float],
                 tolerance_policy: Callable[[float], float] = default_tolerance,
                 metadata: Optional[Dict[str, float]] = None,
                 name: str = "custom", homogeneous: bool = False,
                 evaluate_many: Optional[Callable[[float, np.ndarray],
                                                  np.ndarray]] = None):
        if not 0 < h_max < 1:
            raise ArgumentError("h_max=%g must be in (0, 1)" % h_max)
        self.measure = measure
        self.space = space
        self.h_max = h_max
        self.raw_evaluate = evaluate
        self.raw_evaluate_many = evaluate_many
        self.tolerance_policy = tolerance_policy
        self.metadata = dict(metadata or {})
        self.name = name
        self.homogeneous = homogeneous
        self._lock = threading.Lock()
        self._thresholds = {}
        self._cached = functools.lru_cache(maxsize=SCALE_CACHE_SIZE)(
            self._solve_one)

    def __str__(self):
        return "%s scheme on %s (h_max=%g)" % (self.name, self.space, self.h_max)

    def thresholds(self, h: float) -> BoundaryThresholds:
        _check_h(h, self.h_max)
        with self._lock:
            found = self._thresholds.get(h)
        if found is not None:
            return found
        found = BoundaryThresholds(
            h,
            boundary_threshold_left(self.measure, self.space, h, self.h_max),
            boundary_threshold_right(self.measure, self.space, h, self.h_max))
        logger.debug("%s thresholds %s" % (self.name, found))
        with self._lock:
            self._thresholds[h] = found
        return found

    def _check_steps(self, ys: np.ndarray, values: np.ndarray):
        slack = 1e-12 * np.maximum(1.0, np.abs(ys))
        bad = ~((values >= 0) &
                (ys - values >= self.space.left - slack) &
                (ys + values <= self.space.right + slack))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DomainError("scale factor %g at y=%g leaves %s"
                              % (values[i], ys[i], self.space))

    def _solve_one(self, h: float, y: float) -> float:
        if self.raw_evaluate_many is not None:
            value = float(self.raw_evaluate_many(h, np.array([y]))[0])
        else:
            value = float(self.raw_evaluate(h, y))
        self._check_steps(np.array([y]), np.array([value]))
        return value

    def evaluate(self, h: float, y: float) -> float:
        """ a_h(y) on the closure of the state space.

        :return: the scale factor, 0 at accessible finite endpoints

        :param h: the time step in (0, h_max)
        :param y: a point of I
        """
        _check_h(h, self.h_max)
        y = float(y)
        if not self.space.in_interior(y):
            if self.space.in_space(y):
                return 0.0
            raise DomainError("y=%g outside %s" % (y, self.space))
        return self._cached(h, y)

    def evaluate_many(self, h: float, ys: np.ndarray) -> np.ndarray:
        """ Vectorized :func:`evaluate`.

        Without a raw vector form each distinct point is solved once.
        """
        _check_h(h, self.h_max)
        ys = np.asarray(ys, dtype=float)
        if self.homogeneous:
            return np.full(ys.shape, self.evaluate(h, 0.0))
        if self.raw_evaluate_many is None:
            values, inverse = np.unique(ys, return_inverse=True)
        else:
            values, inverse = ys.ravel(), None
        inside = (values > self.space.left) & (values < self.space.right)
        if not inside.all():
            ends = ((values == self.space.left) & self.space.left_accessible |
                    (values == self.space.right) & self.space.right_accessible)
            if not np.all(inside | ends):
                bad = values[~(inside | ends)][0]
                raise DomainError("y=%g outside %s" % (bad, self.space))
        out = np.zeros(values.shape)
        points = values[inside]
        if self.raw_evaluate_many is not None:
            steps = np.asarray(self.raw_evaluate_many(h, points), dtype=float)
        else:
            steps = np.array([float(self.raw_evaluate(h, y)) for y in points])
        self._check_steps(points, steps)
        out[inside] = steps
        if inverse is not None:
            out = out[inverse]
        return out.reshape(ys.shape)

    def in_I_h(self, h: float, y: float) -> bool:
        """ Membership in I_h = (l_h, r_h) U {y : y +/- a_h(y) in the interior}.
        """
        th = self.thresholds(h)
        if th.left < y < th.right:
            return True
        a = self.evaluate(h, y)
        return (self.space.in_interior(y - a) and
                self.space.in_interior(y + a))

    def cache_size(self) -> int:
        return self._cached.cache_info().currsize


def build_scheme(m: SpeedMeasure, space: StateSpace, h_max: float,
                 tol_policy: Callable[[float], float] = default_tolerance
                 ) -> ScaleFactorScheme:
    """ Build the EMCEL scheme of m.

    Every query is a root solve on the exact measure; no grid
    interpolation is used.

    :return: the scheme

    :param m: the speed measure
    :param space: the state space
    :param h_max: upper bound of the time steps, in (0, 1)
    :param tol_policy: h -> tolerance of the root solve
    """
    if not 0 < h_max < 1:
        raise ArgumentError("h_max=%g must be in (0, 1)" % h_max)
    scheme = None

    def evaluate_many(h, ys):
        return emcel_scale_factors(m, space, h, ys, tol_policy(h), h_max,
                                   thresholds=scheme.thresholds(h))

    def evaluate(h, y):
        return float(evaluate_many(h, np.array([float(y)]))[0])

    scheme = ScaleFactorScheme(m, space, h_max, evaluate,
                               tolerance_policy=tol_policy,
                               metadata={'gamma': 0.0}, name="EMCEL",
                               homogeneous=is_brownian(m) is not None,
                               evaluate_many=evaluate_many)
    return scheme


def build_euler_scheme(eta: Callable[[float], float], m: SpeedMeasure,
                       space: StateSpace, h_max: float) -> ScaleFactorScheme:
    """ Scale factors |eta(y)| sqrt(h) of the Euler scheme for dY = eta(Y) dW.

    The step is clipped at accessible finite endpoints so the chain
    never leaves the closure of the state space.

    :return: the scheme

    :param eta: the diffusion coefficient
    :param m: the speed measure 2/eta^2 dx of the same diffusion
    :param space: the state space
    :param h_max: upper bound of the time steps, in (0, 1)
    """
    def evaluate(h, y):
        a = abs(eta(y)) * math.sqrt(h)
        return min(a, y - space.left, space.right - y)

    return ScaleFactorScheme(m, space, h_max, evaluate,
                             tolerance_policy=lambda h: math.inf,
                             name="Euler")


class ConditionARow(BaseModel):
    h: float = Field(..., gt=0)
    residual: float = Field(..., ge=0)
    n_points: int = Field(..., ge=1)


class ConditionAReport(BaseModel):
    """ Grid estimate of the constants of Condition (A lambda).

    K_hat is a lower estimate of the continuum supremum.
    """
    lam: float = Field(..., gt=0)
    K_hat: float = Field(..., ge=0)
    gamma_hat: float = Field(..., ge=0)
    passes: bool
    rows: List[ConditionARow]


def verify_condition_A(scheme: ScaleFactorScheme, lam: float,
                       h_list: Sequence[float],
                       grid: Sequence[float]) -> ConditionAReport:
    """ Estimate K and gamma of Condition (A lambda) on a grid.

    For each h, R(h) is the largest |G(y, a_h(y)) - h| over the grid
    points of I_h; K_hat = max R(h)/h^{1+lambda} and gamma_hat = max R(h)/h.

    :return: the report, flagged as failing when gamma_hat >= 1

    :param scheme: the scale-factor family
    :param lam: the exponent lambda
    :param h_list: the time steps
    :param grid: candidate points of the interior
    """
    if lam <= 0:
        raise ArgumentError("lambda must be positive")
    if not h_list:
        raise ArgumentError("empty h_list")
    rows = []
    for h in h_list:
        residual = 0.0
        count = 0
        for y in grid:
            if not scheme.space.in_interior(y) or not scheme.in_I_h(h, y):
                continue
            a = scheme.evaluate(h, y)
            residual = max(residual,
                           abs(triangle_integral(scheme.measure, y, a) - h))
            count += 1
        if count == 0:
            raise ArgumentError("no grid point inside I_h for h=%g" % h)
        logger.debug("h=%g: R(h)=%g on %d points" % (h, residual, count))
        rows.append(ConditionARow(h=h, residual=residual, n_points=count))
    K_hat = max(row.residual / row.h ** (1.0 + lam) for row in rows)
    gamma_hat = max(row.residual / row.h for row in rows)
    report = ConditionAReport(lam=lam, K_hat=K_hat, gamma_hat=gamma_hat,
                              passes=gamma_hat < 1.0, rows=rows)
    if not report.passes:
        logger.warning("%s fails the gamma condition: gamma_hat=%g"
                       % (scheme.name, gamma_hat))
    return report
