#!/usr/bin/env python3

import logging
logger = logging.getLogger(__name__)
import csv
import math
from typing import Callable, List, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import stats as scipy_stats

from emcel_const import (ArgumentError, UnsupportedModelError,
                         InternalConsistencyError, BOOTSTRAP_RESAMPLES)
from emcel_measure import is_brownian
from emcel_chain import (BitStream, ChainPath, simulate_terminal_batch,
                         step_count)
from emcel_runner import StudyManager
from emcel_scale import ScaleFactorScheme


class RateRow(BaseModel):
    h: float = Field(..., gt=0)
    estimate: float = Field(..., ge=0)
    std_error: float = Field(..., ge=0)
    n: int = Field(..., ge=1)


class RateTable(BaseModel):
    """ Estimated distances per time step, h strictly decreasing.
    """
    rows: List[RateRow]

    @field_validator('rows')
    @classmethod
    def check_decreasing(cls, value: List[RateRow]) -> List[RateRow]:
        for a, b in zip(value, value[1:]):
            if not b.h < a.h:
                raise ValueError("h must be strictly decreasing across rows")
        return value


class RateFit(BaseModel):
    """ Least squares fit of log estimate = intercept + slope log h.
    """
    slope: float
    intercept: float
    r_squared: float = Field(..., ge=0, le=1)


class FunctionalEstimate(BaseModel):
    mean: float
    std_error: float = Field(..., ge=0)
    n: int


class PathDistanceReport(BaseModel):
    """ Result of the grid-crossing path coupling. The estimate is biased.
    """
    estimate: float = Field(..., ge=0)
    h: float
    p: float
    n: int
    fine_factor: int
    biased: bool = True


def empirical_wasserstein_p(xs: Sequence[float], ys: Sequence[float],
                            p: float = 2.0) -> float:
    """ Wasserstein-p distance of two empirical laws of equal size.

    The monotone coupling is optimal on the line.

    :return: ((1/n) sum |x_(i) - y_(i)|^p)^(1/p)

    :param xs: first sample
    :param ys: second sample
    :param p: order, p >= 1
    """
    if p < 1:
        raise ArgumentError("p=%g < 1" % p)
    xs = np.sort(np.asarray(xs, dtype=float))
    ys = np.sort(np.asarray(ys, dtype=float))
    if xs.size == 0 or ys.size == 0:
        raise ArgumentError("empty sample")
    if xs.size != ys.size:
        raise ArgumentError("samples of sizes %d and %d; equal sizes required"
                            % (xs.size, ys.size))
    return float(np.mean(np.abs(xs - ys) ** p) ** (1.0 / p))


def bootstrap_std_error(values: Sequence[float], statistic: Callable,
                        master_seed: int, slot: int = 0,
                        resamples: int = BOOTSTRAP_RESAMPLES) -> float:
    """ Bootstrap standard error of statistic(values).

    Resampling indices come from the bootstrap stream, so the result is
    a pure function of the inputs.

    :param values: the sample
    :param statistic: a function of a sample
    :param master_seed: the master seed
    :param slot: selects an independent resampling stream
    :param resamples: number of bootstrap resamples
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n == 0:
        raise ArgumentError("empty sample")
    rng = BitStream(master_seed).generator(slot, BitStream.BOOTSTRAP)
    replicates = np.empty(resamples)
    for b in range(resamples):
        replicates[b] = statistic(values[rng.integers(0, n, n)])
    return float(np.std(replicates, ddof=1))


def _paired_bootstrap(xs: np.ndarray, ys: np.ndarray, p: float,
                      master_seed: int, slot: int) -> float:
    rng = BitStream(master_seed).generator(slot, BitStream.BOOTSTRAP)
    n = len(xs)
    replicates = np.empty(BOOTSTRAP_RESAMPLES)
    for b in range(BOOTSTRAP_RESAMPLES):
        replicates[b] = empirical_wasserstein_p(xs[rng.integers(0, n, n)],
                                                ys[rng.integers(0, n, n)], p)
    return float(np.std(replicates, ddof=1))


def exact_reference_sampler(y0: float, T: float, sigma: float = 1.0) -> Callable:
    """ Exact law N(y0, sigma^2 T) of a scaled Brownian motion at T.

    :return: a function (n, master_seed) -> n samples
    """
    def sample(n: int, master_seed: int) -> np.ndarray:
        rng = BitStream(master_seed).generator(0, BitStream.REFERENCE)
        return rng.normal(y0, sigma * math.sqrt(T), n)
    sample.label = "exact N(%g, %g)" % (y0, sigma * sigma * T)
    return sample


class FrozenChainReference:
    """ Self-reference oracle: terminal values of the chain at a fine h_ref.

    Its paths are keyed by a seed derived from the reference stream, so
    they are independent of the chain paths of the same master seed.
    Samples are cached per (n, seed).

    :param scheme: the scale factors
    :param h_ref: the reference time step
    :param y0: the starting point
    :param T: the horizon
    :param workers: number of threads
    """

    def __init__(self, scheme: ScaleFactorScheme, h_ref: float, y0: float,
                 T: float, workers: int = 1):
        self.scheme = scheme
        self.h_ref = h_ref
        self.y0 = y0
        self.T = T
        self.workers = workers
        self.label = "frozen chain reference h_ref=%g" % h_ref
        self._samples = {}

    def __call__(self, n: int, master_seed: int) -> np.ndarray:
        key = (n, master_seed)
        if key not in self._samples:
            rng = BitStream(master_seed).generator(1, BitStream.REFERENCE)
            seed = int(rng.integers(0, 2 ** 63))
            logger.info("simulating %s with %d paths" % (self.label, n))
            self._samples[key] = simulate_terminal_batch(
                self.scheme, self.h_ref, self.y0, self.T, n, seed,
                workers=self.workers)
        return self._samples[key]


def _rate_row(scheme, y0, T, h, reference, p, n, master_seed, slot):
    xs = simulate_terminal_batch(scheme, h, y0, T, n, master_seed)
    estimate = empirical_wasserstein_p(xs, reference, p)
    std_error = _paired_bootstrap(xs, reference, p, master_seed, slot)
    logger.info("h=%g: W_%g = %.6g (+/- %.2g)" % (h, p, estimate, std_error))
    return RateRow(h=h, estimate=estimate, std_error=std_error, n=n)


def marginal_rate_study(scheme: ScaleFactorScheme, y0: float, T: float,
                        h_list: Sequence[float], reference_sampler: Callable,
                        p: float, n: int, master_seed: int,
                        workers: int = 1) -> RateTable:
    """ Empirical W_p between X^h_T and the reference law, for each h.

    :return: the rate table, one row per h

    :param scheme: the scale factors
    :param y0: the starting point
    :param T: the horizon
    :param h_list: strictly decreasing time steps
    :param reference_sampler: a function (n, master_seed) -> n samples of Y_T
    :param p: the Wasserstein order
    :param n: the sample size per h
    :param master_seed: the master seed
    :param workers: number of per-h threads
    """
    if len(h_list) == 0:
        raise ArgumentError("empty h_list")
    if p < 1:
        raise ArgumentError("p=%g < 1" % p)
    if n < 1:
        raise ArgumentError("n must be at least 1")
    reference = np.asarray(reference_sampler(n, master_seed), dtype=float)
    manager = StudyManager(workers)
    for slot, h in enumerate(h_list):
        manager.newStudy("rate-h=%g" % h, _rate_row, scheme, y0, T, h,
                         reference, p, n, master_seed, slot)
    table = RateTable(rows=manager.join())
    logger.debug("rate study stats: %s" % manager.getStats())
    return table


def fit_rate(table: RateTable) -> RateFit:
    """ Ordinary least squares of log estimate against log h.

    :return: slope, intercept and r^2
    """
    if len(table.rows) < 3:
        raise ArgumentError("at least 3 rows are needed, got %d"
                            % len(table.rows))
    if any(row.estimate <= 0 for row in table.rows):
        raise ArgumentError("all estimates must be positive")
    x = np.log([row.h for row in table.rows])
    y = np.log([row.estimate for row in table.rows])
    result = scipy_stats.linregress(x, y)
    r_squared = min(1.0, max(0.0, float(result.rvalue) ** 2))
    return RateFit(slope=float(result.slope),
                   intercept=float(result.intercept), r_squared=r_squared)


def terminal_value(path: ChainPath) -> float:
    return path.interpolate(path.T)


def running_maximum(path: ChainPath) -> float:
    """ sup of the interpolated path on [0, T].
    """
    last = int(math.floor(path.T / path.h + 1e-9))
    return float(max(np.max(path.nodes[:min(last, path.N) + 1]),
                     path.interpolate(path.T)))


def constant(c: float) -> Callable[[ChainPath], float]:
    def F(path: ChainPath) -> float:
        return c
    return F


def functional_expectation(scheme: ScaleFactorScheme, h: float, y0: float,
                           T: float, F: Callable[[ChainPath], float], n: int,
                           master_seed: int,
                           workers: int = 1) -> FunctionalEstimate:
    """ Monte Carlo estimate of E[F(X^h)] with a bootstrap standard error.

    :param F: a function of the interpolated path
    """
    if n < 1:
        raise ArgumentError("n must be at least 1")
    evaluation = 'terminal' if F is terminal_value else F
    values = simulate_terminal_batch(scheme, h, y0, T, n, master_seed,
                                     evaluation=evaluation, workers=workers)
    if np.all(values == values[0]):
        return FunctionalEstimate(mean=float(values[0]), std_error=0.0, n=n)
    std_error = bootstrap_std_error(values, np.mean, master_seed)
    return FunctionalEstimate(mean=float(np.mean(values)),
                              std_error=std_error, n=n)


def path_distance_diagnostic(scheme: ScaleFactorScheme, h: float, y0: float,
                             T: float, n: int, fine_factor: int = 64,
                             master_seed: int = 0,
                             p: float = 2.0) -> PathDistanceReport:
    """ Approximate Lp norm of sup_t |X^h_t - Y_t| for Brownian motion.

    Brownian paths are simulated on the grid T / (fine_factor floor(T/h));
    the embedded chain moves by +/- a_h each time the fine path leaves
    the interval of half-width a_h around the current node. Discrete
    crossing detection overshoots, so the estimate is biased and is only
    a diagnostic.

    :return: the report, flagged as biased
    """
    if n < 1:
        raise ArgumentError("n must be at least 1")
    if fine_factor < 64:
        raise ArgumentError("fine_factor must be at least 64")
    if p < 1:
        raise ArgumentError("p=%g < 1" % p)
    sigma = is_brownian(scheme.measure)
    if sigma is None:
        raise UnsupportedModelError("path diagnostic needs a Brownian model, "
                                    "got %s" % scheme.measure)
    logger.warning("path distance diagnostic is biased by grid-crossing "
                   "detection; do not use it as a convergence oracle")

    N = step_count(T, h)
    M = fine_factor * max(1, int(math.floor(T / h + 1e-9)))
    dt = T / M
    a = scheme.evaluate(h, y0)
    bits = BitStream(master_seed)
    generators = [bits.generator(j, BitStream.REFERENCE) for j in range(n)]

    fine = np.empty((n, M + 1))
    fine[:, 0] = y0
    nodes = np.empty((n, N + 1))
    nodes[:, 0] = y0
    w = np.full(n, float(y0))
    x = np.full(n, float(y0))
    count = np.zeros(n, dtype=int)
    step = 0
    max_steps = 1000 * M
    while np.any(count < N):
        if step >= max_steps:
            raise InternalConsistencyError("crossing detection did not finish "
                                           "in %d fine steps" % max_steps)
        dz = np.array([g.standard_normal(M) for g in generators])
        dz *= sigma * math.sqrt(dt)
        for i in range(M):
            w += dz[:, i]
            step += 1
            if step <= M:
                fine[:, step] = w
            crossed = (count < N) & (np.abs(w - x) >= a)
            if np.any(crossed):
                x[crossed] += a * np.sign(w[crossed] - x[crossed])
                count[crossed] += 1
                nodes[crossed, count[crossed]] = x[crossed]
            if step >= M and not np.any(count < N):
                break

    t = dt * np.arange(M + 1)
    s = t / h
    k = np.minimum(np.floor(s).astype(int), N - 1)
    frac = s - k
    chain = nodes[:, k] + frac * (nodes[:, k + 1] - nodes[:, k])
    sup = np.max(np.abs(chain - fine), axis=1)
    estimate = float(np.mean(sup ** p) ** (1.0 / p))
    return PathDistanceReport(estimate=estimate, h=h, p=p, n=n,
                              fine_factor=fine_factor)


def write_rate_table(table: RateTable, filename: str):
    """ Write the table with header h,estimate,std_error,n.
    """
    with open(filename, 'w', newline='') as out_file:
        f = csv.writer(out_file, delimiter=',', quotechar='"',
                       lineterminator='\n')
        f.writerow(["h", "estimate", "std_error", "n"])
        for row in table.rows:
            f.writerow([repr(row.h), repr(row.estimate), repr(row.std_error),
                        row.n])


def write_rate_fit(fit: RateFit, filename: str, target: float = None):
    with open(filename, 'w') as out_file:
        out_file.write("slope = %r\n" % fit.slope)
        out_file.write("intercept = %r\n" % fit.intercept)
        out_file.write("r_squared = %r\n" % fit.r_squared)
        if target is not None:
            out_file.write("expected_slope = %r\n" % target)
