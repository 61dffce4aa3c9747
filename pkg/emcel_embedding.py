#!/usr/bin/env python3

import logging
logger = logging.getLogger(__name__)
import csv
import math
from typing import Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import special

from emcel_const import (ArgumentError, EXIT_TIME_VARIANCE,
                         EXIT_TIME_SECOND_MOMENT)
from emcel_chain import BitStream, CHUNK_SIZE
from emcel_analysis import bootstrap_std_error
from emcel_runner import StudyManager

# upper end of the inversion bracket; 1 - cdf(50) is below 1e-26
SAMPLE_BRACKET = 50.0
SAMPLE_TOL = 1e-10
MAX_TERMS = 200


class ExitTimeSampler:
    """ Law of the exit time H of standard Brownian motion from (-1, 1).

    The CDF is evaluated with the reflection series
    2 sum (-1)^n erfc((2n+1) / sqrt(2t)) below the crossover and with the
    eigenfunction series
    1 - 4/pi sum (-1)^n / (2n+1) exp(-(2n+1)^2 pi^2 t / 8) above it. Both
    are cut at the first term smaller than the truncation tolerance.

    :param crossover: time where the two series are switched
    :param truncation: magnitude of the first neglected term
    """

    def __init__(self, crossover: float = 0.35, truncation: float = 1e-14):
        if crossover <= 0 or truncation <= 0:
            raise ArgumentError("crossover and truncation must be positive")
        self.crossover = crossover
        self.truncation = truncation

    def small_time_cdf(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        x = 1.0 / np.sqrt(2.0 * t)
        total = np.zeros_like(t)
        for n in range(MAX_TERMS):
            term = special.erfc((2 * n + 1) * x)
            total += (-1) ** n * term
            if np.all(term < self.truncation):
                break
        return 2.0 * total

    def large_time_survival(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for n in range(MAX_TERMS):
            k = 2 * n + 1
            term = np.exp(-k * k * math.pi ** 2 * t / 8.0) / k
            total += (-1) ** n * term
            if np.all(term < self.truncation):
                break
        return 4.0 / math.pi * total

    def cdf(self, t) -> np.ndarray:
        """ P(H <= t), vectorized; 0 for t <= 0.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros_like(t)
        small = (t > 0) & (t < self.crossover)
        large = t >= self.crossover
        if np.any(small):
            out[small] = self.small_time_cdf(t[small])
        if np.any(large):
            out[large] = 1.0 - self.large_time_survival(t[large])
        return np.clip(out, 0.0, 1.0)

    def sample(self, u) -> np.ndarray:
        """ Invert the CDF by bisection on [0, 50] down to 1e-10 in t.

        :param u: uniforms in (0, 1)
        """
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if np.any((u <= 0) | (u >= 1)):
            raise ArgumentError("uniform variates must lie in (0, 1)")
        lo = np.zeros_like(u)
        hi = np.full_like(u, SAMPLE_BRACKET)
        while np.max(hi - lo) > SAMPLE_TOL:
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return hi


_sampler = ExitTimeSampler()


def exit_time_cdf_unit(t: float) -> float:
    """ P(H <= t) for the exit time H of standard BM started at 0 from (-1, 1).
    """
    return float(_sampler.cdf(t)[0])


def sample_exit_time_unit(u: float) -> float:
    """ The exit time with quantile u.

    :return: a positive time

    :param u: a uniform variate in (0, 1)
    """
    if not 0 < u < 1:
        raise ArgumentError("u=%g outside (0, 1)" % u)
    return float(_sampler.sample(u)[0])


def exit_time_moments_unit() -> Tuple[float, float]:
    """ (E[H], E[H^2]) = (1, 5/3).
    """
    return 1.0, EXIT_TIME_SECOND_MOMENT


class EmbeddingRun:
    """ Stopping times tau_k, k = 0..N, of n_paths independent embeddings.

    For Brownian motion with speed measure 2 dx the increments of tau are
    iid and distributed as h H.

    :param h: the time step
    :param N: the number of steps
    :param tau: array (paths, N+1) with tau[:, 0] = 0
    """

    def __init__(self, h: float, N: int, tau: np.ndarray):
        self.h = h
        self.N = N
        self.tau = tau

    @property
    def paths(self) -> int:
        return self.tau.shape[0]

    def __str__(self):
        return "embedding run h=%g N=%d paths=%d" % (self.h, self.N, self.paths)


def _embedding_chunk(h: float, N: int, bits: BitStream, indices) -> np.ndarray:
    u = np.empty((len(indices), N))
    for row, j in enumerate(indices):
        u[row] = bits.generator(j, BitStream.EXIT_TIME).random(N)
    # Philox uniforms are in [0, 1)
    u = np.maximum(u, 2.0 ** -53)
    increments = h * _sampler.sample(u.ravel()).reshape(u.shape)
    tau = np.zeros((len(indices), N + 1))
    tau[:, 1:] = np.cumsum(increments, axis=1)
    return tau


def simulate_embedding_times(h: float, N: int, n_paths: int, master_seed: int,
                             workers: int = 1) -> EmbeddingRun:
    """ Sample the embedding stopping times for Brownian motion.

    :return: the run, tau_k = sum over j <= k of h H_j

    :param h: the time step
    :param N: the number of steps
    :param n_paths: the number of paths
    :param master_seed: the master seed
    :param workers: number of threads
    """
    if h <= 0:
        raise ArgumentError("h must be positive")
    if N < 1 or n_paths < 1:
        raise ArgumentError("need N >= 1 and n_paths >= 1")
    bits = BitStream(master_seed)
    manager = StudyManager(workers)
    for start in range(0, n_paths, CHUNK_SIZE):
        indices = range(start, min(start + CHUNK_SIZE, n_paths))
        manager.newStudy("embedding-%d" % start, _embedding_chunk,
                         h, N, bits, indices)
    return EmbeddingRun(h, N, np.vstack(manager.join()))


class TemporalErrorStats(BaseModel):
    """ Monte Carlo summary of the temporal error of an embedding run.
    """
    h: float
    N: int
    n_paths: int
    p: float
    sup_error_Lp: float = Field(..., ge=0,
                                title="|| sup_k |tau_k - k h| ||_Lp")
    sup_error_std_error: float = Field(..., ge=0)
    var_tauN: float = Field(..., ge=0, title="Sample variance of tau_N")
    var_tauN_std_error: float = Field(..., ge=0)
    var_tauN_exact: float = Field(..., ge=0, title="h^2 N Var(H)")


def variance_identity(h: float, N: int) -> float:
    """ Var(tau_N) = h^2 N Var(H) with Var(H) = 2/3.
    """
    return h * h * N * EXIT_TIME_VARIANCE


def temporal_error_stats(run: EmbeddingRun, p: float = 2.0,
                         master_seed: int = 0) -> TemporalErrorStats:
    """ Estimate the global temporal error and the variance of tau_N.

    :return: the estimates with bootstrap standard errors

    :param run: the embedding run
    :param p: the Lp order, p >= 1
    :param master_seed: seed of the bootstrap resampling stream
    """
    if p < 1:
        raise ArgumentError("p=%g < 1" % p)
    if run.tau.size == 0 or run.paths == 0:
        raise ArgumentError("empty embedding run")
    grid = run.h * np.arange(run.N + 1)
    sup_error = np.max(np.abs(run.tau - grid), axis=1)
    tau_N = run.tau[:, -1]

    lp_norm = lambda x: float(np.mean(x ** p) ** (1.0 / p))
    variance = lambda x: float(np.var(x, ddof=1)) if len(x) > 1 else 0.0
    stats = TemporalErrorStats(
        h=run.h, N=run.N, n_paths=run.paths, p=p,
        sup_error_Lp=lp_norm(sup_error),
        sup_error_std_error=bootstrap_std_error(sup_error, lp_norm,
                                                master_seed, slot=0),
        var_tauN=variance(tau_N),
        var_tauN_std_error=bootstrap_std_error(tau_N, variance,
                                               master_seed, slot=1),
        var_tauN_exact=variance_identity(run.h, run.N))
    logger.info("h=%g: sup error %.6g, Var(tau_N) %.6g (exact %.6g)"
                % (run.h, stats.sup_error_Lp, stats.var_tauN,
                   stats.var_tauN_exact))
    return stats


def lower_bound_check(h: float, T: float) -> float:
    """ The lower bound ((T - h) Var(H) / 4)^(1/4) h^(1/4) of the Lp error.

    :param h: the time step, 0 < h < min(1, T)
    :param T: the horizon
    """
    if not 0 < h < 1 or h >= T:
        raise ArgumentError("need 0 < h < min(1, T), got h=%g, T=%g" % (h, T))
    return ((T - h) * EXIT_TIME_VARIANCE / 4.0) ** 0.25 * h ** 0.25


def write_embedding_times(run: EmbeddingRun, filename: str):
    """ Write the stopping times as rows (path_index, k, tau_k).
    """
    with open(filename, 'w', newline='') as out_file:
        f = csv.writer(out_file, delimiter=',', quotechar='"',
                       lineterminator='\n')
        f.writerow(["path_index", "k", "tau_k"])
        for j, row in enumerate(run.tau):
            for k, tau in enumerate(row):
                f.writerow([j, k, repr(float(tau))])


def write_embedding_summary(stats: TemporalErrorStats, filename: str):
    with open(filename, 'w') as out_file:
        out_file.write(stats.model_dump_json(indent=2))
        out_file.write("\n")
