#!/usr/bin/env python3

import logging
logger = logging.getLogger(__name__)
import csv
import math
from typing import Callable, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, optimize

from emcel_const import (ArgumentError, DomainError, InternalConsistencyError,
                         QUAD_TOL)
from emcel_measure import Density
from emcel_runner import StudyManager
from emcel_scale import ScaleFactorScheme

# paths simulated together in one vectorized block
CHUNK_SIZE = 2048
# relative size of the floating-point overshoot that is clamped back
GUARD = 1e-12


class BitStream:
    """ Keyed source of the +/-1 coin tosses.

    Path j of stream s reads a Philox counter-based generator keyed with
    (master_seed, s, j); bit k is the sign of the high bit of the k-th
    uniform. Streams separate the coin tosses from reference draws,
    bootstrap resamples and exit-time uniforms.

    :param master_seed: a 64-bit integer
    """
    CHAIN = 0
    REFERENCE = 1
    BOOTSTRAP = 2
    EXIT_TIME = 3

    def __init__(self, master_seed: int):
        master_seed = int(master_seed)
        if not 0 <= master_seed < 2 ** 64:
            raise ArgumentError("master seed must be a 64-bit integer")
        self.master_seed = master_seed

    def generator(self, path_index: int,
                  stream: int = CHAIN) -> np.random.Generator:
        if not 0 <= path_index < 2 ** 48 or not 0 <= stream < 2 ** 16:
            raise ArgumentError("path index or stream out of range")
        key = (self.master_seed << 64) | (stream << 48) | path_index
        return np.random.Generator(np.random.Philox(key=key))

    def bits(self, path_index: int, n: int) -> np.ndarray:
        """ The first n tosses of a path, as floats in {-1, +1}.
        """
        u = self.generator(path_index).random(n)
        return np.where(u >= 0.5, 1.0, -1.0)

    def bit_matrix(self, path_indices: Sequence[int], n: int) -> np.ndarray:
        out = np.empty((len(path_indices), n))
        for row, j in enumerate(path_indices):
            out[row] = self.bits(j, n)
        return out


class ChainPath:
    """ One realization of the interpolated chain on [0, N h].

    :param h: the time step
    :param y0: the starting point
    :param nodes: the positions at times k h, k = 0..N
    :param T: the horizon
    """

    def __init__(self, h: float, y0: float, nodes: np.ndarray, T: float):
        self.h = h
        self.y0 = y0
        self.nodes = np.asarray(nodes, dtype=float)
        self.T = T

    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    def times(self) -> np.ndarray:
        return self.h * np.arange(self.N + 1)

    def interpolate(self, t: float) -> float:
        return interpolate(self, t)

    def __str__(self):
        return "chain path h=%g y0=%g with %d steps" % (self.h, self.y0, self.N)


def step_count(T: float, h: float) -> int:
    """ N = ceil(T/h), so that X_T is always defined by interpolation.
    """
    if T < 0:
        raise ArgumentError("negative horizon")
    if T == 0:
        return 0
    return max(1, int(math.ceil(T / h - 1e-9)))


def _guard(scheme: ScaleFactorScheme, nodes: np.ndarray) -> np.ndarray:
    """ Clamp rounding overshoot into the closure and snap to absorbing ends.
    """
    space = scheme.space
    for bound, accessible, below in ((space.left, space.left_accessible, True),
                                     (space.right, space.right_accessible, False)):
        if math.isinf(bound):
            continue
        eps = GUARD * max(1.0, abs(bound))
        outside = nodes < bound if below else nodes > bound
        if np.any(outside):
            if np.any(np.abs(nodes[outside] - bound) > eps):
                raise InternalConsistencyError(
                    "node left %s by more than the rounding guard" % space)
        near = np.abs(nodes - bound) <= eps
        if accessible:
            nodes[near] = bound
        else:
            nodes[outside] = bound
    return nodes


def _simulate_block(scheme: ScaleFactorScheme, h: float, y0: float, N: int,
                    bits: np.ndarray) -> np.ndarray:
    """ Run the recursion X_{k+1} = X_k + a_h(X_k) xi_{k+1} for a block of paths.

    :return: array (n_paths, N+1) of nodes

    :param bits: array (n_paths, N) of tosses
    """
    n = bits.shape[0]
    nodes = np.empty((n, N + 1))
    nodes[:, 0] = y0
    current = nodes[:, 0].copy()
    for k in range(N):
        a = scheme.evaluate_many(h, current)
        current = _guard(scheme, current + a * bits[:, k])
        nodes[:, k + 1] = current
    return nodes


def _check_start(scheme: ScaleFactorScheme, h: float, y0: float):
    if not 0 < h < scheme.h_max:
        raise ArgumentError("time step h=%g outside (0, %g)"
                            % (h, scheme.h_max))
    if not scheme.space.in_space(y0):
        raise DomainError("starting point %g outside %s" % (y0, scheme.space))


def simulate_chain(scheme: ScaleFactorScheme, h: float, y0: float, T: float,
                   bits: BitStream, path_index: int) -> ChainPath:
    """ Simulate one path of the chain with the tosses of path_index.

    :return: the path with N = ceil(T/h) steps

    :param scheme: the scale factors
    :param h: the time step
    :param y0: the starting point (an absorbing endpoint gives a \
               constant path)
    :param T: the horizon
    :param bits: the keyed toss source
    :param path_index: the index of the path in the stream
    """
    _check_start(scheme, h, y0)
    N = step_count(T, h)
    nodes = _simulate_block(scheme, h, y0, N,
                            bits.bit_matrix([path_index], N))
    return ChainPath(h, y0, nodes[0], T)


def interpolate(path: ChainPath, t: float) -> float:
    """ Linear interpolation of the nodes at time t.

    :return: X_t

    :param path: the chain path
    :param t: a time in [0, N h]
    """
    end = path.N * path.h
    if t < 0 or t > end * (1.0 + 1e-12):
        raise ArgumentError("t=%g outside [0, %g]" % (t, end))
    s = t / path.h
    k = int(math.floor(s))
    if k >= path.N:
        return float(path.nodes[path.N])
    frac = s - k
    return float(path.nodes[k] + frac * (path.nodes[k + 1] - path.nodes[k]))


def _interpolate_rows(nodes: np.ndarray, h: float, t: float) -> np.ndarray:
    N = nodes.shape[1] - 1
    s = t / h
    k = int(math.floor(s))
    if k >= N:
        return nodes[:, N].copy()
    frac = s - k
    return nodes[:, k] + frac * (nodes[:, k + 1] - nodes[:, k])


def _chunks(n_paths: int, offset: int = 0):
    for start in range(0, n_paths, CHUNK_SIZE):
        yield list(range(offset + start,
                         offset + min(start + CHUNK_SIZE, n_paths)))


def simulate_paths(scheme: ScaleFactorScheme, h: float, y0: float, T: float,
                   n_paths: int, master_seed: int,
                   workers: int = 1) -> np.ndarray:
    """ Simulate n_paths paths, vectorized per chunk and threaded per chunk.

    :return: array (n_paths, N+1) of nodes, row j is path j
    """
    if n_paths < 1:
        raise ArgumentError("n_paths must be at least 1")
    _check_start(scheme, h, y0)
    N = step_count(T, h)
    bits = BitStream(master_seed)
    manager = StudyManager(workers)
    for indices in _chunks(n_paths):
        manager.newStudy("paths-%d" % indices[0], _simulate_block,
                         scheme, h, y0, N, bits.bit_matrix(indices, N))
    return np.vstack(manager.join())


def _evaluate_chunk(scheme, h, y0, T, N, bits, indices, evaluation):
    nodes = _simulate_block(scheme, h, y0, N, bits.bit_matrix(indices, N))
    if evaluation == 'terminal':
        return _interpolate_rows(nodes, h, T)
    return np.array([float(evaluation(ChainPath(h, y0, row, T)))
                     for row in nodes])


def simulate_terminal_batch(scheme: ScaleFactorScheme, h: float, y0: float,
                            T: float, n_paths: int, master_seed: int,
                            evaluation: Union[str, Callable] = 'terminal',
                            workers: int = 1) -> np.ndarray:
    """ Evaluate X_T, or a path functional F, on n_paths independent paths.

    Path j always reads the tosses keyed by (master_seed, j), so the
    output is identical for any number of workers.

    :return: array of n_paths values ordered by path index

    :param scheme: the scale factors
    :param h: the time step
    :param y0: the starting point
    :param T: the horizon
    :param n_paths: the number of paths
    :param master_seed: the master seed
    :param evaluation: 'terminal' or a function of a :class:`ChainPath`
    :param workers: number of threads
    """
    if n_paths < 1:
        raise ArgumentError("n_paths must be at least 1")
    if evaluation != 'terminal' and not callable(evaluation):
        raise ArgumentError("evaluation must be 'terminal' or a callable")
    _check_start(scheme, h, y0)
    N = step_count(T, h)
    bits = BitStream(master_seed)
    manager = StudyManager(workers)
    for indices in _chunks(n_paths):
        manager.newStudy("batch-%d" % indices[0], _evaluate_chunk, scheme, h,
                         y0, T, N, bits, indices, evaluation)
    values = np.concatenate(manager.join())
    logger.debug("h=%g: %d paths simulated, %d scalar scale factors cached"
                 % (h, n_paths, scheme.cache_size()))
    return values


def apply_reflection(path: ChainPath, l: float) -> ChainPath:
    """ Fold a path at l with f(y) = l + |y - l|.

    Applied to a chain approximating a diffusion on the real line, the
    folded chain approximates the diffusion reflected at l; an atom of
    the speed measure at l makes the reflection sticky. Nodes are folded
    and then interpolated linearly; on segments crossing l this differs
    from folding the interpolated path by at most the segment amplitude.

    :return: the folded path

    :param path: the chain path
    :param l: the reflection level
    """
    folded = l + np.abs(path.nodes - l)
    return ChainPath(path.h, l + abs(path.y0 - l), folded, path.T)


class NaturalScale:
    """ Scale function of dY = b(Y) dt + sigma(Y) dW, computed by quadrature.

    s'(x) = exp(-int_anchor^x 2 b / sigma^2) and s(x) = int_anchor^x s'.

    :param drift: the drift b
    :param diffusion: the diffusion coefficient sigma
    :param anchor: the point where s vanishes and s' = 1
    """

    def __init__(self, drift: Callable[[float], float],
                 diffusion: Callable[[float], float], anchor: float,
                 tol: float = QUAD_TOL):
        self.drift = drift
        self.diffusion = diffusion
        self.anchor = float(anchor)
        self.tol = tol

    def _sigma(self, x: float) -> float:
        value = self.diffusion(x)
        if value == 0:
            raise DomainError("diffusion coefficient vanishes at %g" % x)
        return value

    def derivative(self, x: float) -> float:
        integrand = lambda u: 2.0 * self.drift(u) / self._sigma(u) ** 2
        value, _ = integrate.quad(integrand, self.anchor, x,
                                  epsabs=self.tol, epsrel=1e-12, limit=200)
        return math.exp(-value)

    def __call__(self, x: float) -> float:
        value, _ = integrate.quad(self.derivative, self.anchor, x,
                                  epsabs=self.tol, epsrel=1e-12, limit=200)
        return value

    def inverse(self, z: float) -> float:
        """ The x with s(x) = z, by brentq on an expanding bracket.
        """
        f = lambda x: self(x) - z
        width = 1.0
        lo, hi = self.anchor - width, self.anchor + width
        for _ in range(60):
            if f(lo) <= 0 <= f(hi):
                break
            width *= 2.0
            lo, hi = self.anchor - width, self.anchor + width
        else:
            raise DomainError("value %g outside the range of the scale "
                              "function" % z)
        return optimize.brentq(f, lo, hi, xtol=1e-13, rtol=1e-13)

    def density(self, z: float) -> float:
        """ Speed density of s(Y) at z = s(x): 2 / (s'(x)^2 sigma(x)^2).
        """
        x = self.inverse(z)
        return 2.0 / (self.derivative(x) ** 2 * self._sigma(x) ** 2)


def sde_to_natural_scale(drift: Callable[[float], float],
                         diffusion: Callable[[float], float],
                         anchor: float) -> Tuple[NaturalScale, Density]:
    """ Transform an SDE to natural scale.

    :return: the scale function s (callable, with derivative and \
             inverse) and the speed density of s(Y) as a function of z

    :param drift: the drift coefficient
    :param diffusion: the diffusion coefficient, nonzero on the path
    :param anchor: the point where s(anchor) = 0
    """
    scale = NaturalScale(drift, diffusion, anchor)
    return scale, Density(scale.density)


def write_path_dump(nodes: np.ndarray, h: float, filename: str):
    """ Write paths as rows (path_index, k, t, x).
    """
    with open(filename, 'w', newline='') as out_file:
        f = csv.writer(out_file, delimiter=',', quotechar='"',
                       lineterminator='\n')
        f.writerow(["path_index", "k", "t", "x"])
        for j, row in enumerate(nodes):
            for k, x in enumerate(row):
                f.writerow([j, k, repr(k * h), repr(float(x))])


def write_functional_results(values: Sequence[float], filename: str):
    """ Write per-path values as rows (path_index, value).
    """
    with open(filename, 'w', newline='') as out_file:
        f = csv.writer(out_file, delimiter=',', quotechar='"',
                       lineterminator='\n')
        f.writerow(["path_index", "value"])
        for j, value in enumerate(values):
            f.writerow([j, repr(float(value))])
