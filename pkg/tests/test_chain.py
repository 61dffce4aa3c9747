import math

import numpy as np
import pytest

from emcel_const import ArgumentError, DomainError
from emcel_chain import (CHUNK_SIZE, BitStream, ChainPath, apply_reflection,
                         interpolate, sde_to_natural_scale, simulate_chain,
                         simulate_paths, simulate_terminal_batch, step_count,
                         write_functional_results, write_path_dump)
from emcel_measure import Density, SelfSimilarMeasure, SpeedMeasure, StateSpace
from emcel_scale import build_scheme


class ScriptedBits(BitStream):
    """ Toss source replaying a fixed sequence.
    """

    def __init__(self, tosses):
        super(ScriptedBits, self).__init__(0)
        self.tosses = np.asarray(tosses, dtype=float)

    def bit_matrix(self, path_indices, n):
        return np.tile(self.tosses[:n], (len(path_indices), 1))


def brownian_scheme():
    m = SpeedMeasure(StateSpace(), Density.uniform(2.0))
    return build_scheme(m, m.space, 0.5)


def sticky_scheme():
    m = SpeedMeasure(StateSpace(), Density.uniform(2.0), atoms=[(0.0, 2.0)])
    return build_scheme(m, m.space, 0.5)


def halfline_scheme():
    m = SpeedMeasure(StateSpace(0.0, math.inf), Density.uniform(2.0))
    return build_scheme(m, m.space, 0.5)


def cantor_scheme():
    m = SpeedMeasure(StateSpace(), Density.uniform(2.0),
                     singular_parts=[SelfSimilarMeasure.cantor()])
    return build_scheme(m, m.space, 0.5)


class TestBitStream:

    def test_deterministic(self):
        a = BitStream(42).bits(7, 100)
        b = BitStream(42).bits(7, 100)
        assert np.array_equal(a, b)

    def test_values(self):
        bits = BitStream(1).bits(0, 10000)
        assert set(np.unique(bits)) == {-1.0, 1.0}
        assert abs(bits.mean()) < 4.0 / math.sqrt(len(bits))

    def test_paths_and_streams_differ(self):
        stream = BitStream(3)
        assert not np.array_equal(stream.bits(0, 64), stream.bits(1, 64))
        u_chain = stream.generator(0, BitStream.CHAIN).random(8)
        u_boot = stream.generator(0, BitStream.BOOTSTRAP).random(8)
        assert not np.array_equal(u_chain, u_boot)

    def test_prefix_stable(self):
        stream = BitStream(5)
        assert np.array_equal(stream.bits(2, 10), stream.bits(2, 50)[:10])

    def test_invalid_seed(self):
        with pytest.raises(ArgumentError):
            BitStream(-1)
        with pytest.raises(ArgumentError):
            BitStream(2 ** 64)


class TestSimulateChain:

    def test_brownian_steps(self):
        path = simulate_chain(brownian_scheme(), 0.04, 0.0, 0.12,
                              ScriptedBits([1, 1, -1]), 0)
        assert path.N == 3
        assert list(path.nodes) == pytest.approx([0.0, 0.2, 0.4, 0.2])

    def test_short_horizon(self):
        path = simulate_chain(brownian_scheme(), 0.04, 0.0, 0.01,
                              BitStream(0), 0)
        assert path.N == 1

    def test_zero_horizon(self):
        path = simulate_chain(brownian_scheme(), 0.04, 0.3, 0.0,
                              BitStream(0), 0)
        assert list(path.nodes) == [0.3]

    def test_absorbed(self):
        path = simulate_chain(halfline_scheme(), 0.01, 0.05, 0.05,
                              ScriptedBits([-1, 1, 1, -1, 1]), 0)
        assert list(path.nodes) == [0.05, 0.0, 0.0, 0.0, 0.0, 0.0]

    def test_start_at_absorbing_end(self):
        path = simulate_chain(halfline_scheme(), 0.01, 0.0, 0.1,
                              BitStream(1), 0)
        assert np.all(path.nodes == 0.0)

    def test_start_outside(self):
        with pytest.raises(DomainError):
            simulate_chain(halfline_scheme(), 0.01, -0.5, 0.1, BitStream(1), 0)

    def test_h_outside_range(self):
        with pytest.raises(ArgumentError):
            simulate_chain(brownian_scheme(), 0.6, 0.0, 1.0, BitStream(1), 0)

    def test_step_size_exactness(self):
        scheme = sticky_scheme()
        nodes = simulate_paths(scheme, 0.04, 0.1, 1.0, 200, 9)
        for row in nodes:
            for x, x_next in zip(row, row[1:]):
                assert abs(x_next - x) == pytest.approx(
                    scheme.evaluate(0.04, x), rel=1e-9, abs=1e-12)

    def test_absorption_permanence(self):
        nodes = simulate_paths(halfline_scheme(), 0.04, 0.3, 2.0, 500, 4)
        absorbed = 0
        for row in nodes:
            hits = np.flatnonzero(row == 0.0)
            if hits.size:
                absorbed += 1
                assert np.all(row[hits[0]:] == 0.0)
            assert np.all(row >= 0.0)
        assert absorbed > 0


class TestInterpolate:

    def test_grid_point(self):
        path = ChainPath(0.04, 0.0, [0.0, 0.2, 0.4, 0.2], 0.12)
        assert interpolate(path, 0.08) == pytest.approx(0.4)

    def test_midpoint(self):
        path = ChainPath(0.04, 0.0, [0.0, 0.2], 0.04)
        assert interpolate(path, 0.02) == pytest.approx(0.1)

    def test_last_node(self):
        path = ChainPath(0.04, 0.0, [0.0, 0.2, 0.4], 0.08)
        assert interpolate(path, 0.08) == 0.4

    def test_negative_time(self):
        path = ChainPath(0.04, 0.0, [0.0, 0.2], 0.04)
        with pytest.raises(ArgumentError):
            interpolate(path, -0.1)

    def test_beyond_last_node(self):
        path = ChainPath(0.04, 0.0, [0.0, 0.2], 0.04)
        with pytest.raises(ArgumentError):
            interpolate(path, 0.1)


class TestBatch:

    def test_martingale_brownian(self):
        values = simulate_terminal_batch(brownian_scheme(), 0.04, 0.5, 1.0,
                                         20000, 1)
        error = values.std(ddof=1) / math.sqrt(len(values))
        assert abs(values.mean() - 0.5) <= 4 * error

    def test_martingale_sticky(self):
        values = simulate_terminal_batch(sticky_scheme(), 0.04, 0.0, 1.0,
                                         5000, 2)
        error = values.std(ddof=1) / math.sqrt(len(values))
        assert abs(values.mean()) <= 4 * error

    def test_deterministic(self):
        scheme = sticky_scheme()
        a = simulate_terminal_batch(scheme, 0.04, 0.0, 0.5, 300, 17)
        b = simulate_terminal_batch(scheme, 0.04, 0.0, 0.5, 300, 17)
        assert np.array_equal(a, b)

    def test_workers_do_not_change_results(self):
        scheme = brownian_scheme()
        n = 2 * CHUNK_SIZE + 5
        a = simulate_terminal_batch(scheme, 0.1, 0.0, 1.0, n, 3, workers=1)
        b = simulate_terminal_batch(scheme, 0.1, 0.0, 1.0, n, 3, workers=4)
        assert np.array_equal(a, b)

    def test_workers_do_not_change_sticky_results(self):
        scheme = sticky_scheme()
        n = 2 * CHUNK_SIZE + 5
        a = simulate_terminal_batch(scheme, 0.04, 0.0, 1.0, n, 5, workers=1)
        b = simulate_terminal_batch(scheme, 0.04, 0.0, 1.0, n, 5, workers=4)
        assert np.array_equal(a, b)

    def test_workers_do_not_change_cantor_results(self):
        scheme = cantor_scheme()
        n = CHUNK_SIZE + 7
        a = simulate_terminal_batch(scheme, 0.05, 0.5, 0.5, n, 6, workers=1)
        b = simulate_terminal_batch(scheme, 0.05, 0.5, 0.5, n, 6, workers=3)
        assert np.array_equal(a, b)

    def test_small_step_batch_keeps_no_cache(self):
        scheme = sticky_scheme()
        h = 2.0 ** -12
        values = simulate_terminal_batch(scheme, h, 0.0, 1.0, CHUNK_SIZE, 4)
        assert np.all(np.isfinite(values))
        assert scheme.cache_size() == 0

    def test_batches_match_single_paths_randomized(self):
        scheme = sticky_scheme()
        rng = np.random.default_rng(40)
        batches = {}
        for _ in range(1000):
            seed = int(rng.integers(0, 20))
            j = int(rng.integers(0, 64))
            if seed not in batches:
                batches[seed] = simulate_terminal_batch(
                    scheme, 0.1, 0.0, 0.5, 64, seed, workers=2)
            path = simulate_chain(scheme, 0.1, 0.0, 0.5, BitStream(seed), j)
            assert batches[seed][j] == pytest.approx(path.interpolate(0.5),
                                                     rel=1e-12, abs=1e-15)

    def test_prefix_of_larger_batch(self):
        scheme = brownian_scheme()
        small = simulate_terminal_batch(scheme, 0.1, 0.0, 1.0, 10, 3)
        large = simulate_terminal_batch(scheme, 0.1, 0.0, 1.0, 100, 3)
        assert np.array_equal(small, large[:10])

    def test_matches_single_paths(self):
        scheme = brownian_scheme()
        values = simulate_terminal_batch(scheme, 0.1, 0.0, 0.55, 5, 8)
        for j in range(5):
            path = simulate_chain(scheme, 0.1, 0.0, 0.55, BitStream(8), j)
            assert values[j] == pytest.approx(path.interpolate(0.55))

    def test_functional(self):
        values = simulate_terminal_batch(brownian_scheme(), 0.1, 0.0, 1.0, 50,
                                         3, evaluation=lambda p: p.N)
        assert np.all(values == 10)

    def test_zero_paths(self):
        with pytest.raises(ArgumentError):
            simulate_terminal_batch(brownian_scheme(), 0.1, 0.0, 1.0, 0, 3)

    def test_bad_evaluation(self):
        with pytest.raises(ArgumentError):
            simulate_terminal_batch(brownian_scheme(), 0.1, 0.0, 1.0, 5, 3,
                                    evaluation='maximum')


class TestReflection:

    def test_fold(self):
        path = apply_reflection(ChainPath(0.1, -0.2, [-0.2, 0.1], 0.1), 0.0)
        assert list(path.nodes) == pytest.approx([0.2, 0.1])

    def test_unchanged_above(self):
        nodes = [0.5, 0.7, 0.6]
        path = apply_reflection(ChainPath(0.1, 0.5, nodes, 0.2), 0.0)
        assert list(path.nodes) == nodes

    def test_below_level(self):
        path = apply_reflection(ChainPath(0.1, 0.5, [0.5], 0.0), 1.0)
        assert list(path.nodes) == [1.5]

    def test_positivity(self):
        nodes = simulate_paths(sticky_scheme(), 0.04, 0.0, 1.0, 200, 6)
        for row in nodes:
            folded = apply_reflection(ChainPath(0.04, 0.0, row, 1.0), 0.0)
            assert np.all(folded.nodes >= 0.0)


class TestNaturalScale:

    def test_no_drift(self):
        s, density = sde_to_natural_scale(lambda x: 0.0, lambda x: 2.0, 0.0)
        assert s(1.5) == pytest.approx(1.5)
        assert density(0.7) == pytest.approx(0.5)

    def test_constant_drift(self):
        s, _ = sde_to_natural_scale(lambda x: 0.3, lambda x: 1.0, 0.5)
        for x in [-1.0, 0.5, 2.0]:
            assert s.derivative(x) == pytest.approx(math.exp(-0.6 * (x - 0.5)))

    def test_mean_reverting_drift(self):
        s, _ = sde_to_natural_scale(lambda x: -x, lambda x: 1.0, 0.0)
        assert s.derivative(1.0) == pytest.approx(math.e, rel=1e-8)

    def test_inverse(self):
        s, _ = sde_to_natural_scale(lambda x: 0.3, lambda x: 1.0, 0.0)
        assert s.inverse(s(0.8)) == pytest.approx(0.8, abs=1e-9)

    def test_vanishing_diffusion(self):
        s, _ = sde_to_natural_scale(lambda x: 1.0, lambda x: 0.0, 0.0)
        with pytest.raises(DomainError):
            s.derivative(1.0)


def test_step_count():
    assert step_count(1.0, 0.1) == 10
    assert step_count(1.0, 0.3) == 4
    assert step_count(0.01, 0.04) == 1
    assert step_count(0.0, 0.04) == 0


def test_writers(tmp_path):
    nodes = np.array([[0.0, 0.2], [0.0, -0.2]])
    dump = tmp_path / "paths.csv"
    write_path_dump(nodes, 0.04, str(dump))
    lines = dump.read_text().splitlines()
    assert lines[0] == "path_index,k,t,x"
    assert len(lines) == 5
    results = tmp_path / "values.csv"
    write_functional_results([0.2, -0.2], str(results))
    assert results.read_text().splitlines() == ["path_index,value", "0,0.2",
                                                "1,-0.2"]
