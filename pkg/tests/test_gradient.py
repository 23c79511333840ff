import itertools

import numpy as np
import pytest

from odcal.gradient import (
    BlockCache,
    ColorAssignment,
    EvalCounter,
    GradientEvalError,
    IncidenceMatrix,
    InvalidColoringError,
    JacobianSet,
    condense,
    detect_incidence,
    fd_jacobian,
    inflate,
    load_coloring,
    load_incidence,
    multi_start_color,
    psp_jacobian,
    save_coloring,
    save_incidence,
    sequential_color,
    staggered_plan,
    validate_coloring,
)

# Six-parameter cyclic sparsity pattern whose conflict graph colors with 3.
CYCLIC6 = IncidenceMatrix(entries=np.array([
    [1, 1, 0, 0, 0, 1],
    [1, 1, 1, 0, 0, 0],
    [0, 1, 1, 1, 0, 0],
    [0, 0, 1, 1, 1, 0],
    [0, 0, 0, 1, 1, 1],
    [1, 0, 0, 0, 1, 1],
], dtype=np.uint8))


def chromatic_number(incidence: IncidenceMatrix) -> int:
    """Exhaustive backtracking oracle (for small n)."""
    n = incidence.n_parameters
    adj = [set() for _ in range(n)]
    for row in incidence.entries:
        cols = np.flatnonzero(row)
        for a in cols:
            for b in cols:
                if a != b:
                    adj[a].add(b)

    def colorable(k):
        colors = [-1] * n

        def place(v):
            if v == n:
                return True
            used = {colors[u] for u in adj[v] if colors[u] >= 0}
            for c in range(k):
                if c not in used:
                    colors[v] = c
                    if place(v + 1):
                        return True
                    colors[v] = -1
            return False

        return place(0)

    for k in range(1, n + 1):
        if colorable(k):
            return k
    return n


class TestFdJacobian:
    def test_linear_map_exact(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(4, 3))
        jac = fd_jacobian(lambda x: A @ x, np.array([1.0, -2.0, 0.5]), 0.1)
        np.testing.assert_allclose(jac, A, atol=1e-12)

    def test_scalar_square(self):
        jac = fd_jacobian(lambda x: np.array([x[0] ** 2]), np.array([3.0]),
                          1e-3)
        assert jac[0, 0] == pytest.approx(6.0, abs=1e-6)

    def test_counts_2n_evaluations(self):
        counter = EvalCounter()
        fd_jacobian(lambda x: x * 2, np.zeros(5), 0.1, counter=counter)
        assert counter.evaluations == 10

    def test_workers_equal_serial(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(3, 6))
        point = rng.normal(size=6)
        serial = fd_jacobian(lambda x: A @ x, point, 0.05)
        parallel = fd_jacobian(lambda x: A @ x, point, 0.05, workers=4)
        np.testing.assert_array_equal(serial, parallel)

    def test_nonfinite_names_parameter(self):
        def bad(x):
            return np.array([np.inf if x[2] != 0.0 else 1.0])

        with pytest.raises(GradientEvalError, match="parameter 2"):
            fd_jacobian(bad, np.zeros(4), 0.1)


class TestDetectIncidence:
    def test_union_of_patterns(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0, 0.0], [0.0, -2.0]])
        inc = detect_incidence([a, b])
        np.testing.assert_array_equal(inc.entries, [[1, 0], [0, 1]])

    def test_all_zero(self):
        inc = detect_incidence([np.zeros((3, 2))])
        assert inc.entries.sum() == 0

    def test_jacobian_sets_and_threshold(self):
        js = JacobianSet()
        js.add(1, 1, np.array([[0.5, 1e-9], [0.0, 3.0]]))
        inc = detect_incidence([js], threshold=1e-6)
        np.testing.assert_array_equal(inc.entries, [[1, 0], [0, 1]])

    def test_cyclic_pattern_reproduced(self):
        rng = np.random.default_rng(0)
        jac = CYCLIC6.entries * rng.uniform(0.5, 2.0, size=(6, 6))
        inc = detect_incidence([jac])
        np.testing.assert_array_equal(inc.entries, CYCLIC6.entries)


class TestColoring:
    def test_cyclic6_natural_order_three_colors(self):
        coloring = sequential_color(CYCLIC6)
        assert coloring.num_colors == 3
        assert validate_coloring(coloring, CYCLIC6)

    def test_diagonal_one_color(self):
        inc = IncidenceMatrix(entries=np.eye(4, dtype=np.uint8))
        assert sequential_color(inc).num_colors == 1

    def test_dense_needs_n(self):
        inc = IncidenceMatrix(entries=np.ones((3, 5), dtype=np.uint8))
        assert sequential_color(inc).num_colors == 5

    def test_multi_start_cyclic6(self):
        coloring = multi_start_color(CYCLIC6, num_orders=30, seed=0)
        assert coloring.num_colors == 3
        assert validate_coloring(coloring, CYCLIC6)

    def test_multi_start_never_worse_than_natural(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            inc = IncidenceMatrix(
                entries=(rng.random((8, 10)) < 0.3).astype(np.uint8))
            natural = sequential_color(inc)
            best = multi_start_color(inc, num_orders=10, seed=1)
            assert best.num_colors <= natural.num_colors
            assert validate_coloring(best, inc)

    def test_multi_start_deterministic(self):
        a = multi_start_color(CYCLIC6, num_orders=12, seed=9)
        b = multi_start_color(CYCLIC6, num_orders=12, seed=9)
        np.testing.assert_array_equal(a.colors, b.colors)

    def test_adversarial_vs_exhaustive_oracle(self):
        # Crown-graph-style pattern: bipartite minus a matching. Greedy in an
        # alternating order wastes colors; multi-start should reach optimum.
        n = 8
        rows = []
        for i in range(n // 2):
            for j in range(n // 2):
                if i != j:
                    row = np.zeros(n, dtype=np.uint8)
                    row[i] = 1
                    row[n // 2 + j] = 1
                    rows.append(row)
        inc = IncidenceMatrix(entries=np.array(rows))
        optimal = chromatic_number(inc)
        assert optimal == 2
        bad_order = [v for pair in zip(range(n // 2), range(n // 2, n))
                     for v in pair]
        greedy_bad = sequential_color(inc, order=np.array(bad_order))
        assert greedy_bad.num_colors > optimal
        best = multi_start_color(inc, num_orders=60, seed=3)
        assert best.num_colors == optimal

    def test_validity_checker_catches_conflicts(self):
        bad = ColorAssignment(colors=np.zeros(6, dtype=np.int64), num_colors=1)
        assert not validate_coloring(bad, CYCLIC6)


class TestCondenseInflate:
    def test_identity_coloring_roundtrip(self):
        rng = np.random.default_rng(3)
        h = rng.normal(size=(4, 4)) * CYCLIC6.entries[:4, :4]
        inc = IncidenceMatrix(entries=(h != 0).astype(np.uint8))
        d = ColorAssignment(colors=np.arange(4), num_colors=4)
        np.testing.assert_array_equal(condense(h, d), h)
        np.testing.assert_array_equal(inflate(condense(h, d), d, inc), h)

    def test_cyclic6_condense_shape_and_sums(self):
        rng = np.random.default_rng(4)
        h = CYCLIC6.entries * rng.uniform(1.0, 2.0, size=(6, 6))
        d = sequential_color(CYCLIC6)
        cond = condense(h, d)
        assert cond.shape == (6, 3)
        for k in range(3):
            np.testing.assert_allclose(cond[:, k],
                                       h[:, d.members(k)].sum(axis=1))

    def test_zero_matrix(self):
        d = sequential_color(CYCLIC6)
        np.testing.assert_array_equal(condense(np.zeros((6, 6)), d),
                                      np.zeros((6, 3)))
        np.testing.assert_array_equal(
            inflate(np.zeros((6, 3)), d, CYCLIC6), np.zeros((6, 6)))

    def test_invalid_coloring_rejected(self):
        d = ColorAssignment(colors=np.zeros(6, dtype=np.int64), num_colors=1)
        with pytest.raises(InvalidColoringError):
            inflate(np.zeros((6, 1)), d, CYCLIC6)

    def test_1000_random_roundtrips_exact(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            m = int(rng.integers(1, 51))
            n = int(rng.integers(1, 51))
            inc = IncidenceMatrix(
                entries=(rng.random((m, n)) < rng.uniform(0.05, 0.5)).astype(np.uint8))
            h = inc.entries * rng.normal(size=(m, n))
            d = sequential_color(inc, order=rng.permutation(n))
            recovered = inflate(condense(h, d), d, inc)
            np.testing.assert_array_equal(recovered, h)


class TestPspJacobian:
    def test_linear_cyclic6_matches_fd_with_fewer_evals(self):
        rng = np.random.default_rng(7)
        A = CYCLIC6.entries * rng.uniform(0.5, 3.0, size=(6, 6))
        point = rng.normal(size=6)
        d = multi_start_color(CYCLIC6, num_orders=30, seed=0)
        fd_counter, psp_counter = EvalCounter(), EvalCounter()
        fd = fd_jacobian(lambda x: A @ x, point, 0.2, counter=fd_counter)
        psp = psp_jacobian(lambda x: A @ x, point, d, CYCLIC6, 0.2,
                           counter=psp_counter)
        np.testing.assert_allclose(psp, A, atol=1e-12)
        np.testing.assert_allclose(psp, fd, atol=1e-12)
        assert fd_counter.evaluations == 12
        assert psp_counter.evaluations == 6

    def test_diagonal_single_color(self):
        inc = IncidenceMatrix(entries=np.eye(5, dtype=np.uint8))
        d = sequential_color(inc)
        assert d.num_colors == 1
        diag = np.diag([1.0, -2.0, 3.0, 0.5, 4.0])
        counter = EvalCounter()
        psp = psp_jacobian(lambda x: diag @ x, np.ones(5), d, inc, 0.1,
                           counter=counter)
        np.testing.assert_allclose(psp, diag, atol=1e-12)
        assert counter.evaluations == 2

    def test_100_random_linear_maps(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            m = int(rng.integers(2, 12))
            n = int(rng.integers(2, 12))
            inc = IncidenceMatrix(
                entries=(rng.random((m, n)) < 0.4).astype(np.uint8))
            A = inc.entries * rng.normal(size=(m, n))
            point = rng.normal(size=n)
            d = sequential_color(inc, order=rng.permutation(n))
            steps = rng.uniform(0.05, 0.5, size=d.num_colors)
            fd_counter, psp_counter = EvalCounter(), EvalCounter()
            fd = fd_jacobian(lambda x: A @ x, point,
                             rng.uniform(0.05, 0.5, size=n),
                             counter=fd_counter)
            psp = psp_jacobian(lambda x: A @ x, point, d, inc, steps,
                               counter=psp_counter)
            denom = max(np.linalg.norm(A), 1e-12)
            assert np.linalg.norm(psp - fd) / denom < 1e-10
            assert fd_counter.evaluations == 2 * n
            assert psp_counter.evaluations == 2 * d.num_colors


class TestStaggered:
    def test_plan_degree3(self):
        entry = staggered_plan(1, 3)
        assert entry.horizon == (1, 3)
        assert entry.produces == ((1, 1), (2, 1), (3, 1))

    def test_degree1_degenerates(self):
        entry = staggered_plan(4, 1)
        assert entry.horizon == (4, 4)
        assert entry.produces == ((4, 4),)

    def test_cache_covers_calibration_row(self):
        # after sweeps for t = 1..3 every block of the third row is cached
        cache = BlockCache(n_measurements=2, n_parameters=2)
        recorded = []
        for t in (1, 2, 3):
            for h, k in staggered_plan(t, 3).produces:
                cache.store(h, k, np.full((2, 2), float(10 * h + k)))
                recorded.append((h, k))
        assert len([key for key in recorded if key[0] <= 3]) == 6
        row = cache.assemble_row(3, 3)
        assert row.shape == (2, 6)
        np.testing.assert_array_equal(row[:, 0:2], np.full((2, 2), 33.0))
        np.testing.assert_array_equal(row[:, 2:4], np.full((2, 2), 32.0))
        np.testing.assert_array_equal(row[:, 4:6], np.full((2, 2), 31.0))

    def test_missing_blocks_are_zero(self):
        cache = BlockCache(1, 1)
        cache.store(1, 1, np.array([[2.0]]))
        row = cache.assemble_row(1, 3)  # lags reach before the horizon start
        np.testing.assert_array_equal(row, [[2.0, 0.0, 0.0]])


class TestSerialization:
    def test_incidence_roundtrip(self, tmp_path):
        path = tmp_path / "inc.txt"
        save_incidence(path, CYCLIC6)
        loaded = load_incidence(path)
        np.testing.assert_array_equal(loaded.entries, CYCLIC6.entries)

    def test_coloring_roundtrip(self, tmp_path):
        d = sequential_color(CYCLIC6)
        path = tmp_path / "col.txt"
        save_coloring(path, d)
        loaded = load_coloring(path)
        np.testing.assert_array_equal(loaded.colors, d.colors)
        assert loaded.num_colors == d.num_colors

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not an incidence file\n")
        with pytest.raises(ValueError):
            load_incidence(path)
