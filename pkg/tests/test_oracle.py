"""
Tests for the reference attention implementations and the finite-difference checker
"""

import numpy as np
import pytest

from ballsparse.exceptions import FullyMaskedError, InvalidArgumentError, ShapeError
from ballsparse.oracle.gradient import fd_vjp_check, sample_coordinates, selection_margin
from ballsparse.oracle.reference import brute_force_topk, dense_reference
from ballsparse.processing.attention.core import attend, attend_vjp


class TestDenseReference:

    def test_singleton_key(self):
        v = np.array([[2.0, -1.0]])
        np.testing.assert_allclose(dense_reference(np.ones((3, 2)), np.ones((1, 2)), v), np.repeat(v, 3, axis=0))

    def test_uniform_keys(self):
        v = np.array([[1.0], [2.0], [6.0]])
        np.testing.assert_allclose(dense_reference(np.ones((2, 1)), np.ones((3, 1)), v), [[3.0], [3.0]])

    def test_masked_key_is_ignored(self):
        v = np.array([[1.0], [100.0]])
        out = dense_reference(np.zeros((1, 1)), np.zeros((2, 1)), v, mask=np.array([True, False]))
        np.testing.assert_allclose(out, [[1.0]])

    def test_fully_masked_row(self):
        with pytest.raises(FullyMaskedError):
            dense_reference(np.zeros((1, 1)), np.zeros((2, 1)), np.zeros((2, 1)), mask=np.array([False, False]))

    def test_needs_matrices(self):
        with pytest.raises(ShapeError):
            dense_reference(np.zeros(3), np.zeros((3, 1)), np.zeros((3, 1)))

    def test_agrees_with_attend(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, m, d = rng.integers(1, 9, size=3)
            q, k, v = rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, d))
            bias = rng.standard_normal((n, m))
            np.testing.assert_allclose(attend(q, k, v, bias=bias)[0], dense_reference(q, k, v, bias=bias), atol=1e-6)


class TestBruteForceTopk:

    def test_tie_to_lower_index(self):
        assert brute_force_topk([0.5, 0.9, 0.5, 0.1], 2).tolist() == [0, 1]

    def test_exclusion(self):
        assert brute_force_topk([9, 8, 7], 1, [True, False, False]).tolist() == [1]


class TestFiniteDifferences:

    def test_linear_map_is_exact(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        x = rng.standard_normal(4)
        grad_out = rng.standard_normal(3)
        report = fd_vjp_check(lambda p: a @ p, x, grad_out, a.T @ grad_out, step=1e-3)
        assert report.max_rel_error <= 1e-10
        assert report.precision == "high"
        assert report.n_coordinates == 4
        assert report.passed(1e-10)

    def test_attention_vjp(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.standard_normal((4, 3)) for _ in range(3))
        out, ws = attend(q, k, v)
        grad_out = rng.standard_normal(out.shape)
        grad_q = attend_vjp(ws, grad_out)[0]
        report = fd_vjp_check(lambda p: attend(p, k, v, keep_workspace=False)[0], q, grad_out, grad_q)
        assert report.max_rel_error <= 1e-6

    def test_wrong_gradient_is_reported(self):
        x = np.arange(3.0)
        report = fd_vjp_check(lambda p: p ** 2, x, np.ones(3), np.zeros(3))
        assert report.max_rel_error == pytest.approx(1.0)
        assert report.worst_coordinate == (2,)
        assert not report.passed(1e-4)

    def test_small_coordinate_error_is_reported_per_coordinate(self):
        w = np.array([100.0, 1.0, 0.0])
        x = np.ones(3)
        report = fd_vjp_check(lambda p: w * p, x, np.ones(3), np.array([100.0, 1.5, 0.0]), step=1e-3)
        assert report.max_rel_error == pytest.approx(0.005, rel=1e-6)
        assert report.max_coord_rel_error == pytest.approx(1.0 / 3.0, rel=1e-6)
        assert report.worst_coordinate == (1,)

        exact = fd_vjp_check(lambda p: w * p, x, np.ones(3), w, step=1e-3)
        assert exact.max_coord_rel_error <= 1e-10

    def test_coarse_step_is_flagged(self):
        x = np.ones(2)
        report = fd_vjp_check(lambda p: np.sin(p), x, np.ones(2), np.cos(x), step=1e-1)
        assert report.step_flagged
        assert not fd_vjp_check(lambda p: np.sin(p), x, np.ones(2), np.cos(x)).step_flagged

    def test_coordinate_subset(self):
        x = np.zeros((3, 3))
        report = fd_vjp_check(lambda p: p, x, np.ones((3, 3)), np.ones((3, 3)), coords=[(0, 1), (2, 2)])
        assert report.n_coordinates == 2

    def test_invalid_arguments(self):
        with pytest.raises(InvalidArgumentError):
            fd_vjp_check(lambda p: p, np.zeros(2), np.ones(2), np.ones(2), step=0.0)
        with pytest.raises(ShapeError):
            fd_vjp_check(lambda p: p, np.zeros(2), np.ones(2), np.ones(3))

    def test_sample_coordinates(self):
        coords = sample_coordinates((4, 5), 6, np.random.default_rng(0))
        assert len({tuple(int(i) for i in c) for c in coords}) == 6
        assert len(sample_coordinates((2,), 10, np.random.default_rng(0))) == 2


class TestSelectionMargin:

    def test_gap_between_kth_and_next(self):
        margin = selection_margin(np.array([[0.1, 0.9, 0.5, 0.4]]), 2)
        assert margin[0] == pytest.approx(0.1)

    def test_tie_has_zero_margin(self):
        assert selection_margin(np.array([0.5, 0.9, 0.5]), 2)[0] == 0.0

    def test_excluded_blocks_do_not_count(self):
        scores = np.array([[0.9, 0.8, 0.1]])
        excluded = np.array([[False, True, False]])
        assert selection_margin(scores, 1, excluded)[0] == pytest.approx(0.8)

    def test_no_competitor(self):
        assert np.isinf(selection_margin(np.array([[1.0, 2.0]]), 2)[0])
        assert np.isinf(selection_margin(np.array([[1.0, 2.0]]), 1, np.array([[True, False]]))[0])
