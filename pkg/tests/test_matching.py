"""Assignment machinery: brute-force oracle, constraints, error field."""

import itertools

import numpy as np
import pytest

from csifusion.matching import (
    UNMATCHED,
    CostMatrix,
    ErrorField,
    InfeasibleMatchingError,
    assemble_labels,
    build_cost_matrix,
    error_field_from_residuals,
    estimate_error_field,
    matching_accuracy,
    nearest_neighbour_match,
    one_hot_assignment,
    solve_km,
)
from csifusion.network import ArchSpec, init_params


def brute_force_cost(entries: np.ndarray) -> float:
    """Minimum assignment cost by enumerating row choices per column."""
    v, vh = entries.shape
    best = np.inf
    for perm in itertools.permutations(range(v), vh):
        c = sum(entries[perm[j], j] for j in range(vh))
        best = min(best, c)
    return best


def km_total(entries: np.ndarray, match: np.ndarray) -> float:
    m = match != UNMATCHED
    return float(entries[np.flatnonzero(m), match[m]].sum())


class TestKuhnMunkres:
    def test_matches_brute_force_random(self):
        """Exact optimum on 200 random rectangular instances."""
        rng = np.random.default_rng(2024)
        for _ in range(200):
            v = int(rng.integers(1, 7))
            vh = int(rng.integers(0, v + 1))
            entries = rng.uniform(0, 30, size=(v, vh))
            match = solve_km(entries)
            assert km_total(entries, match) == pytest.approx(
                brute_force_cost(entries), abs=1e-9
            )

    def test_constraints_hold(self):
        """Every detection exactly once, every row at most once."""
        rng = np.random.default_rng(7)
        for _ in range(100):
            v = int(rng.integers(1, 12))
            vh = int(rng.integers(0, v + 1))
            match = solve_km(rng.uniform(0, 5, size=(v, vh)))
            oh = one_hot_assignment(match, vh)
            assert oh.shape == (v, vh + 1)
            np.testing.assert_array_equal(oh.sum(axis=1), np.ones(v))
            np.testing.assert_array_equal(oh[:, :vh].sum(axis=0), np.ones(vh))
            assert (match != UNMATCHED).sum() == vh

    def test_identity_on_diagonal_dominant(self):
        c = np.full((4, 4), 10.0)
        np.fill_diagonal(c, 0.0)
        np.testing.assert_array_equal(solve_km(c), [0, 1, 2, 3])

    def test_scale_invariant(self):
        rng = np.random.default_rng(3)
        entries = rng.uniform(0, 9, size=(6, 4))
        np.testing.assert_array_equal(solve_km(entries), solve_km(entries * 37.5))

    def test_surplus_rows_unmatched(self):
        entries = np.array([[0.0, 5.0], [5.0, 0.0], [9.0, 9.0]])
        match = solve_km(entries)
        assert list(match) == [0, 1, UNMATCHED]

    def test_infeasible_raises(self):
        with pytest.raises(InfeasibleMatchingError):
            solve_km(np.zeros((2, 3)))

    def test_empty_detections(self):
        match = solve_km(np.zeros((3, 0)))
        assert list(match) == [UNMATCHED] * 3

    def test_nonfinite_rejected(self):
        c = np.zeros((2, 2))
        c[0, 0] = np.nan
        with pytest.raises(ValueError):
            solve_km(c)


class TestNearestNeighbour:
    def test_picks_row_minimum(self):
        entries = np.array([[3.0, 1.0], [0.5, 2.0]])
        np.testing.assert_array_equal(nearest_neighbour_match(entries, 10.0), [1, 0])

    def test_threshold_cuts_off(self):
        entries = np.array([[3.0, 1.0], [7.0, 9.0]])
        np.testing.assert_array_equal(
            nearest_neighbour_match(entries, 2.0), [1, UNMATCHED]
        )

    def test_rows_may_collide(self):
        entries = np.array([[1.0, 5.0], [1.0, 5.0]])
        np.testing.assert_array_equal(nearest_neighbour_match(entries, 10.0), [0, 0])


class TestErrorField:
    def test_split_scene_oracle(self):
        """Errors of 1 m left, 4 m right: queries recover each side's RMSE."""
        rng = np.random.default_rng(5)
        n = 400
        preds = np.column_stack([rng.uniform(-20, 20, n), rng.uniform(-5, 5, n)])
        mag = np.where(preds[:, 0] < 0, 1.0, 4.0)
        field = error_field_from_residuals(
            preds, mag**2, (-20, 20, -5, 5), cell_size=10.0, floor=0.25
        )
        left = field.query(np.array([[-15.0, 0.0], [-5.0, 2.0]]))
        right = field.query(np.array([[15.0, 0.0], [5.0, -2.0]]))
        np.testing.assert_allclose(left, 1.0, rtol=0.05)
        np.testing.assert_allclose(right, 4.0, rtol=0.05)

    def test_sparse_bin_falls_back_to_global(self):
        preds = np.array([[1.0, 1.0]] * 50 + [[35.0, 1.0]])
        sq = np.array([4.0] * 50 + [100.0])
        field = error_field_from_residuals(
            preds, sq, (0, 40, 0, 10), cell_size=10.0, min_count=3, floor=0.25
        )
        # the lone sample's bin uses the global RMSE instead of 10 m
        assert field.query(np.array([[35.0, 1.0]]))[0] == pytest.approx(
            field.global_rmse
        )

    def test_floor_clamps_perfect_model(self):
        preds = np.tile(np.array([[5.0, 5.0]]), (100, 1)) + np.random.default_rng(0).normal(
            0, 3, size=(100, 2)
        )
        field = error_field_from_residuals(
            preds, np.zeros(100), (0, 10, 0, 10), cell_size=5.0, floor=0.5
        )
        assert np.all(field.rmse == 0.5)
        assert field.global_rmse == 0.5

    def test_outside_points_use_edge_bins(self):
        preds = np.array([[5.0, 5.0]] * 10)
        field = error_field_from_residuals(
            preds, np.full(10, 9.0), (0, 10, 0, 10), cell_size=10.0, floor=0.1
        )
        assert field.query(np.array([[1000.0, -1000.0]]))[0] == pytest.approx(3.0)

    def test_model_wrapper_runs(self):
        arch = ArchSpec(input_shape=(2, 4, 4), conv_channels=(2,), fc_widths=(4, 2))
        params = init_params(arch, np.random.default_rng(1))
        x = np.random.default_rng(2).standard_normal((30, 2, 4, 4)).astype(np.float32)
        y = np.random.default_rng(3).uniform(-5, 5, (30, 2))
        field = estimate_error_field(arch, params, x, y, (-5, 5, -5, 5), floor=0.3)
        assert np.all(field.rmse >= 0.3)
        assert field.nn_threshold > 0


class TestCostMatrix:
    def test_entries_formula(self):
        preds = np.array([[0.0, 0.0], [10.0, 0.0]])
        det = np.array([[3.0, 4.0]])
        sig = np.array([2.0, 0.5])
        cm = build_cost_matrix(preds, sig, det)
        assert cm.entries[0, 0] == pytest.approx(25.0 / 4.0)
        assert cm.entries[1, 0] == pytest.approx((49 + 16) / 0.25)

    def test_more_detections_than_rows_rejected(self):
        with pytest.raises(InfeasibleMatchingError):
            build_cost_matrix(
                np.zeros((1, 2)), np.ones(1), np.array([[0.0, 0.0], [1.0, 1.0]])
            )

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            build_cost_matrix(np.zeros((1, 2)), np.zeros(1), np.zeros((1, 2)))


class TestLabelsAndAccuracy:
    def test_assemble_labels(self):
        preds = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        det = np.array([[9.0, 9.0], [8.0, 8.0]])
        match = np.array([1, UNMATCHED, 0])
        labels, mask = assemble_labels(match, det, preds)
        np.testing.assert_array_equal(labels, [[8.0, 8.0], [2.0, 2.0], [9.0, 9.0]])
        np.testing.assert_array_equal(mask, [True, False, True])

    def test_matching_accuracy(self):
        match = np.array([1, UNMATCHED, 0])
        # detection 0's vehicle owns row 2, detection 1's vehicle owns row 0
        assert matching_accuracy(match, np.array([2, 0])) == 1.0
        assert matching_accuracy(match, np.array([0, 2])) == 0.0
        assert matching_accuracy(match, np.array([2, 1])) == 0.5

    def test_accuracy_empty(self):
        assert np.isnan(matching_accuracy(np.array([UNMATCHED]), np.array([])))
