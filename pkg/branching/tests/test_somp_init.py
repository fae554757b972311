from itertools import combinations

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from branching.exceptions import ContractViolation, DegenerateMatrixError
from branching.linalg import least_squares_fit
from branching.model_tree import GroupingFunction, build_thin, desk_template, export_manifest, tree_forward, widen_at
from branching.somp_init import somp_init_model, somp_select


def best_subset_residual(w, d_prime):
    return min(least_squares_fit(w, w[list(rows)])[1] for rows in combinations(range(w.shape[0]), d_prime))


class SompSelectTests(SimpleTestCase):
    def test_complete_basis_has_no_residual(self):
        w = np.random.default_rng(0).standard_normal((5, 8))
        result = somp_select(w, 5)
        self.assertEqual(sorted(result.selected), list(range(5)))
        self.assertLessEqual(result.residual_history[-1], 1e-10)

    def test_spanning_pair_is_found(self):
        w = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        result = somp_select(w, 2)
        self.assertEqual(len(set(result.selected)), 2)
        self.assertLessEqual(result.residual_history[-1], 1e-12)
        self.assertLessEqual(best_subset_residual(w, 2), 1e-12)

    def test_first_pick_is_the_best_single_row(self):
        w = np.random.default_rng(3).standard_normal((8, 6))
        result = somp_select(w, 1)
        self.assertAlmostEqual(result.residual_history[0], best_subset_residual(w, 1), places=10)

    def test_residual_history_never_increases(self):
        for seed in range(20):
            w = np.random.default_rng(seed).standard_normal((8, 6))
            history = somp_select(w, 6).residual_history
            for earlier, later in zip(history, history[1:]):
                self.assertLessEqual(later, earlier + 1e-12)

    def test_greedy_is_close_to_exhaustive(self):
        for d_prime in (1, 2, 3):
            close = 0
            for seed in range(100):
                w = np.random.default_rng(seed).standard_normal((8, 6))
                greedy = somp_select(w, d_prime).residual_history[-1]
                if greedy <= 1.5 * best_subset_residual(w, d_prime):
                    close += 1
            self.assertGreaterEqual(close, 95, d_prime)

    def test_exact_recovery_when_a_spanning_subset_exists(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            basis = rng.standard_normal((3, 6))
            w = np.vstack([basis, rng.standard_normal((5, 3)) @ basis])
            self.assertLessEqual(somp_select(w, 3).residual_history[-1], 1e-10)

    def test_permuting_rows_permutes_the_selection(self):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((8, 6))
        perm = rng.permutation(8)
        original = somp_select(w, 3).selected
        permuted = somp_select(w[perm], 3).selected
        self.assertEqual([int(perm[i]) for i in permuted], list(original))

    def test_zero_rows_are_picked_last(self):
        w = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
        self.assertEqual(somp_select(w, 3).selected[-1], 0)

    def test_degenerate_matrix(self):
        with self.assertRaises(DegenerateMatrixError):
            somp_select(np.zeros((3, 4)), 2)

    def test_selection_size_out_of_range(self):
        with self.assertRaises(ContractViolation):
            somp_select(np.eye(3), 0)
        with self.assertRaises(ContractViolation):
            somp_select(np.eye(3), 4)


class SompInitModelTests(SimpleTestCase):
    def test_equal_widths_copy_the_wide_model(self):
        template = desk_template((1, 8, 8), conv_widths=(4, 4), dense_widths=(8, 8))
        wide = build_thin(template, 4, 3, seed=1)
        thin = build_thin(template, 4, 3, seed=2)
        initialised, selections = somp_init_model(thin, wide)
        self.assertEqual(export_manifest(initialised)[1], export_manifest(wide)[1])
        self.assertEqual(sorted(selections), [0, 2, 4, 5])

    def test_next_layer_loses_the_unselected_column(self):
        template = desk_template((2,), dense_widths=(3, 3))
        wide = build_thin(template, 2, 1, seed=0)
        wide.levels[0][0].params[0].weight = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        thin = build_thin(template, 1, 1, seed=0)
        initialised, selections = somp_init_model(thin, wide)

        first = selections[0]
        self.assertLessEqual(first.residual_history[-1], 1e-12)
        kept = sorted(first.selected)
        self.assertEqual(len(kept), 2)
        assert_array_equal(initialised.levels[0][0].params[0].weight, wide.levels[0][0].params[0].weight[kept])

        rows = sorted(selections[1].selected)
        expected = wide.levels[1][0].params[0].weight[np.ix_(rows, kept)]
        assert_array_equal(initialised.levels[1][0].params[0].weight, expected)
        assert_array_equal(initialised.levels[1][0].params[1].gamma, wide.levels[1][0].params[1].gamma[rows])

    def test_thin_model_runs_after_initialisation(self):
        template = desk_template((1, 8, 8), conv_widths=(8, 8), dense_widths=(16, 16))
        wide = build_thin(template, 8, 3, seed=1)
        thin = build_thin(template, 3, 3, seed=2)
        initialised, _ = somp_init_model(thin, wide)
        scores, _ = tree_forward(initialised, np.random.default_rng(0).standard_normal((2, 1, 8, 8)), 'eval')
        self.assertEqual(scores.shape, (2, 3))
        self.assertEqual(initialised.levels[4][0].params[0].weight.shape, (6, 3 * 2 * 2))

    def test_thin_wider_than_wide_is_rejected(self):
        template = desk_template((4,), dense_widths=(8, 8))
        with self.assertRaises(ContractViolation):
            somp_init_model(build_thin(template, 4, 2), build_thin(template, 2, 2))

    def test_branched_models_are_rejected(self):
        template = desk_template((4,), dense_widths=(8, 8))
        wide = widen_at(build_thin(template, 4, 2), GroupingFunction((0, 1)))
        with self.assertRaises(ContractViolation):
            somp_init_model(build_thin(template, 2, 2), wide)
