import dataclasses

import numpy as np
from django.test import SimpleTestCase, tag
from numpy.testing import assert_array_equal
from rest_framework.serializers import ValidationError

from branching.affinity import AffinityState
from branching.datagen import Dataset, SyntheticSpec, generate
from branching.exceptions import ContractViolation, NonFiniteError
from branching.grouping import adjusted_rand_index
from branching.model_tree import build_thin, desk_template, export_manifest
from branching.trainer import (
    TrainConfig,
    adaptive_widen_train,
    compare_initializations,
    evaluate,
    model_name,
    score_metrics,
    train_fixed,
    train_round,
    train_wide,
)


def small_data(seed=0):
    spec = SyntheticSpec(task_count=4, group_count=2, input_shape=(16,), samples=256, seed=seed)
    return generate(spec)[0]


def small_config(**overrides):
    values = {'omega': 2, 'iters_per_round': 20, 'final_iters': 10, 'batch_size': 32, 'val_fraction': 0.0}
    return TrainConfig.from_settings(**{**values, **overrides})


def thin_tree(data):
    return build_thin(desk_template(data.input_shape), 2, data.task_count, data.task_names, seed=0)


class TrainConfigTests(SimpleTestCase):
    def test_defaults_come_from_settings(self):
        cfg = TrainConfig.from_settings()
        self.assertEqual(cfg.omega, 16)
        self.assertEqual(cfg.ema_decay, 0.99)
        self.assertEqual(model_name(cfg), 'Branch-16-2.0')

    def test_none_overrides_keep_the_default(self):
        self.assertEqual(TrainConfig.from_settings(alpha=None).alpha, 2.0)

    def test_invalid_values(self):
        for overrides in ({'omega': 0}, {'alpha': -1.0}, {'l0': 0.0}, {'ema_decay': 1.0}, {'momentum': 1.0}):
            with self.subTest(overrides=overrides), self.assertRaises(ValidationError):
                TrainConfig.from_settings(**overrides)

    def test_model_name(self):
        self.assertEqual(model_name(small_config(alpha=0.5)), 'Branch-2-0.5')


class TrainRoundTests(SimpleTestCase):
    def setUp(self):
        self.data = small_data()
        self.cfg = small_config()

    def test_round_needs_an_iteration(self):
        cfg = dataclasses.replace(self.cfg, iters_per_round=0)
        with self.assertRaises(ContractViolation):
            train_round(thin_tree(self.data), self.data, cfg, AffinityState.empty(4, 0.99), 0)

    def test_zero_learning_rate_still_tracks_affinity(self):
        tree = thin_tree(self.data)
        cfg = dataclasses.replace(self.cfg, lr=0.0)
        trained, state, losses = train_round(tree, self.data, cfg, AffinityState.empty(4, 0.99), 0)
        self.assertEqual(len(losses), 20)
        self.assertEqual(state.batches_seen, 20)
        for before, after in zip(tree.blocks(), trained.blocks()):
            for old, new in zip(before.params, after.params):
                for name, array in old.trainable().items():
                    assert_array_equal(new.trainable()[name], array)

    def test_input_tree_is_not_modified(self):
        tree = thin_tree(self.data)
        before = export_manifest(tree)
        train_round(tree, self.data, self.cfg, AffinityState.empty(4, 0.99), 0)
        self.assertEqual(export_manifest(tree), before)

    def test_non_finite_weights_report_where_training_stopped(self):
        tree = thin_tree(self.data)
        tree.levels[0][0].params[0].weight[0, 0] = np.nan
        with self.assertRaises(NonFiniteError) as raised:
            train_round(tree, self.data, self.cfg, AffinityState.empty(4, 0.99), 3)
        self.assertEqual(raised.exception.round_index, 3)
        self.assertEqual(raised.exception.iteration, 0)

    def test_affinity_must_track_the_same_tasks(self):
        with self.assertRaises(ContractViolation):
            train_round(thin_tree(self.data), self.data, self.cfg, AffinityState.empty(3, 0.99), 0)

    def test_a_round_lowers_the_loss(self):
        lowered = 0
        for seed in range(10):
            data = small_data(seed)
            tree = thin_tree(data)
            cfg = small_config(iters_per_round=50, seed=seed)
            trained, _, _ = train_round(tree, data, cfg, AffinityState.empty(4, 0.99), 0)
            lowered += evaluate(trained, data).bce <= evaluate(tree, data).bce
        self.assertGreaterEqual(lowered, 9)

    def test_zero_iterations_of_fixed_training(self):
        tree = thin_tree(self.data)
        trained, losses = train_fixed(tree, self.data, self.cfg, 0)
        self.assertEqual(losses, [])
        self.assertIsNot(trained, tree)
        self.assertEqual(export_manifest(trained), export_manifest(tree))


@tag('slow')
class AdaptiveWidenTrainTests(SimpleTestCase):
    def setUp(self):
        self.data = small_data()

    def test_zero_alpha_never_widens(self):
        tree, trace = adaptive_widen_train(self.data, small_config(alpha=0.0))
        self.assertEqual(trace.widenings, 0)
        self.assertEqual(len(trace.rounds), 1)
        self.assertEqual(trace.rounds[0].decision['d_star'], 1)
        self.assertEqual(trace.partition, [self.data.task_names])
        self.assertEqual(len(trace.final_losses), 10)
        self.assertEqual(len(tree.levels[1]), 1)

    def test_huge_alpha_gives_every_task_its_own_branch(self):
        tree, trace = adaptive_widen_train(self.data, small_config(alpha=1e6))
        self.assertEqual(trace.rounds[0].decision['d_star'], 4)
        self.assertEqual(trace.widenings, 2)
        self.assertIsNone(tree.active_layer)
        self.assertEqual(trace.partition, [[name] for name in self.data.task_names])
        self.assertTrue(all(record.affinity_reset for record in trace.rounds))
        counts = [record.param_count for record in trace.rounds]
        self.assertEqual(counts, sorted(counts))
        self.assertEqual(trace.metrics['param_count'], tree.param_count())

    def test_same_seed_gives_the_same_run(self):
        cfg = small_config(alpha=5.0)
        first_tree, first = adaptive_widen_train(self.data, cfg)
        second_tree, second = adaptive_widen_train(self.data, cfg)
        self.assertEqual(first.to_dict(), second.to_dict())
        self.assertEqual(export_manifest(first_tree), export_manifest(second_tree))

    def test_validation_split_fills_the_round_losses(self):
        train, val = self.data.split(0.25, seed=0)
        _, trace = adaptive_widen_train(train, small_config(alpha=0.0), val=val)
        self.assertIsNotNone(trace.rounds[0].val_loss)
        self.assertEqual(trace.metrics['samples'], val.size)

    def test_trace_renderings(self):
        _, trace = adaptive_widen_train(self.data, small_config(alpha=0.0))
        self.assertEqual(trace.curves_csv().splitlines()[0], 'phase,round,iteration,loss')
        self.assertEqual(len(trace.curves_csv().splitlines()), 1 + 20 + 10)
        text = trace.to_text()
        self.assertTrue(text.startswith('Branch-2-0.0 (random init)'))
        self.assertIn('widenings: 0', text)

    def test_somp_initialised_run(self):
        cfg = small_config(alpha=0.0, final_iters=5)
        wide, wide_losses = train_wide(self.data, cfg, 4)
        self.assertEqual(len(wide_losses), 5)
        _, trace = adaptive_widen_train(self.data, cfg, wide=wide)
        self.assertEqual(trace.init, 'somp')
        self.assertTrue(trace.somp)


class ScoreMetricsTests(SimpleTestCase):
    labels = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]])

    def test_perfect_scores(self):
        metrics = score_metrics(self.labels, self.labels, param_count=7)
        self.assertEqual(metrics.accuracy, 1.0)
        self.assertEqual(metrics.top_k_recall, 1.0)
        self.assertEqual(metrics.top_k, 3)
        self.assertEqual((metrics.param_count, metrics.samples), (7, 3))
        self.assertLess(metrics.bce, 1e-6)

    def test_uninformative_scores(self):
        metrics = score_metrics(np.full(self.labels.shape, 0.5), self.labels, top_k=1)
        self.assertAlmostEqual(metrics.bce, np.log(2.0))
        self.assertAlmostEqual(metrics.per_task_accuracy['task_0'], 1 / 3)
        self.assertAlmostEqual(metrics.top_k_recall, 0.5)

    def test_unlabelled_task_is_left_out(self):
        mask = np.ones_like(self.labels)
        mask[:, 3] = 0.0
        metrics = score_metrics(self.labels, self.labels, mask, ['a', 'b', 'c', 'd'])
        self.assertEqual(sorted(metrics.per_task_accuracy), ['a', 'b', 'c'])

    def test_evaluate_uses_the_tree(self):
        data = small_data()
        metrics = evaluate(thin_tree(data), data)
        self.assertEqual(metrics.samples, data.size)
        self.assertEqual(set(metrics.per_task_accuracy), set(data.task_names))

    def test_random_model_on_balanced_labels_is_at_chance(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.standard_normal((2000, 16)), rng.integers(0, 2, (2000, 4)))
        metrics = evaluate(thin_tree(data), data)
        self.assertAlmostEqual(metrics.accuracy, 0.5, delta=0.05)


class CompareInitializationsTests(SimpleTestCase):
    def test_both_runs_see_the_same_number_of_iterations(self):
        data = small_data()
        cfg = small_config(final_iters=5)
        wide, _ = train_wide(data, cfg, 4)
        comparison = compare_initializations(data, wide, cfg, 30)
        self.assertEqual(len(comparison.somp_losses), 30)
        self.assertEqual(len(comparison.random_losses), 30)
        if comparison.reached_at is not None:
            self.assertTrue(19 <= comparison.reached_at < 30)
        self.assertEqual(comparison.to_csv().splitlines()[0], 'iteration,somp,random')
        with self.assertRaises(ContractViolation):
            compare_initializations(data, wide, cfg, 0)


def planted_labels(partition, task_count):
    labels = np.empty(task_count, dtype=np.int64)
    for group, tasks in enumerate(partition):
        labels[tasks] = group
    return labels


@tag('slow')
class PlantedGroupRecoveryTests(SimpleTestCase):
    def test_output_branches_follow_the_planted_groups(self):
        recovered = 0
        for seed in range(10):
            data, truth = generate(SyntheticSpec(task_count=6, group_count=2, samples=8000, label_noise=0.05, seed=seed))
            cfg = TrainConfig.from_settings(omega=16, alpha=2.0, l0=0.35, final_iters=0, seed=seed)
            tree, _ = adaptive_widen_train(data, cfg)
            learned = planted_labels(tree.output_partition(), data.task_count)
            recovered += adjusted_rand_index(truth['group_assignment'], learned) >= 0.9
        self.assertGreaterEqual(recovered, 8)


@tag('slow')
class SompConvergenceTests(SimpleTestCase):
    iterations = 300

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.comparisons = []
        for seed in range(10):
            data, _ = generate(SyntheticSpec(task_count=6, group_count=2, samples=4000, seed=seed))
            train, val = data.split(0.1, seed=seed)
            wide, _ = train_wide(train, TrainConfig.from_settings(final_iters=400, seed=seed), 64)
            cfg = TrainConfig.from_settings(omega=16, seed=seed)
            cls.comparisons.append(compare_initializations(train, wide, cfg, cls.iterations, held_out=val))

    def test_somp_start_has_the_lower_held_out_loss(self):
        lower = sum(comparison.somp_initial < comparison.random_initial for comparison in self.comparisons)
        self.assertGreaterEqual(lower, 9)

    def test_somp_reaches_the_random_final_loss_sooner(self):
        sooner = sum(
            comparison.reached_at is not None and comparison.reached_at < self.iterations - 1
            for comparison in self.comparisons
        )
        self.assertGreaterEqual(sooner, 7)
