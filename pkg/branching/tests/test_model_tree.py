import copy
import json

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from branching.exceptions import ContractViolation, CorruptionError, NoOpWideningError
from branching.model_tree import (
    GroupingFunction,
    build_thin,
    desk_template,
    export_dot,
    export_manifest,
    import_manifest,
    tree_backward,
    tree_forward,
    widen_at,
)
from branching.nn_core import BN_EPS, multi_task_bce

from .test_nn_core import numeric_gradient, relative_error


def small_image_tree(task_count=4, seed=0):
    template = desk_template((1, 8, 8), conv_widths=(4, 4), dense_widths=(8, 8))
    return build_thin(template, 4, task_count, seed=seed)


def random_grouping(rng, c):
    d = int(rng.integers(2, c + 1))
    assignment = np.concatenate([np.arange(d), rng.integers(0, d, c - d)])
    return GroupingFunction(tuple(rng.permutation(assignment)))


class GroupingFunctionTests(SimpleTestCase):
    def test_counts_and_groups(self):
        grouping = GroupingFunction((1, 0, 1))
        self.assertEqual((grouping.c, grouping.d), (3, 2))
        self.assertEqual(grouping.groups(), [[1], [0, 2]])

    def test_must_be_surjective(self):
        with self.assertRaises(ContractViolation):
            GroupingFunction((0, 2, 2))
        with self.assertRaises(ContractViolation):
            GroupingFunction(())


class BuildThinTests(SimpleTestCase):
    def test_desk_image_model(self):
        tree = build_thin(desk_template((1, 16, 16)), 16, 6)
        kinds = [blocks[0].kind for blocks in tree.levels]
        self.assertEqual(kinds, ['conv', 'pool', 'conv', 'pool', 'dense', 'dense', 'head'])
        self.assertEqual([blocks[0].width for blocks in tree.levels[:-1]], [16, None, 16, None, 32, 32])
        self.assertEqual(tree.levels[4][0].weight_spec.in_width, 16 * 4 * 4)
        self.assertEqual(len(tree.levels[-1]), 6)
        self.assertEqual(tree.active_layer, 5)
        self.assertEqual(tree.parameterized_levels(), [0, 2, 4, 5])

    def test_pooling_levels_above(self):
        tree = build_thin(desk_template((1, 16, 16)), 16, 2)
        self.assertEqual([tree.pooling_levels_above(level) for level in (0, 2, 4, 5)], [2, 1, 0, 0])

    def test_widths_never_exceed_the_template(self):
        tree = build_thin(desk_template((10,), dense_widths=(6, 6)), 16, 2)
        self.assertEqual([blocks[0].width for blocks in tree.levels[:-1]], [6, 6])

    def test_invalid_arguments(self):
        with self.assertRaises(ContractViolation):
            build_thin(desk_template((10,)), 0, 2)
        with self.assertRaises(ContractViolation):
            build_thin(desk_template((10,)), 4, 0)
        with self.assertRaises(ContractViolation):
            desk_template((1, 10, 10))

    def test_forward_scores_every_task(self):
        tree = small_image_tree()
        scores, _ = tree_forward(tree, np.random.default_rng(0).standard_normal((3, 1, 8, 8)))
        self.assertEqual(scores.shape, (3, 4))
        self.assertTrue(np.all((scores > 0) & (scores < 1)))


class WidenTests(SimpleTestCase):
    def test_widening_preserves_the_function(self):
        inputs = np.random.default_rng(99).standard_normal((4, 1, 8, 8))
        checked = 0
        for seed in range(13):
            rng = np.random.default_rng(seed)
            tree = small_image_tree(task_count=5, seed=seed)
            before_eval, _ = tree_forward(tree, inputs, 'eval')
            before_train, _ = tree_forward(copy.deepcopy(tree), inputs, 'train')
            while tree.active_layer is not None:
                c = len(tree.levels[tree.upper_level(tree.active_layer)])
                if c < 2:
                    break
                tree = widen_at(tree, random_grouping(rng, c))
                after_eval, _ = tree_forward(tree, inputs, 'eval')
                after_train, _ = tree_forward(copy.deepcopy(tree), inputs, 'train')
                self.assertLessEqual(np.max(np.abs(after_train - before_train)), 1e-12)
                self.assertLessEqual(np.max(np.abs(after_eval - before_eval)), 1e-12)
                checked += 1
        self.assertGreaterEqual(checked, 50)

    def test_active_layer_descends_to_the_next_parameterized_level(self):
        tree = small_image_tree()
        tree = widen_at(tree, GroupingFunction((0, 0, 1, 1)))
        self.assertEqual(tree.active_layer, 4)
        self.assertEqual(tree.output_partition(), [[0, 1], [2, 3]])
        tree = widen_at(tree, GroupingFunction((0, 1)))
        self.assertEqual(tree.active_layer, 2)
        tree = widen_at(tree, GroupingFunction((1, 0)))
        self.assertEqual(len(tree.levels[3]), 2)
        self.assertEqual(tree.active_layer, 0)
        tree.check_partition()

    def test_argument_is_not_modified(self):
        tree = small_image_tree()
        manifest, blob = export_manifest(tree)
        widened = widen_at(tree, GroupingFunction((0, 1, 0, 1)))
        self.assertEqual(export_manifest(tree), (manifest, blob))
        self.assertEqual(widened.param_count(), tree.param_count() + tree.levels[5][0].param_count())

    def test_parameter_count_grows_by_the_cloned_segment(self):
        tree = small_image_tree(task_count=4)
        for grouping in (GroupingFunction((0, 1, 2, 0)), GroupingFunction((0, 1, 1)), GroupingFunction((1, 0))):
            segment = range(tree.active_layer, tree.upper_level(tree.active_layer))
            cloned = sum(tree.levels[level][0].param_count() for level in segment)
            widened = widen_at(tree, grouping)
            self.assertEqual(widened.param_count(), tree.param_count() + (grouping.d - 1) * cloned)
            tree = widened

    def test_single_branch_is_a_no_op(self):
        with self.assertRaises(NoOpWideningError):
            widen_at(small_image_tree(), GroupingFunction.single(4))

    def test_grouping_must_cover_the_junction(self):
        with self.assertRaises(ContractViolation):
            widen_at(small_image_tree(), GroupingFunction((0, 1, 0)))

    def test_nothing_left_to_widen(self):
        tree = small_image_tree()
        tree.active_layer = None
        with self.assertRaises(ContractViolation):
            widen_at(tree, GroupingFunction((0, 1, 0, 1)))


class TreeGradientTests(SimpleTestCase):
    def test_branched_tree_gradients(self):
        template = desk_template((6,), dense_widths=(8, 8))
        for seed in range(5):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(seed)
                tree = build_thin(template, 2, 3, seed=seed)
                tree = widen_at(tree, GroupingFunction((0, 0, 1)))
                tree = widen_at(tree, GroupingFunction((1, 0)))
                x = rng.standard_normal((5, 6))
                labels = rng.integers(0, 2, (5, 3)).astype(float)

                def loss():
                    return multi_task_bce(tree_forward(tree, x, 'train')[0], labels)[0]

                scores, cache = tree_forward(tree, x, 'train')
                _, grad = multi_task_bce(scores, labels)
                grads = tree_backward(cache, grad)
                for block in tree.blocks():
                    for params, layer_grads in zip(block.params, grads[block.id]):
                        for name, analytic in layer_grads.items():
                            numeric = numeric_gradient(loss, getattr(params, name))
                            self.assertLess(relative_error(analytic, numeric), 1e-5, (block.id, name))


class ManifestTests(SimpleTestCase):
    def setUp(self):
        self.tree = widen_at(small_image_tree(), GroupingFunction((0, 1, 1, 0)))

    def test_round_trip_is_bit_exact(self):
        manifest, blob = export_manifest(self.tree)
        restored = import_manifest(manifest, blob)
        self.assertEqual(export_manifest(restored), (manifest, blob))
        inputs = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
        assert_array_equal(tree_forward(restored, inputs, 'eval')[0], tree_forward(self.tree, inputs, 'eval')[0])

    def test_truncated_blob(self):
        manifest, blob = export_manifest(self.tree)
        with self.assertRaises(CorruptionError):
            import_manifest(manifest, blob[:-8])

    def test_not_json(self):
        with self.assertRaises(CorruptionError):
            import_manifest(b'{broken', b'')

    def test_wrong_format(self):
        with self.assertRaises(CorruptionError):
            import_manifest(b'{"format": "other"}', b'')

    def test_manifest_missing_fields(self):
        manifest, blob = export_manifest(self.tree)
        damaged = manifest.replace(b'"leaf_tasks"', b'"leaf_tusks"')
        with self.assertRaises(CorruptionError):
            import_manifest(damaged, blob)

    def test_tensor_shape_must_match_the_layer(self):
        manifest, blob = export_manifest(self.tree)
        doc = json.loads(manifest)
        weight = doc['levels'][0][0]['layers'][0]['tensors'][0]
        self.assertEqual(weight['name'], 'weight')
        rows, cols = weight['shape']
        weight['shape'] = [cols, rows]
        with self.assertRaises(CorruptionError):
            import_manifest(json.dumps(doc).encode(), blob)

    def test_missing_tensor_is_reported(self):
        manifest, blob = export_manifest(self.tree)
        doc = json.loads(manifest)
        doc['levels'][-1][0]['layers'][0]['tensors'] = [
            entry for entry in doc['levels'][-1][0]['layers'][0]['tensors'] if entry['name'] != 'weight'
        ]
        with self.assertRaises(CorruptionError):
            import_manifest(json.dumps(doc).encode(), blob)


class HandWrittenManifestTests(SimpleTestCase):
    weight = np.array([[1.0, -1.0], [0.5, 2.0]])
    bias = np.array([0.1, -0.2])
    gamma = np.array([2.0, 1.0])
    beta = np.array([0.0, 0.5])
    running_mean = np.array([0.5, 0.0])
    running_var = np.array([3.0, 1.0])
    heads = [(np.array([[1.0, 0.5]]), np.array([-0.25])), (np.array([[-1.0, 1.0]]), np.array([0.0]))]

    def build(self):
        parts = []

        def tensor(name, array):
            data = np.asarray(array, dtype='<f8').tobytes()
            entry = {'name': name, 'shape': list(array.shape), 'offset': sum(map(len, parts)), 'nbytes': len(data)}
            parts.append(data)
            return entry

        hidden = {'id': 0, 'parent': None, 'layers': [
            {'kind': 'dense', 'in_width': 2, 'out_width': 2,
             'tensors': [tensor('weight', self.weight), tensor('bias', self.bias)]},
            {'kind': 'batchnorm', 'in_width': 2, 'out_width': 2,
             'tensors': [tensor('gamma', self.gamma), tensor('beta', self.beta),
                         tensor('running_mean', self.running_mean), tensor('running_var', self.running_var)]},
            {'kind': 'relu', 'in_width': 0, 'out_width': 0, 'tensors': []},
        ]}
        heads = [
            {'id': 1 + task, 'parent': 0, 'layers': [
                {'kind': 'sigmoid_head', 'in_width': 2, 'out_width': 1,
                 'tensors': [tensor('weight', weight), tensor('bias', bias)]},
            ]}
            for task, (weight, bias) in enumerate(self.heads)
        ]
        doc = {
            'format': 'branchnet-manifest',
            'version': 1,
            'task_names': ['left', 'right'],
            'leaf_tasks': {'1': [0], '2': [1]},
            'active_layer': 0,
            'next_id': 3,
            'config': {},
            'levels': [[hidden], heads],
            'blob_bytes': sum(map(len, parts)),
        }
        return json.dumps(doc).encode(), b''.join(parts)

    def test_scores_match_a_direct_computation(self):
        tree = import_manifest(*self.build())
        x = np.array([[1.0, 2.0], [-0.5, 0.25], [0.0, 0.0]])
        z = x @ self.weight.T + self.bias
        h = np.maximum((z - self.running_mean) / np.sqrt(self.running_var + BN_EPS) * self.gamma + self.beta, 0.0)
        expected = np.column_stack([
            1.0 / (1.0 + np.exp(-(h @ weight.T + bias)[:, 0])) for weight, bias in self.heads
        ])
        scores, _ = tree_forward(tree, x, 'eval')
        assert_allclose(scores, expected, rtol=1e-10)
        self.assertEqual(tree.task_names, ['left', 'right'])
        self.assertEqual(tree.param_count(), 6 + 4 + 2 * 3)


class ExportDotTests(SimpleTestCase):
    def test_graph_lists_every_block_and_task(self):
        tree = widen_at(small_image_tree(), GroupingFunction((0, 1, 1, 0)))
        text = export_dot(tree)
        self.assertTrue(text.startswith('digraph'))
        for name in tree.task_names:
            self.assertIn(name, text)
        self.assertEqual(text.count('->'), sum(1 for _ in tree.blocks()))

    def test_widened_level_and_heads_are_counted(self):
        tree = build_thin(desk_template((10,), dense_widths=(6, 6)), 4, 7)
        tree = widen_at(tree, GroupingFunction((0, 1, 2, 0, 1, 2, 0)))
        sections, current = {}, None
        for line in export_dot(tree).splitlines():
            if line.startswith('  subgraph level_'):
                current = int(line.split('_')[1].split()[0])
                sections[current] = []
            elif line == '  }':
                current = None
            elif current is not None:
                sections[current].append(line)
        self.assertEqual(sum('[shape=box' in line for line in sections[1]), 3)
        self.assertEqual(sum('[shape=ellipse' in line for line in sections[2]), 7)
        self.assertEqual(len(sections[0]), 2)
