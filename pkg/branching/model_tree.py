"""The branched multi-task network.

A tree is a list of levels ordered from the input to the output. Each level
holds one or more blocks; a block is a stage of layers (a conv or dense
layer with its batch norm and ReLU, a 2x2 max pool, or a one-unit sigmoid
head) plus a link to its parent block on the level below. Level 0 blocks
read the data. The output level holds one head per task.

Widening happens at the single block of the active layer: it is cloned
once per new branch and the branches above are re-parented onto the clones,
which leaves the computed function unchanged.
"""
import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from .exceptions import ContractViolation, CorruptionError, NoOpWideningError
from .nn_core import LayerKind, LayerParams, LayerSpec, init_params, layer_backward, layer_forward, param_shapes

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = 'branchnet-manifest'
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class GroupingFunction:
    """Assigns each of ``c`` existing branches to one of ``d`` new branches."""

    assignment: tuple

    def __post_init__(self):
        assignment = tuple(int(value) for value in self.assignment)
        if not assignment:
            raise ContractViolation('a grouping needs at least one branch')
        d = max(assignment) + 1
        if min(assignment) < 0 or set(assignment) != set(range(d)):
            raise ContractViolation(f'grouping {assignment} is not surjective onto {d} branches')
        object.__setattr__(self, 'assignment', assignment)

    @property
    def c(self):
        return len(self.assignment)

    @property
    def d(self):
        return max(self.assignment) + 1

    def groups(self):
        return [[i for i, g in enumerate(self.assignment) if g == group] for group in range(self.d)]

    @classmethod
    def single(cls, c):
        return cls((0,) * c)

    @classmethod
    def identity(cls, c):
        return cls(tuple(range(c)))


@dataclass
class Block:
    id: int
    specs: tuple
    params: list
    parent: int | None

    @property
    def weight_spec(self):
        for spec in self.specs:
            if spec.has_weights:
                return spec
        return None

    @property
    def has_weights(self):
        return self.weight_spec is not None

    @property
    def kind(self):
        spec = self.weight_spec
        if spec is None:
            return 'pool'
        return {LayerKind.CONV2D: 'conv', LayerKind.DENSE: 'dense', LayerKind.SIGMOID_HEAD: 'head'}[spec.kind]

    @property
    def width(self):
        spec = self.weight_spec
        return spec.out_width if spec is not None else None

    def param_count(self):
        return sum(params.count() for params in self.params)

    def clone(self, block_id, parent):
        return Block(block_id, self.specs, [params.copy() for params in self.params], parent)


@dataclass
class ModelTree:
    levels: list
    leaf_tasks: dict
    active_layer: int | None
    task_names: list
    config: dict = field(default_factory=dict)
    next_id: int = 0

    @property
    def task_count(self):
        return len(self.task_names)

    @property
    def output_level(self):
        return len(self.levels) - 1

    def blocks(self):
        for blocks in self.levels:
            yield from blocks

    def block(self, block_id):
        for candidate in self.blocks():
            if candidate.id == block_id:
                return candidate
        raise KeyError(block_id)

    def is_parameterized(self, level):
        return self.levels[level][0].has_weights

    def parameterized_levels(self):
        """Hidden levels holding a conv or dense layer, bottom first."""
        return [level for level in range(self.output_level) if self.is_parameterized(level)]

    def pooling_levels_above(self, level):
        return sum(1 for above in range(level + 1, len(self.levels)) if self.levels[above][0].kind == 'pool')

    def upper_level(self, level):
        for above in range(level + 1, len(self.levels)):
            if self.is_parameterized(above):
                return above
        raise ContractViolation(f'no parameterized level above {level}')

    def level_below(self, level):
        lower = [candidate for candidate in self.parameterized_levels() if candidate < level]
        return lower[-1] if lower else None

    def children(self, block_id):
        return [candidate for candidate in self.blocks() if candidate.parent == block_id]

    def tasks_under(self, block_id):
        if block_id in self.leaf_tasks:
            return frozenset(self.leaf_tasks[block_id])
        tasks = frozenset()
        for child in self.children(block_id):
            tasks |= self.tasks_under(child.id)
        return tasks

    def branch_tasks(self, level):
        return [tuple(sorted(self.tasks_under(block.id))) for block in self.levels[level]]

    def junction_branches(self):
        """Branches feeding on the junction right above the active layer."""
        if self.active_layer is None:
            return []
        return self.levels[self.upper_level(self.active_layer)]

    def output_partition(self):
        """Task groups formed by the heads' parent blocks, in order of first task."""
        groups = {}
        for head in self.levels[self.output_level]:
            groups.setdefault(head.parent, set()).update(self.leaf_tasks[head.id])
        return sorted((sorted(tasks) for tasks in groups.values()), key=lambda tasks: tasks[0])

    def param_count(self):
        return sum(block.param_count() for block in self.blocks())

    def describe_levels(self):
        described = []
        for level, blocks in enumerate(self.levels):
            described.append({
                'level': level,
                'kind': blocks[0].kind,
                'width': blocks[0].width,
                'pooling_above': self.pooling_levels_above(level),
                'active': level == self.active_layer,
                'blocks': [
                    {
                        'id': block.id,
                        'parent': block.parent,
                        'tasks': [self.task_names[task] for task in sorted(self.tasks_under(block.id))],
                    }
                    for block in blocks
                ],
            })
        return described

    def check_partition(self):
        seen = []
        for tasks in self.leaf_tasks.values():
            seen.extend(tasks)
        if sorted(seen) != list(range(self.task_count)):
            raise ContractViolation('leaf tasks must partition the task set')


def desk_template(input_shape, conv_widths=None, dense_widths=None):
    """Template of the desk-scale network for an input of ``(C, H, W)`` or ``(D,)``.

    Images get Conv, MaxPool, Conv, MaxPool, Dense, Dense; flat inputs get
    Dense, Dense.
    """
    input_shape = tuple(int(dim) for dim in input_shape)
    if len(input_shape) == 3:
        defaults = settings.BRANCHING['IMAGE_TEMPLATE']
        first, second = conv_widths or defaults['conv_widths']
        fc1, fc2 = dense_widths or defaults['dense_widths']
        channels, height, width = input_shape
        if height % 4 or width % 4:
            raise ContractViolation(f'image sides must be divisible by 4, got {input_shape}')
        return [
            LayerSpec.conv2d(channels, first),
            LayerSpec.maxpool(),
            LayerSpec.conv2d(first, second),
            LayerSpec.maxpool(),
            LayerSpec.dense(second * (height // 4) * (width // 4), fc1),
            LayerSpec.dense(fc1, fc2),
        ]
    if len(input_shape) == 1:
        fc1, fc2 = dense_widths or settings.BRANCHING['FLAT_TEMPLATE']['dense_widths']
        return [LayerSpec.dense(input_shape[0], fc1), LayerSpec.dense(fc1, fc2)]
    raise ContractViolation(f'unsupported input shape {input_shape}')


def build_thin(template, omega, task_count, task_names=None, seed=0):
    """Thin-ω version of ``template`` with one sigmoid head per task.

    Conv widths are ``min(omega, template width)``, dense widths
    ``min(2*omega, template width)``. Batch norm and ReLU follow every conv
    and dense layer.
    """
    if task_count < 1:
        raise ContractViolation(f'task_count must be >= 1, got {task_count}')
    if omega < 1:
        raise ContractViolation(f'omega must be >= 1, got {omega}')
    if not template:
        raise ContractViolation('template is empty')
    task_names = list(task_names) if task_names is not None else [f'task_{i}' for i in range(task_count)]
    if len(task_names) != task_count:
        raise ContractViolation('one name per task is required')

    rng = np.random.default_rng(seed)
    levels = []
    next_id = 0
    thin_prev = template_prev = None

    def add_level(specs):
        nonlocal next_id
        parent = levels[-1][0].id if levels else None
        block = Block(next_id, tuple(specs), [init_params(spec, rng) for spec in specs], parent)
        next_id += 1
        levels.append([block])

    for spec in template:
        if spec.kind == LayerKind.CONV2D:
            width = min(omega, spec.out_width)
            in_width = spec.in_width if thin_prev is None else thin_prev
            add_level((LayerSpec.conv2d(in_width, width), LayerSpec.batchnorm(width), LayerSpec.relu()))
        elif spec.kind == LayerKind.DENSE:
            width = min(2 * omega, spec.out_width)
            if thin_prev is None:
                in_width = spec.in_width
            elif spec.in_width % template_prev:
                raise ContractViolation(f'dense input {spec.in_width} is not a multiple of {template_prev}')
            else:
                in_width = thin_prev * (spec.in_width // template_prev)
            add_level((LayerSpec.dense(in_width, width), LayerSpec.batchnorm(width), LayerSpec.relu()))
        elif spec.kind == LayerKind.MAXPOOL:
            add_level((LayerSpec.maxpool(),))
            continue
        else:
            raise ContractViolation(f'templates stop before the heads, found {spec.kind.value}')
        thin_prev, template_prev = width, spec.out_width

    if thin_prev is None:
        raise ContractViolation('template has no weight layer')
    top = levels[-1][0].id
    heads = []
    for _ in range(task_count):
        head_spec = LayerSpec.sigmoid_head(thin_prev, 1)
        heads.append(Block(next_id, (head_spec,), [init_params(head_spec, rng)], top))
        next_id += 1
    levels.append(heads)

    tree = ModelTree(
        levels=levels,
        leaf_tasks={head.id: frozenset({task}) for task, head in enumerate(heads)},
        active_layer=None,
        task_names=task_names,
        config={'omega': omega, 'template': [spec.to_dict() for spec in template], 'init_seed': seed},
        next_id=next_id,
    )
    hidden = tree.parameterized_levels()
    tree.active_layer = hidden[-1] if hidden else None
    return tree


def widen_at(tree, grouping):
    """Clone the active block into ``grouping.d`` copies and re-parent the branches above.

    Parameter-free levels between the active level and the junction travel
    with the clone so the structure stays a tree. Returns a new tree; the
    argument is not modified.
    """
    active = tree.active_layer
    if active is None:
        raise ContractViolation('every level has already been widened')
    upper = tree.upper_level(active)
    if grouping.c != len(tree.levels[upper]):
        raise ContractViolation(
            f'grouping covers {grouping.c} branches, the junction has {len(tree.levels[upper])}'
        )
    if grouping.d == 1:
        raise NoOpWideningError('no-op widening requested')
    if grouping.d > grouping.c:
        raise ContractViolation(f'cannot create {grouping.d} branches from {grouping.c}')

    widened = copy.deepcopy(tree)
    segment = range(active, upper)
    for level in segment:
        if len(widened.levels[level]) != 1:
            raise ContractViolation(f'level {level} is already branched')

    chains = [[widened.levels[level][0] for level in segment]]
    for _ in range(1, grouping.d):
        parent = chains[0][0].parent
        chain = []
        for original in chains[0]:
            clone = original.clone(widened.next_id, parent)
            widened.next_id += 1
            chain.append(clone)
            parent = clone.id
        chains.append(chain)

    for offset, level in enumerate(segment):
        widened.levels[level] = [chain[offset] for chain in chains]
    for branch, block in enumerate(widened.levels[upper]):
        block.parent = chains[grouping.assignment[branch]][-1].id

    widened.active_layer = widened.level_below(active)
    logger.info('widened level %d into %d branches, groups %s', active, grouping.d, grouping.groups())
    return widened


@dataclass
class TreeCache:
    layers: dict
    parents: dict
    order: list
    head_tasks: dict
    shape: tuple


def tree_forward(tree, inputs, mode='train'):
    """Scores ``(N, T)`` in task order plus the cache ``tree_backward`` needs.

    Every block runs once per batch; its output is shared by all children.
    """
    x = np.asarray(inputs, dtype=np.float64)
    outputs = {}
    layers = {}
    for blocks in tree.levels:
        for block in blocks:
            hidden = x if block.parent is None else outputs[block.parent]
            caches = []
            for spec, params in zip(block.specs, block.params):
                hidden, cache = layer_forward(spec, params, hidden, mode)
                caches.append(cache)
            outputs[block.id] = hidden
            layers[block.id] = caches

    scores = np.empty((x.shape[0], tree.task_count))
    head_tasks = {}
    for head in tree.levels[tree.output_level]:
        tasks = sorted(tree.leaf_tasks[head.id])
        scores[:, tasks] = outputs[head.id]
        head_tasks[head.id] = tasks

    cache = TreeCache(
        layers=layers,
        parents={block.id: block.parent for block in tree.blocks()},
        order=[[block.id for block in blocks] for blocks in tree.levels],
        head_tasks=head_tasks,
        shape=scores.shape,
    )
    return scores, cache


def tree_backward(cache, grad_scores):
    """Per-block, per-layer parameter gradients.

    ``grad_scores`` is the loss gradient with respect to the head logits.
    A shared block receives the sum of the gradients of its children.
    """
    grad_scores = np.asarray(grad_scores, dtype=np.float64)
    if grad_scores.shape != cache.shape:
        raise ContractViolation(f'gradient shape {grad_scores.shape} does not match scores {cache.shape}')

    pending = {head: grad_scores[:, tasks] for head, tasks in cache.head_tasks.items()}
    grads = {}
    for level in reversed(cache.order):
        for block_id in level:
            if block_id not in pending:
                raise ContractViolation(f'block {block_id} feeds no branch')
            grad = pending.pop(block_id)
            layer_caches = cache.layers[block_id]
            block_grads = [None] * len(layer_caches)
            for index in reversed(range(len(layer_caches))):
                grad, block_grads[index] = layer_backward(layer_caches[index], grad)
            grads[block_id] = block_grads
            parent = cache.parents[block_id]
            if parent is not None:
                pending[parent] = pending[parent] + grad if parent in pending else grad
    return grads


def export_manifest(tree):
    """Serialise a tree as ``(manifest bytes, weight blob)``.

    The manifest is indented JSON; the blob is the concatenation of every
    tensor as little-endian float64, in manifest order.
    """
    parts = []
    offset = 0
    levels = []
    for blocks in tree.levels:
        level_doc = []
        for block in blocks:
            layers = []
            for spec, params in zip(block.specs, block.params):
                tensors = []
                for name, array in params.tensors():
                    data = np.ascontiguousarray(array, dtype='<f8').tobytes()
                    tensors.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'nbytes': len(data)})
                    parts.append(data)
                    offset += len(data)
                layers.append({**spec.to_dict(), 'tensors': tensors})
            level_doc.append({'id': block.id, 'parent': block.parent, 'layers': layers})
        levels.append(level_doc)

    manifest = {
        'format': MANIFEST_FORMAT,
        'version': MANIFEST_VERSION,
        'task_names': list(tree.task_names),
        'leaf_tasks': {str(block_id): sorted(tasks) for block_id, tasks in tree.leaf_tasks.items()},
        'active_layer': tree.active_layer,
        'next_id': tree.next_id,
        'config': tree.config,
        'levels': levels,
        'blob_bytes': offset,
    }
    return json.dumps(manifest, indent=2, sort_keys=True).encode('utf-8') + b'\n', b''.join(parts)


def import_manifest(manifest, blob):
    try:
        doc = json.loads(bytes(manifest).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f'manifest is not valid JSON: {exc}') from exc
    if not isinstance(doc, dict) or doc.get('format') != MANIFEST_FORMAT:
        raise CorruptionError('not a branchnet manifest')
    if doc.get('blob_bytes') != len(blob):
        raise CorruptionError(f'weight blob holds {len(blob)} bytes, manifest declares {doc.get("blob_bytes")}')

    try:
        levels = []
        for level_doc in doc['levels']:
            blocks = []
            for block_doc in level_doc:
                specs, params = [], []
                for layer in block_doc['layers']:
                    spec = LayerSpec.from_dict(layer)
                    specs.append(spec)
                    tensors = {}
                    for entry in layer['tensors']:
                        tensors[entry['name']] = _read_tensor(blob, entry, block_doc['id'])
                    _check_tensors(spec, tensors, block_doc['id'])
                    params.append(LayerParams(**tensors))
                blocks.append(Block(int(block_doc['id']), tuple(specs), params, block_doc['parent']))
            levels.append(blocks)
        tree = ModelTree(
            levels=levels,
            leaf_tasks={int(key): frozenset(tasks) for key, tasks in doc['leaf_tasks'].items()},
            active_layer=doc['active_layer'],
            task_names=list(doc['task_names']),
            config=doc['config'],
            next_id=int(doc['next_id']),
        )
        tree.check_partition()
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f'malformed manifest: {exc!r}') from exc
    return tree


def _check_tensors(spec, tensors, block_id):
    expected = param_shapes(spec)
    for name in sorted(set(expected) | set(tensors)):
        if name not in expected:
            raise CorruptionError(f'block {block_id}: {spec.kind.value} layer has no tensor {name}')
        if name not in tensors:
            raise CorruptionError(f'block {block_id}: {spec.kind.value} layer is missing tensor {name}')
        if tensors[name].shape != expected[name]:
            raise CorruptionError(
                f'block {block_id}: tensor {name} has shape {tensors[name].shape}, '
                f'{spec.kind.value} layer {spec.in_width}->{spec.out_width} needs {expected[name]}'
            )


def _read_tensor(blob, entry, block_id):
    shape = tuple(int(dim) for dim in entry['shape'])
    offset, nbytes = int(entry['offset']), int(entry['nbytes'])
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + nbytes
    if nbytes != 8 * count or offset < 0 or end > len(blob):
        raise CorruptionError(
            f'tensor {entry["name"]} of block {block_id} declares bytes {offset}..{end} '
            f'for shape {shape}, blob has {len(blob)} bytes'
        )
    return np.frombuffer(blob, dtype='<f8', count=count, offset=offset).astype(np.float64).reshape(shape)


def export_dot(tree):
    """Graphviz text of the tree, bottom to top, task names on the leaves."""
    lines = ['digraph branchnet {', '  rankdir=BT;', '  input [shape=box, label="input"];']
    for level, blocks in enumerate(tree.levels):
        lines.append(f'  subgraph level_{level} {{')
        lines.append('    rank=same;')
        for block in blocks:
            if level == tree.output_level:
                names = ', '.join(tree.task_names[task] for task in sorted(tree.leaf_tasks[block.id]))
                lines.append(f'    b{block.id} [shape=ellipse, label="{names}"];')
            else:
                width = f' {block.width}' if block.width is not None else ''
                lines.append(f'    b{block.id} [shape=box, label="L{level} {block.kind}{width}"];')
        lines.append('  }')
    for block in tree.blocks():
        source = 'input' if block.parent is None else f'b{block.parent}'
        lines.append(f'  {source} -> b{block.id};')
    lines.append('}')
    return '\n'.join(lines) + '\n'
