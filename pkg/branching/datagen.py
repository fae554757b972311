"""Synthetic multi-task data with planted task groups.

Every group owns a random two-stage feature ``P2^T tanh(P1^T view(x))``;
its tasks threshold slightly different linear read-outs of that feature, so
tasks of one group find the same samples hard while tasks of different
groups do not.

Dataset files (``BGD1``) are little-endian: the magic, ``N``, the input rank
and dims, ``T`` (all unsigned 32-bit), then the inputs as float64 in
row-major order, then one byte per label (255 marks an unlabelled entry).
"""
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from django.conf import settings

from .exceptions import ContractViolation, CorruptionError, EmptyDatasetError
from .nn_core import Batch

logger = logging.getLogger(__name__)

MAGIC = b'BGD1'
UNLABELLED = 255
BLOCK = 4


@dataclass(frozen=True)
class SyntheticSpec:
    task_count: int
    group_count: int
    group_assignment: tuple = ()
    input_shape: tuple = (1, 16, 16)
    samples: int = 8000
    label_noise: float = 0.05
    seed: int = 0
    task_spread: float = 0.2
    hidden_width: int = 32
    feature_width: int = 8

    def __post_init__(self):
        if self.task_count < 1:
            raise ContractViolation('task_count must be >= 1')
        if not 1 <= self.group_count <= self.task_count:
            raise ContractViolation(f'group_count must lie in [1, {self.task_count}], got {self.group_count}')
        assignment = tuple(int(g) for g in self.group_assignment) or tuple(
            task * self.group_count // self.task_count for task in range(self.task_count)
        )
        if len(assignment) != self.task_count:
            raise ContractViolation('group_assignment needs one group per task')
        if set(assignment) != set(range(self.group_count)):
            raise ContractViolation('every group must own at least one task')
        if not 0.0 <= self.label_noise < 0.5:
            raise ContractViolation(f'label_noise must lie in [0, 0.5), got {self.label_noise}')
        shape = tuple(int(dim) for dim in self.input_shape)
        if len(shape) not in (1, 3) or min(shape) < 1:
            raise ContractViolation(f'input_shape must be (D,) or (C, H, W), got {shape}')
        if len(shape) == 3 and (shape[1] % BLOCK or shape[2] % BLOCK):
            raise ContractViolation(f'image sides must be divisible by {BLOCK}')
        if self.samples < 1:
            raise ContractViolation('samples must be >= 1')
        object.__setattr__(self, 'group_assignment', assignment)
        object.__setattr__(self, 'input_shape', shape)

    @classmethod
    def from_settings(cls, **overrides):
        values = {**settings.BRANCHING['DATA_DEFAULTS'], **overrides}
        return cls(**values)

    @property
    def task_names(self):
        return [f'task_{i}' for i in range(self.task_count)]

    def to_dict(self):
        values = asdict(self)
        values['group_assignment'] = list(self.group_assignment)
        values['input_shape'] = list(self.input_shape)
        return values


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None
    task_names: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.shape[0] == 0:
            raise EmptyDatasetError('dataset has no samples')
        if self.mask is None:
            self.mask = np.ones_like(self.labels)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.labels.ndim != 2 or self.labels.shape[0] != self.inputs.shape[0]:
            raise ContractViolation(f'labels shape {self.labels.shape} does not match {self.inputs.shape[0]} samples')
        if self.mask.shape != self.labels.shape:
            raise ContractViolation('mask and labels must have the same shape')
        if not self.task_names:
            self.task_names = [f'task_{i}' for i in range(self.labels.shape[1])]
        if len(self.task_names) != self.labels.shape[1]:
            raise ContractViolation('one name per task is required')

    @property
    def size(self):
        return self.inputs.shape[0]

    @property
    def task_count(self):
        return self.labels.shape[1]

    @property
    def input_shape(self):
        return self.inputs.shape[1:]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.inputs[indices], self.labels[indices], self.mask[indices], list(self.task_names))

    def batch(self, indices=None):
        if indices is None:
            return Batch(self.inputs, self.labels, self.mask)
        return Batch(self.inputs[indices], self.labels[indices], self.mask[indices])

    def split(self, fraction, seed):
        """Seeded ``(train, validation)`` split; validation is ``None`` for a zero fraction."""
        if not 0.0 <= fraction < 1.0:
            raise ContractViolation(f'validation fraction must lie in [0, 1), got {fraction}')
        held_out = int(round(self.size * fraction))
        if held_out == 0:
            return self, None
        if held_out >= self.size:
            raise EmptyDatasetError('validation split leaves no training samples')
        order = np.random.default_rng(seed).permutation(self.size)
        return self.subset(np.sort(order[held_out:])), self.subset(np.sort(order[:held_out]))

    def batches(self, batch_size, rng):
        """Endless mini-batch stream, reshuffled every epoch.

        A trailing partial batch is dropped unless the whole set is smaller
        than ``batch_size``.
        """
        if batch_size < 1:
            raise ContractViolation(f'batch_size must be >= 1, got {batch_size}')
        size = min(batch_size, self.size)
        per_epoch = self.size // size
        while True:
            order = rng.permutation(self.size)
            for start in range(0, per_epoch * size, size):
                yield self.batch(order[start:start + size])


def _view(inputs):
    """Flat inputs as they are; images as 4x4 block averages rescaled to unit variance."""
    n = inputs.shape[0]
    if inputs.ndim == 2:
        return inputs
    _, channels, height, width = inputs.shape
    blocks = inputs.reshape(n, channels, height // BLOCK, BLOCK, width // BLOCK, BLOCK)
    return blocks.mean(axis=(3, 5)).reshape(n, -1) * BLOCK


def _planted(spec, rng):
    """Inputs, per-group features and centred task logits.

    Groups read orthogonal slices of the view, so tasks of different groups
    are independent.
    """
    inputs = rng.standard_normal((spec.samples, *spec.input_shape))
    view = _view(inputs)
    if view.shape[1] < spec.group_count:
        raise ContractViolation(f'{view.shape[1]} view dims cannot be shared by {spec.group_count} groups')
    basis, _ = np.linalg.qr(rng.standard_normal((view.shape[1], view.shape[1])))
    features = []
    directions = []
    for dims in np.array_split(np.arange(view.shape[1]), spec.group_count):
        first = basis[:, dims] @ rng.standard_normal((dims.size, spec.hidden_width)) / np.sqrt(dims.size)
        second = rng.standard_normal((spec.hidden_width, spec.feature_width)) / np.sqrt(spec.hidden_width)
        features.append(np.tanh(view @ first) @ second)
        directions.append(rng.standard_normal(spec.feature_width))

    logits = np.empty((spec.samples, spec.task_count))
    for task, group in enumerate(spec.group_assignment):
        readout = directions[group] + spec.task_spread * rng.standard_normal(spec.feature_width)
        score = features[group] @ readout
        logits[:, task] = score - np.median(score)
    return inputs, features, logits


def generate(spec):
    """Seeded dataset plus its truth record (planted task groups)."""
    rng = np.random.default_rng(spec.seed)
    inputs, _, logits = _planted(spec, rng)
    labels = (logits > 0).astype(np.float64)
    flips = rng.random(labels.shape) < spec.label_noise
    labels[flips] = 1.0 - labels[flips]

    dataset = Dataset(inputs, labels, None, spec.task_names)
    truth = {
        'task_names': spec.task_names,
        'group_assignment': list(spec.group_assignment),
        'group_count': spec.group_count,
        'spec': spec.to_dict(),
    }
    logger.info(
        'generated %d samples, %d tasks in %d groups, positive rates %s',
        spec.samples, spec.task_count, spec.group_count, np.round(labels.mean(axis=0), 3).tolist(),
    )
    return dataset, truth


def probe_accuracy(spec):
    """Generator self-check: linear probes on each group's feature, noise off.

    Fits a least-squares probe per task on the first half of the samples and
    returns its held-out accuracy on the second half, keyed by task name.
    """
    spec = replace(spec, label_noise=0.0)
    _, features, logits = _planted(spec, np.random.default_rng(spec.seed))
    half = spec.samples // 2
    if half < 1:
        raise ContractViolation('probing needs at least two samples')
    accuracy = {}
    for task, group in enumerate(spec.group_assignment):
        design = np.hstack([features[group], np.ones((spec.samples, 1))])
        target = np.where(logits[:, task] > 0, 1.0, -1.0)
        coef, *_ = np.linalg.lstsq(design[:half], target[:half], rcond=None)
        predicted = np.where(design[half:] @ coef > 0, 1.0, -1.0)
        accuracy[spec.task_names[task]] = float(np.mean(predicted == target[half:]))
    return accuracy


def save(dataset, path):
    codes = dataset.labels.astype(np.uint8)
    codes[dataset.mask == 0] = UNLABELLED
    header = MAGIC + struct.pack(
        f'<II{len(dataset.input_shape)}II',
        dataset.size,
        len(dataset.input_shape),
        *dataset.input_shape,
        dataset.task_count,
    )
    payload = np.ascontiguousarray(dataset.inputs, dtype='<f8').tobytes() + codes.tobytes()
    Path(path).write_bytes(header + payload)
    logger.info('wrote %d samples to %s', dataset.size, path)


def load(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CorruptionError(f'{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}')
    cursor = 4
    fixed = _unpack(raw, cursor, '<II', path)
    samples, rank = fixed
    cursor += 8
    dims = _unpack(raw, cursor, f'<{rank}I', path)
    cursor += 4 * rank
    (task_count,) = _unpack(raw, cursor, '<I', path)
    cursor += 4
    if samples == 0:
        raise EmptyDatasetError(f'{path}: header declares zero samples')
    if rank not in (1, 3):
        raise CorruptionError(f'{path}: unsupported input rank {rank}')

    per_sample = int(np.prod(dims, dtype=np.int64))
    expected = cursor + samples * per_sample * 8 + samples * task_count
    if len(raw) != expected:
        raise CorruptionError(f'{path}: expected {expected} bytes, found {len(raw)}')
    inputs = np.frombuffer(raw, dtype='<f8', count=samples * per_sample, offset=cursor)
    codes = np.frombuffer(raw, dtype=np.uint8, offset=cursor + samples * per_sample * 8)
    if not np.all((codes <= 1) | (codes == UNLABELLED)):
        raise CorruptionError(f'{path}: label bytes must be 0, 1 or {UNLABELLED}')
    codes = codes.reshape(samples, task_count)
    mask = (codes != UNLABELLED).astype(np.float64)
    labels = np.where(codes == 1, 1.0, 0.0)
    return Dataset(inputs.astype(np.float64).reshape(samples, *dims), labels, mask)


def _unpack(raw, offset, layout, path):
    size = struct.calcsize(layout)
    if len(raw) < offset + size:
        raise CorruptionError(f'{path}: truncated header, expected at least {offset + size} bytes, found {len(raw)}')
    return struct.unpack_from(layout, raw, offset)


def save_truth(truth, path):
    Path(path).write_text(json.dumps(truth, indent=2, sort_keys=True) + '\n')


def load_truth(path):
    try:
        truth = json.loads(Path(path).read_text())
        assignment = [int(group) for group in truth['group_assignment']]
        names = list(truth['task_names'])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f'{path}: malformed truth file: {exc!r}') from exc
    if len(assignment) != len(names):
        raise CorruptionError(f'{path}: {len(names)} task names but {len(assignment)} group entries')
    return {**truth, 'group_assignment': assignment, 'task_names': names}
