"""Task affinity from prediction error margins.

An example is "difficult" for a task when its error margin ``|t - s|`` is at
least the task's running mean margin. Two tasks are affine when they tend to
find the same examples easy or difficult. All expectations are exponential
moving averages over training mini-batches, bias-corrected on read.
"""
import csv
import io
import logging
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import AffinityError, ContractViolation, NonFiniteError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AffinityMatrix:
    values: np.ndarray
    labels: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ContractViolation(f'affinity must be square, got {values.shape}')
        if not np.all(np.isfinite(values)):
            raise ContractViolation('affinity has non-finite entries')
        labels = tuple(self.labels) if self.labels else tuple(str(i) for i in range(values.shape[0]))
        if len(labels) != values.shape[0]:
            raise ContractViolation('one label per row is required')
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'labels', labels)

    @property
    def size(self):
        return self.values.shape[0]

    def to_csv(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow([''] + list(self.labels))
        for label, row in zip(self.labels, self.values):
            writer.writerow([label] + [repr(float(value)) for value in row])
        return buffer.getvalue()

    def to_dict(self):
        return {'labels': list(self.labels), 'values': self.values.tolist()}


@dataclass(frozen=True)
class AffinityState:
    task_count: int
    decay: float
    mean_margin: np.ndarray
    pair_agree: np.ndarray
    margin_updates: np.ndarray
    pair_updates: np.ndarray
    batches_seen: int = 0

    @classmethod
    def empty(cls, task_count, decay):
        if task_count < 1:
            raise ContractViolation('task_count must be >= 1')
        if not 0.0 <= decay < 1.0:
            raise ContractViolation(f'decay must lie in [0, 1), got {decay}')
        return cls(
            task_count=task_count,
            decay=float(decay),
            mean_margin=np.zeros(task_count),
            pair_agree=np.zeros((task_count, task_count)),
            margin_updates=np.zeros(task_count, dtype=np.int64),
            pair_updates=np.zeros((task_count, task_count), dtype=np.int64),
        )

    def corrected_margin(self):
        return _bias_corrected(self.mean_margin, self.margin_updates, self.decay)

    def corrected_agreement(self):
        return _bias_corrected(self.pair_agree, self.pair_updates, self.decay)


def _bias_corrected(values, updates, decay):
    corrected = np.zeros_like(values)
    seen = updates > 0
    corrected[seen] = values[seen] / (1.0 - decay ** updates[seen])
    return corrected


def _ema(current, batch_value, updated, decay):
    return np.where(updated, decay * current + (1.0 - decay) * batch_value, current)


def record_batch(state, scores, labels, mask=None):
    """Fold one mini-batch of predictions into the affinity estimates."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.ones_like(labels) if mask is None else np.asarray(mask, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != state.task_count or scores.shape[0] < 1:
        raise ContractViolation(f'expected scores of shape (N>=1, {state.task_count}), got {scores.shape}')
    if labels.shape != scores.shape or mask.shape != scores.shape:
        raise ContractViolation('scores, labels and mask must share a shape')
    if not np.all(np.isfinite(scores)):
        raise NonFiniteError('non-finite scores reached the affinity estimate')

    margins = np.abs(labels - scores)
    labelled = mask.sum(axis=0)
    has_labels = labelled > 0
    batch_margin = np.zeros(state.task_count)
    batch_margin[has_labels] = (mask * margins).sum(axis=0)[has_labels] / labelled[has_labels]

    # the threshold is the estimate before this batch; a task's first batch uses its own average
    threshold = np.where(state.margin_updates > 0, state.corrected_margin(), batch_margin)
    difficult = (margins >= threshold).astype(np.float64)
    hard = mask * difficult
    easy = mask * (1.0 - difficult)
    joint = mask.T @ mask
    agree = hard.T @ hard + easy.T @ easy
    co_labelled = joint > 0
    batch_agree = np.zeros_like(agree)
    batch_agree[co_labelled] = agree[co_labelled] / joint[co_labelled]

    return replace(
        state,
        mean_margin=_ema(state.mean_margin, batch_margin, has_labels, state.decay),
        pair_agree=_ema(state.pair_agree, batch_agree, co_labelled, state.decay),
        margin_updates=state.margin_updates + has_labels,
        pair_updates=state.pair_updates + co_labelled,
        batches_seen=state.batches_seen + 1,
    )


def task_affinity(state, task_names=None):
    """Bias-corrected probability that two tasks agree on difficulty."""
    if state.batches_seen < 1:
        raise AffinityError('no batches recorded yet')
    if np.any(state.pair_updates == 0):
        pairs = np.argwhere(state.pair_updates == 0)
        raise AffinityError(f'task pairs {pairs.tolist()} were never labelled on the same sample')
    values = np.clip(state.corrected_agreement(), 0.0, 1.0)
    values = 0.5 * (values + values.T)
    np.fill_diagonal(values, 1.0)
    logger.debug('task affinity over %d batches', state.batches_seen)
    return AffinityMatrix(values, tuple(task_names) if task_names else ())


def branch_affinity(a, branch_tasks):
    """Lift task affinity to branches serving groups of tasks.

    For branches k and l the directed score is the mean over tasks of k of
    the minimum affinity to any task of l; the two directions are averaged.
    """
    branch_tasks = [tuple(tasks) for tasks in branch_tasks]
    if not branch_tasks:
        raise ContractViolation('at least one branch is required')
    seen = set()
    for tasks in branch_tasks:
        if not tasks:
            raise ContractViolation('every branch must serve at least one task')
        if seen & set(tasks):
            raise ContractViolation('branches must serve disjoint task sets')
        seen |= set(tasks)

    size = len(branch_tasks)
    directed = np.ones((size, size))
    for k, first in enumerate(branch_tasks):
        for l, second in enumerate(branch_tasks):
            if k != l:
                directed[k, l] = a.values[np.ix_(first, second)].min(axis=1).mean()
    values = 0.5 * (directed + directed.T)
    np.fill_diagonal(values, 1.0)
    labels = tuple('+'.join(a.labels[task] for task in tasks) for tasks in branch_tasks)
    return AffinityMatrix(values, labels)
