"""Choosing how many branches to create at a junction.

Candidate groupings come from spectral clustering of the branch affinity.
Each candidate is priced by a creation cost that doubles after every
pooling level above the junction plus ``alpha`` times its separation cost.
"""
import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from .exceptions import ContractViolation
from .linalg import kmeans, sym_eig
from .model_tree import GroupingFunction

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossRow:
    d: int
    creation_cost: float
    separation_cost: float
    total: float
    assignment: tuple

    def to_dict(self):
        return {
            'd': self.d,
            'creation_cost': self.creation_cost,
            'separation_cost': self.separation_cost,
            'total': self.total,
            'assignment': list(self.assignment),
        }


@dataclass(frozen=True)
class WideningDecision:
    layer: int | None
    d_star: int
    grouping: GroupingFunction
    loss_per_d: tuple

    def to_dict(self):
        return {
            'layer': self.layer,
            'd_star': self.d_star,
            'grouping': list(self.grouping.assignment),
            'loss_per_d': [row.to_dict() for row in self.loss_per_d],
        }

    @classmethod
    def from_dict(cls, data):
        rows = tuple(
            LossRow(row['d'], row['creation_cost'], row['separation_cost'], row['total'], tuple(row['assignment']))
            for row in data['loss_per_d']
        )
        return cls(data['layer'], data['d_star'], GroupingFunction(tuple(data['grouping'])), rows)

    def to_csv(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['d', 'creation_cost', 'separation_cost', 'total', 'assignment'])
        for row in self.loss_per_d:
            writer.writerow([
                row.d,
                repr(row.creation_cost),
                repr(row.separation_cost),
                repr(row.total),
                ' '.join(str(group) for group in row.assignment),
            ])
        return buffer.getvalue()


def spectral_cluster(a_b, d, seed):
    """Group the ``c`` branches of ``a_b`` into ``d`` clusters.

    Uses the symmetric normalised Laplacian, its ``d`` eigenvectors of
    smallest eigenvalue with unit-normalised rows, and k-means. Group labels
    are renumbered in order of first appearance.
    """
    c = a_b.size
    if not 1 <= d <= c:
        raise ContractViolation(f'd must lie in [1, {c}], got {d}')
    if d == 1:
        return GroupingFunction.single(c)
    if d == c:
        return GroupingFunction.identity(c)

    similarity = a_b.values
    degree = similarity.sum(axis=1)
    inv_sqrt = np.zeros(c)
    inv_sqrt[degree > 0] = 1.0 / np.sqrt(degree[degree > 0])
    laplacian = np.eye(c) - inv_sqrt[:, None] * similarity * inv_sqrt[None, :]
    _, vectors = sym_eig(laplacian)
    embedding = vectors[:, :d].copy()
    norms = np.linalg.norm(embedding, axis=1)
    nonzero = norms > 0
    embedding[nonzero] /= norms[nonzero, None]

    labels = kmeans(embedding, d, seed)
    renumbered = {}
    for label in labels:
        renumbered.setdefault(int(label), len(renumbered))
    return GroupingFunction(tuple(renumbered[int(label)] for label in labels))


def separation_cost(a_b, grouping):
    """Mean over new branches of one minus the mean-of-min affinity inside the group."""
    if grouping.c != a_b.size:
        raise ContractViolation(f'grouping covers {grouping.c} branches, affinity has {a_b.size}')
    costs = []
    for members in grouping.groups():
        block = a_b.values[np.ix_(members, members)]
        costs.append(1.0 - float(block.min(axis=1).mean()))
    return float(np.mean(costs))


def widening_loss(d, p_l, l0, alpha, sep):
    if d < 1:
        raise ContractViolation(f'd must be >= 1, got {d}')
    if l0 <= 0:
        raise ContractViolation(f'l0 must be > 0, got {l0}')
    if alpha < 0:
        raise ContractViolation(f'alpha must be >= 0, got {alpha}')
    return (d - 1) * l0 * 2.0 ** p_l + alpha * sep


def find_number_branches(a_b, p_l, l0, alpha, seed, layer=None):
    """Evaluate every d in ``1..c`` and keep the cheapest (smaller d on ties)."""
    rows = []
    for d in range(1, a_b.size + 1):
        grouping = spectral_cluster(a_b, d, seed)
        sep = separation_cost(a_b, grouping)
        total = widening_loss(d, p_l, l0, alpha, sep)
        rows.append(LossRow(d, (d - 1) * l0 * 2.0 ** p_l, sep, total, grouping.assignment))

    best = min(rows, key=lambda row: (row.total, row.d))
    decision = WideningDecision(layer, best.d, GroupingFunction(best.assignment), tuple(rows))
    logger.info(
        'layer %s: d*=%d of %d (total %.4f, p_l=%d, alpha=%s)',
        layer, best.d, a_b.size, best.total, p_l, alpha,
    )
    return decision


def adjusted_rand_index(first, second):
    """Chance-corrected agreement of two labellings of the same items."""
    first = np.asarray(first)
    second = np.asarray(second)
    if first.shape != second.shape or first.ndim != 1:
        raise ContractViolation('labellings must be one-dimensional and of equal length')
    _, first_codes = np.unique(first, return_inverse=True)
    _, second_codes = np.unique(second, return_inverse=True)
    table = np.zeros((first_codes.max() + 1, second_codes.max() + 1), dtype=np.int64)
    np.add.at(table, (first_codes, second_codes), 1)

    pairs = comb(table, 2).sum()
    rows = comb(table.sum(axis=1), 2).sum()
    cols = comb(table.sum(axis=0), 2).sum()
    total = comb(first.size, 2)
    expected = rows * cols / total if total else 0.0
    maximum = 0.5 * (rows + cols)
    if maximum == expected:
        return 1.0
    return float((pairs - expected) / (maximum - expected))
