"""Thin-model initialisation by simultaneous orthogonal matching pursuit.

For each weight layer of a wide pretrained model, SOMP picks the subset of
filter rows that best reconstructs every row of the layer (in the span of
the chosen rows). The thin layer copies those rows, and the next wide
layer loses the input columns that fed on the discarded rows.
"""
import copy
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, DegenerateMatrixError
from .linalg import as_matrix, least_squares_fit, matmul
from .nn_core import LayerParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SompResult:
    selected: tuple
    residual_history: tuple

    def to_dict(self):
        return {'selected': list(self.selected), 'residual_history': list(self.residual_history)}


def somp_select(w, d_prime):
    """Greedily choose ``d_prime`` rows of ``w`` that span the rest best.

    Each step scores the unselected non-zero rows ``u`` by
    ``||R u^T|| / ||u||`` against the current residual ``R`` (ties go to the
    lowest index), then re-projects ``w`` onto all selected rows.
    """
    w = as_matrix(w, 'w')
    rows = w.shape[0]
    if not 1 <= d_prime <= rows:
        raise ContractViolation(f'd_prime must lie in [1, {rows}], got {d_prime}')
    norms = np.linalg.norm(w, axis=1)
    if not np.any(norms > 0.0):
        raise DegenerateMatrixError('degenerate weight matrix: every row is zero')

    selected = []
    history = []
    residual = w
    for _ in range(d_prime):
        candidates = [i for i in range(rows) if i not in selected and norms[i] > 0.0]
        if candidates:
            scores = np.linalg.norm(residual @ w[candidates].T, axis=0) / norms[candidates]
            pick = candidates[int(np.argmax(scores))]
        else:
            # only zero rows remain; they cannot change the residual
            pick = next(i for i in range(rows) if i not in selected)
        selected.append(pick)
        coefficients, error = least_squares_fit(w, w[selected])
        residual = w - matmul(coefficients, w[selected])
        history.append(error)
    return SompResult(tuple(selected), tuple(history))


def somp_init_model(thin, wide):
    """Initialise an unbranched thin tree from an unbranched wide tree.

    Returns ``(initialised tree, {level: SompResult})``. Levels are processed
    from the input upwards; heads are only column-truncated.
    """
    if len(thin.levels) != len(wide.levels) or thin.task_count != wide.task_count:
        raise ContractViolation('thin and wide models must share levels and tasks')
    result = copy.deepcopy(thin)
    selections = {}
    keep = None
    previous_width = None

    for level in range(result.output_level):
        thin_block, wide_block = _single_block(result, level), _single_block(wide, level)
        if [spec.kind for spec in thin_block.specs] != [spec.kind for spec in wide_block.specs]:
            raise ContractViolation(f'level {level} has different layers in the thin and wide models')
        if not thin_block.has_weights:
            continue

        index = next(i for i, spec in enumerate(wide_block.specs) if spec.has_weights)
        thin_spec, wide_spec = thin_block.specs[index], wide_block.specs[index]
        if thin_spec.out_width > wide_spec.out_width:
            raise ContractViolation(
                f'level {level}: thin width {thin_spec.out_width} exceeds wide width {wide_spec.out_width}'
            )
        wide_params = wide_block.params[index]
        weight = _truncate_columns(wide_params.weight, keep, previous_width)
        if weight.shape[1] != thin_block.params[index].weight.shape[1]:
            raise ContractViolation(
                f'level {level}: truncated wide input has {weight.shape[1]} columns, '
                f'thin layer expects {thin_block.params[index].weight.shape[1]}'
            )

        selection = somp_select(weight, thin_spec.out_width)
        selections[level] = selection
        rows = sorted(selection.selected)
        params = []
        for spec, source in zip(wide_block.specs, wide_block.params):
            if spec.has_weights:
                params.append(LayerParams(weight=weight[rows].copy(), bias=source.bias[rows].copy()))
            elif spec.has_params:
                params.append(source.select_rows(rows))
            else:
                params.append(LayerParams())
        thin_block.params = params
        logger.info(
            'level %d: kept %d of %d filters, residual %.6g',
            level, len(rows), wide_spec.out_width, selection.residual_history[-1],
        )
        keep, previous_width = rows, wide_spec.out_width

    thin_heads = _heads_by_task(result)
    wide_heads = _heads_by_task(wide)
    for task, head in thin_heads.items():
        source = wide_heads[task].params[0]
        weight = _truncate_columns(source.weight, keep, previous_width)
        if weight.shape != head.params[0].weight.shape:
            raise ContractViolation(f'head of task {task}: truncated shape {weight.shape} does not fit')
        head.params = [LayerParams(weight=weight, bias=source.bias.copy())]
    return result, selections


def _single_block(tree, level):
    blocks = tree.levels[level]
    if len(blocks) != 1:
        raise ContractViolation(f'SOMP initialisation needs unbranched models, level {level} is branched')
    return blocks[0]


def _heads_by_task(tree):
    heads = {}
    for head in tree.levels[tree.output_level]:
        tasks = tree.leaf_tasks[head.id]
        if len(tasks) != 1:
            raise ContractViolation('every head must serve exactly one task')
        heads[next(iter(tasks))] = head
    return heads


def _truncate_columns(weight, keep, previous_width):
    """Keep the input columns fed by the retained units of the previous layer.

    Inputs are channel-major, so each retained unit owns a contiguous group of
    ``columns / previous_width`` columns: 9 for a conv kernel, H*W after a
    flatten, 1 between dense layers.
    """
    if keep is None:
        return weight.copy()
    group, remainder = divmod(weight.shape[1], previous_width)
    if remainder:
        raise ContractViolation(f'{weight.shape[1]} input columns do not split into {previous_width} groups')
    columns = [unit * group + offset for unit in keep for offset in range(group)]
    return weight[:, columns].copy()
