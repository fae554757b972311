"""Training with adaptive widening.

Start from a thin model, then per round: train, estimate task affinity,
lift it to the branches above the active layer, and decide how many
branches to create there. The first decision not to branch freezes the
architecture, which is then trained for ``final_iters`` more iterations.
"""
import copy
import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from django.conf import settings

from .affinity import AffinityState, branch_affinity, record_batch, task_affinity
from .exceptions import ContractViolation, NonFiniteError
from .grouping import find_number_branches
from .model_tree import build_thin, desk_template, tree_backward, tree_forward, widen_at
from .nn_core import LayerSpec, multi_task_bce, sgd_step
from .serializers import TrainConfigSerializer
from .somp_init import somp_init_model

logger = logging.getLogger(__name__)

# RNG stream ids; adaptive rounds use their round index.
FINAL_STREAM = 1_000_000
WIDE_STREAM = 2_000_000
COMPARE_STREAM = 3_000_000

EVAL_CHUNK = 512
TOP_K = 3
SMOOTHING = 20


@dataclass(frozen=True)
class TrainConfig:
    omega: int
    alpha: float
    l0: float
    ema_decay: float
    lr: float
    momentum: float
    batch_size: int
    iters_per_round: int
    final_iters: int
    val_fraction: float
    seed: int

    @classmethod
    def from_settings(cls, **overrides):
        """Defaults from ``settings.BRANCHING`` merged with ``overrides``.

        Raises ``rest_framework.serializers.ValidationError`` for bad values.
        """
        values = dict(settings.BRANCHING['TRAIN_DEFAULTS'])
        values.update({key: value for key, value in overrides.items() if value is not None})
        serializer = TrainConfigSerializer(data=values)
        serializer.is_valid(raise_exception=True)
        return cls(**serializer.validated_data)

    def to_dict(self):
        return asdict(self)


def model_name(cfg):
    return f'Branch-{cfg.omega}-{float(cfg.alpha)}'


@dataclass
class Metrics:
    accuracy: float
    bce: float
    per_task_accuracy: dict
    top_k_recall: float | None
    top_k: int
    param_count: int
    samples: int

    def to_dict(self):
        return asdict(self)


@dataclass
class RoundRecord:
    round: int
    active_layer: int
    p_l: int
    branch_tasks: list
    task_affinity: dict
    branch_affinity: dict
    decision: dict
    widened: bool
    affinity_reset: bool
    train_losses: list
    val_loss: float | None
    param_count: int

    def to_dict(self):
        return asdict(self)


@dataclass
class RunTrace:
    config: dict
    model_name: str
    init: str
    rounds: list = field(default_factory=list)
    final_losses: list = field(default_factory=list)
    metrics: dict | None = None
    partition: list = field(default_factory=list)
    somp: dict = field(default_factory=dict)
    recovery: dict = field(default_factory=dict)

    @property
    def widenings(self):
        return sum(1 for record in self.rounds if record.widened)

    def to_dict(self):
        return {
            'config': self.config,
            'model_name': self.model_name,
            'init': self.init,
            'widenings': self.widenings,
            'rounds': [record.to_dict() for record in self.rounds],
            'final_losses': self.final_losses,
            'metrics': self.metrics,
            'partition': self.partition,
            'somp': self.somp,
            'recovery': self.recovery,
        }

    def curves_csv(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['phase', 'round', 'iteration', 'loss'])
        for record in self.rounds:
            for iteration, loss in enumerate(record.train_losses):
                writer.writerow(['round', record.round, iteration, repr(loss)])
        for iteration, loss in enumerate(self.final_losses):
            writer.writerow(['final', '', iteration, repr(loss)])
        return buffer.getvalue()

    def to_text(self):
        lines = [f'{self.model_name} ({self.init} init)', f'widenings: {self.widenings}']
        for record in self.rounds:
            decision = record.decision
            lines.append(
                f'round {record.round}: layer {record.active_layer} p_l={record.p_l} '
                f'branches={len(record.branch_tasks)} d*={decision["d_star"]} '
                f'widened={"yes" if record.widened else "no"} params={record.param_count}'
            )
            for row in decision['loss_per_d']:
                lines.append(
                    f'  d={row["d"]} creation={row["creation_cost"]:.4f} '
                    f'separation={row["separation_cost"]:.4f} total={row["total"]:.4f}'
                )
        lines.append('output groups: ' + ' | '.join(', '.join(group) for group in self.partition))
        if self.metrics:
            lines.append(f'accuracy {self.metrics["accuracy"]:.4f}, bce {self.metrics["bce"]:.4f}')
        return '\n'.join(lines) + '\n'


def _optimise(tree, stream, cfg, iterations, round_index=None, state=None):
    """Run ``iterations`` momentum-SGD steps in place; returns ``(losses, state)``."""
    losses = []
    for iteration in range(iterations):
        batch = next(stream)
        scores, cache = tree_forward(tree, batch.inputs, 'train')
        loss, grad = multi_task_bce(scores, batch.labels, batch.mask)
        try:
            if not np.isfinite(loss):
                raise NonFiniteError('non-finite training loss')
            if state is not None:
                state = record_batch(state, scores, batch.labels, batch.mask)
            grads = tree_backward(cache, grad)
            for block in tree.blocks():
                for index, (params, layer_grads) in enumerate(zip(block.params, grads[block.id])):
                    if layer_grads:
                        sgd_step(params, layer_grads, cfg.lr, cfg.momentum, layer_name=f'block {block.id}/{index}')
        except NonFiniteError as exc:
            raise exc.located(round_index, iteration) from exc
        losses.append(loss)
        logger.debug('round %s iteration %d loss %.6f', round_index, iteration, loss)
    return losses, state


def train_round(tree, data, cfg, state, round_index):
    """One round of training that also feeds every batch into the affinity state.

    Returns ``(trained tree, state', losses)``; ``tree`` itself is left as is.
    """
    if cfg.iters_per_round < 1:
        raise ContractViolation('iters_per_round must be >= 1')
    if state.task_count != data.task_count:
        raise ContractViolation(f'affinity tracks {state.task_count} tasks, data has {data.task_count}')
    tree = copy.deepcopy(tree)
    stream = data.batches(cfg.batch_size, np.random.default_rng([cfg.seed, round_index]))
    losses, state = _optimise(tree, stream, cfg, cfg.iters_per_round, round_index, state)
    return tree, state, losses


def train_fixed(tree, data, cfg, iterations, stream=FINAL_STREAM):
    """Train a frozen architecture; returns ``(trained copy, losses)``."""
    if iterations < 0:
        raise ContractViolation('iterations must be >= 0')
    tree = copy.deepcopy(tree)
    batches = data.batches(cfg.batch_size, np.random.default_rng([cfg.seed, stream]))
    losses, _ = _optimise(tree, batches, cfg, iterations)
    return tree, losses


def template_for(data, wide=None):
    if wide is not None:
        return [LayerSpec.from_dict(spec) for spec in wide.config['template']]
    return desk_template(data.input_shape)


def train_wide(data, cfg, width):
    """Wide unbranched reference model of thinness ``width`` trained for ``final_iters``."""
    tree = build_thin(template_for(data), width, data.task_count, data.task_names, seed=cfg.seed)
    tree, losses = train_fixed(tree, data, cfg, cfg.final_iters, WIDE_STREAM)
    logger.info('trained wide model (width %d), final loss %s', width, losses[-1] if losses else None)
    return tree, losses


def initial_model(data, cfg, wide=None):
    """Thin model, SOMP-initialised from ``wide`` when given."""
    thin = build_thin(template_for(data, wide), cfg.omega, data.task_count, data.task_names, seed=cfg.seed)
    if wide is None:
        return thin, {}
    if list(wide.task_names) != list(data.task_names):
        raise ContractViolation('the wide model was trained on different tasks')
    return somp_init_model(thin, wide)


def adaptive_widen_train(data, cfg, wide=None, val=None):
    """Train with adaptive widening; returns ``(final tree, RunTrace)``."""
    tree, selections = initial_model(data, cfg, wide)
    trace = RunTrace(
        config=cfg.to_dict(),
        model_name=model_name(cfg),
        init='somp' if wide is not None else 'random',
        somp={str(level): result.to_dict() for level, result in selections.items()},
    )
    state = AffinityState.empty(data.task_count, cfg.ema_decay)
    round_index = 0
    while tree.active_layer is not None:
        tree, state, losses = train_round(tree, data, cfg, state, round_index)
        affinity = task_affinity(state, data.task_names)
        active = tree.active_layer
        branch_tasks = tree.branch_tasks(tree.upper_level(active))
        lifted = branch_affinity(affinity, branch_tasks)
        p_l = tree.pooling_levels_above(active)
        decision = find_number_branches(lifted, p_l, cfg.l0, cfg.alpha, cfg.seed + round_index, layer=active)
        widened = decision.d_star >= 2
        if widened:
            tree = widen_at(tree, decision.grouping)
            state = AffinityState.empty(data.task_count, cfg.ema_decay)
        trace.rounds.append(RoundRecord(
            round=round_index,
            active_layer=active,
            p_l=p_l,
            branch_tasks=[[data.task_names[task] for task in tasks] for tasks in branch_tasks],
            task_affinity=affinity.to_dict(),
            branch_affinity=lifted.to_dict(),
            decision=decision.to_dict(),
            widened=widened,
            affinity_reset=widened,
            train_losses=losses,
            val_loss=evaluate(tree, val).bce if val is not None else None,
            param_count=tree.param_count(),
        ))
        logger.info(
            'round %d at level %d: d*=%d, %s',
            round_index, active, decision.d_star, 'widened' if widened else 'architecture frozen',
        )
        round_index += 1
        if not widened:
            break

    tree, trace.final_losses = train_fixed(tree, data, cfg, cfg.final_iters, FINAL_STREAM)
    trace.metrics = evaluate(tree, val if val is not None else data).to_dict()
    trace.partition = [[data.task_names[task] for task in group] for group in tree.output_partition()]
    return tree, trace


def predict(tree, inputs):
    """Eval-mode scores, computed in fixed-size chunks."""
    inputs = np.asarray(inputs, dtype=np.float64)
    parts = []
    for start in range(0, inputs.shape[0], EVAL_CHUNK):
        scores, _ = tree_forward(tree, inputs[start:start + EVAL_CHUNK], 'eval')
        parts.append(scores)
    return np.concatenate(parts, axis=0)


def score_metrics(scores, labels, mask=None, task_names=None, param_count=0, top_k=TOP_K):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.ones_like(labels) if mask is None else np.asarray(mask, dtype=np.float64)
    task_names = list(task_names) if task_names else [f'task_{i}' for i in range(labels.shape[1])]
    bce, _ = multi_task_bce(scores, labels, mask)

    correct = ((scores >= 0.5) == (labels == 1.0)) * mask
    labelled = mask.sum(axis=0)
    per_task = {}
    for task, name in enumerate(task_names):
        if labelled[task] > 0:
            per_task[name] = float(correct[:, task].sum() / labelled[task])

    k = min(top_k, labels.shape[1])
    positives = labels * mask
    has_positive = positives.sum(axis=1) > 0
    recall = None
    if np.any(has_positive):
        top = np.argsort(-scores, axis=1, kind='stable')[:, :k]
        hits = np.take_along_axis(positives, top, axis=1).sum(axis=1)
        recall = float(np.mean(hits[has_positive] / positives.sum(axis=1)[has_positive]))

    return Metrics(
        accuracy=float(np.mean(list(per_task.values()))),
        bce=bce,
        per_task_accuracy=per_task,
        top_k_recall=recall,
        top_k=k,
        param_count=int(param_count),
        samples=int(scores.shape[0]),
    )


def evaluate(tree, data):
    return score_metrics(predict(tree, data.inputs), data.labels, data.mask, data.task_names, tree.param_count())


@dataclass
class InitComparison:
    somp_losses: list
    random_losses: list
    target: float
    reached_at: int | None
    somp_initial: float
    random_initial: float

    def to_dict(self):
        return asdict(self)

    def to_csv(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['iteration', 'somp', 'random'])
        for iteration, (somp, random) in enumerate(zip(self.somp_losses, self.random_losses)):
            writer.writerow([iteration, repr(somp), repr(random)])
        return buffer.getvalue()


def _smoothed(losses):
    window = max(1, min(SMOOTHING, len(losses)))
    return np.convolve(losses, np.ones(window) / window, mode='valid')


def compare_initializations(data, wide, cfg, iterations, held_out=None):
    """Train one thin model from SOMP and from random initialisation on the same batches.

    ``reached_at`` is the first iteration at which the SOMP run's smoothed
    loss falls to the random run's final smoothed loss.
    """
    if iterations < 1:
        raise ContractViolation('the comparison needs at least one iteration')
    held_out = held_out if held_out is not None else data
    somp_tree, _ = initial_model(data, cfg, wide)
    random_tree, _ = initial_model(data, cfg)
    somp_initial = evaluate(somp_tree, held_out).bce
    random_initial = evaluate(random_tree, held_out).bce
    _, somp_losses = train_fixed(somp_tree, data, cfg, iterations, COMPARE_STREAM)
    _, random_losses = train_fixed(random_tree, data, cfg, iterations, COMPARE_STREAM)

    somp_curve = _smoothed(somp_losses)
    target = float(_smoothed(random_losses)[-1])
    below = np.flatnonzero(somp_curve <= target)
    window = len(somp_losses) - len(somp_curve) + 1
    reached_at = int(below[0]) + window - 1 if below.size else None
    logger.info('SOMP init reaches the random-init final loss %.4f at iteration %s', target, reached_at)
    return InitComparison(somp_losses, random_losses, target, reached_at, somp_initial, random_initial)
