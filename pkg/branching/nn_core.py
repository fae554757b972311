"""Layers, losses and the optimizer used inside every block of a model tree.

Convolution is realised with im2col so that the weight matrix of a conv
layer (one vectorised 3x3 filter per row, columns ordered channel, ky, kx)
is multiplied directly against the unfolded input.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from .exceptions import ContractViolation, EmptyBatchError, NonFiniteError

KERNEL = 3
PAD = 1
BN_EPS = 1e-8
BN_DECAY = 0.9
SCORE_CLAMP = 1e-12
MODES = ('train', 'eval')


class LayerKind(str, Enum):
    DENSE = 'dense'
    CONV2D = 'conv2d'
    MAXPOOL = 'maxpool2x2'
    BATCHNORM = 'batchnorm'
    RELU = 'relu'
    SIGMOID_HEAD = 'sigmoid_head'


WEIGHT_KINDS = (LayerKind.DENSE, LayerKind.CONV2D, LayerKind.SIGMOID_HEAD)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_width: int = 0
    out_width: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'kind', LayerKind(self.kind))
        if self.kind in WEIGHT_KINDS:
            if self.in_width < 1 or self.out_width < 1:
                raise ContractViolation(f'{self.kind.value} widths must be >= 1')
        elif self.kind == LayerKind.BATCHNORM:
            if self.in_width < 1 or self.in_width != self.out_width:
                raise ContractViolation('batchnorm needs matching channel counts >= 1')

    @classmethod
    def dense(cls, in_width, out_width):
        return cls(LayerKind.DENSE, in_width, out_width)

    @classmethod
    def conv2d(cls, in_channels, out_channels):
        return cls(LayerKind.CONV2D, in_channels, out_channels)

    @classmethod
    def maxpool(cls):
        return cls(LayerKind.MAXPOOL)

    @classmethod
    def batchnorm(cls, channels):
        return cls(LayerKind.BATCHNORM, channels, channels)

    @classmethod
    def relu(cls):
        return cls(LayerKind.RELU)

    @classmethod
    def sigmoid_head(cls, in_width, units=1):
        return cls(LayerKind.SIGMOID_HEAD, in_width, units)

    @property
    def has_weights(self):
        return self.kind in WEIGHT_KINDS

    @property
    def has_params(self):
        return self.has_weights or self.kind == LayerKind.BATCHNORM

    def to_dict(self):
        return {'kind': self.kind.value, 'in_width': self.in_width, 'out_width': self.out_width}

    @classmethod
    def from_dict(cls, data):
        return cls(LayerKind(data['kind']), int(data['in_width']), int(data['out_width']))


@dataclass
class LayerParams:
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    velocity: dict = field(default_factory=dict)

    TRAINABLE = ('weight', 'bias', 'gamma', 'beta')
    STATE = ('weight', 'bias', 'gamma', 'beta', 'running_mean', 'running_var')

    def trainable(self):
        return {name: getattr(self, name) for name in self.TRAINABLE if getattr(self, name) is not None}

    def tensors(self):
        return [(name, getattr(self, name)) for name in self.STATE if getattr(self, name) is not None]

    def count(self):
        return int(sum(array.size for array in self.trainable().values()))

    def copy(self):
        clone = LayerParams(**{name: array.copy() for name, array in self.tensors()})
        clone.velocity = {name: array.copy() for name, array in self.velocity.items()}
        return clone

    def select_rows(self, rows):
        """Keep only the output units in ``rows`` (weights, bias and batch-norm state)."""
        rows = np.asarray(rows, dtype=np.intp)
        return LayerParams(**{name: array[rows].copy() for name, array in self.tensors()})


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones_like(self.labels)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.inputs.shape[0] < 1:
            raise ContractViolation('a batch needs at least one sample')
        if self.labels.ndim != 2 or self.labels.shape[0] != self.inputs.shape[0]:
            raise ContractViolation(f'labels shape {self.labels.shape} does not match inputs')
        if self.mask.shape != self.labels.shape:
            raise ContractViolation('mask and labels must have the same shape')
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ContractViolation('labels must be binary')
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ContractViolation('mask must be binary')

    @property
    def size(self):
        return self.inputs.shape[0]

    @property
    def task_count(self):
        return self.labels.shape[1]


@dataclass
class LayerCache:
    spec: LayerSpec
    params: LayerParams
    mode: str
    saved: dict
    consumed: bool = False


def param_shapes(spec):
    """Shape of every stored tensor of a layer, keyed by tensor name."""
    if spec.kind == LayerKind.CONV2D:
        return {'weight': (spec.out_width, spec.in_width * KERNEL * KERNEL), 'bias': (spec.out_width,)}
    if spec.kind in (LayerKind.DENSE, LayerKind.SIGMOID_HEAD):
        return {'weight': (spec.out_width, spec.in_width), 'bias': (spec.out_width,)}
    if spec.kind == LayerKind.BATCHNORM:
        return {name: (spec.in_width,) for name in ('gamma', 'beta', 'running_mean', 'running_var')}
    return {}


def init_params(spec, rng):
    """He-style fan-in initialisation; batch norm starts as the identity."""
    if spec.kind == LayerKind.CONV2D:
        fan_in = spec.in_width * KERNEL * KERNEL
        weight = rng.standard_normal((spec.out_width, fan_in)) * np.sqrt(2.0 / fan_in)
        return LayerParams(weight=weight, bias=np.zeros(spec.out_width))
    if spec.kind in (LayerKind.DENSE, LayerKind.SIGMOID_HEAD):
        weight = rng.standard_normal((spec.out_width, spec.in_width)) * np.sqrt(2.0 / spec.in_width)
        return LayerParams(weight=weight, bias=np.zeros(spec.out_width))
    if spec.kind == LayerKind.BATCHNORM:
        channels = spec.in_width
        return LayerParams(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )
    return LayerParams()


def im2col(x):
    """Unfold ``(N, C, H, W)`` into ``(N*H*W, C*9)`` rows of 3x3 patches (pad 1)."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    cols = np.empty((n, c, KERNEL, KERNEL, h, w))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            cols[:, :, ky, kx] = padded[:, :, ky:ky + h, kx:kx + w]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * w, c * KERNEL * KERNEL)


def col2im(cols, shape):
    n, c, h, w = shape
    cols = cols.reshape(n, h, w, c, KERNEL, KERNEL).transpose(0, 3, 4, 5, 1, 2)
    padded = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            padded[:, :, ky:ky + h, kx:kx + w] += cols[:, :, ky, kx]
    return padded[:, :, PAD:PAD + h, PAD:PAD + w]


def layer_forward(spec, params, inputs, mode='train'):
    if mode not in MODES:
        raise ContractViolation(f'unknown mode {mode!r}')
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim < 2 or x.shape[0] < 1:
        raise ContractViolation(f'{spec.kind.value} needs a batched input, got shape {x.shape}')
    output, saved = _FORWARD[spec.kind](spec, params, x, mode)
    saved['output_shape'] = output.shape
    return output, LayerCache(spec, params, mode, saved)


def layer_backward(cache, grad_output):
    """Reverse-mode gradients for one layer.

    For a sigmoid head ``grad_output`` is the gradient with respect to the
    head's logits, which is what ``multi_task_bce`` returns.
    """
    if cache.consumed:
        raise ContractViolation(f'{cache.spec.kind.value} cache was already consumed')
    if cache.mode != 'train':
        raise ContractViolation('backward needs a cache from a train-mode forward pass')
    grad = np.asarray(grad_output, dtype=np.float64)
    if grad.shape != cache.saved['output_shape']:
        raise ContractViolation(
            f'gradient shape {grad.shape} does not match output {cache.saved["output_shape"]}'
        )
    cache.consumed = True
    return _BACKWARD[cache.spec.kind](cache, grad)


def _dense_forward(spec, params, x, mode):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != spec.in_width:
        raise ContractViolation(f'dense layer expects {spec.in_width} inputs, got {flat.shape[1]}')
    return flat @ params.weight.T + params.bias, {'x': flat, 'input_shape': x.shape}


def _dense_backward(cache, grad):
    weight = cache.params.weight
    grads = {'weight': grad.T @ cache.saved['x'], 'bias': grad.sum(axis=0)}
    return (grad @ weight).reshape(cache.saved['input_shape']), grads


def _conv_forward(spec, params, x, mode):
    if x.ndim != 4 or x.shape[1] != spec.in_width:
        raise ContractViolation(f'conv layer expects (N, {spec.in_width}, H, W), got {x.shape}')
    n, _, h, w = x.shape
    cols = im2col(x)
    out = cols @ params.weight.T + params.bias
    out = out.reshape(n, h, w, spec.out_width).transpose(0, 3, 1, 2)
    return out, {'cols': cols, 'input_shape': x.shape}


def _conv_backward(cache, grad):
    weight = cache.params.weight
    flat = grad.transpose(0, 2, 3, 1).reshape(-1, weight.shape[0])
    grads = {'weight': flat.T @ cache.saved['cols'], 'bias': flat.sum(axis=0)}
    return col2im(flat @ weight, cache.saved['input_shape']), grads


def _pool_forward(spec, params, x, mode):
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ContractViolation(f'2x2 max pooling needs even spatial dims, got {x.shape}')
    n, c, h, w = x.shape
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]
    return out, {'winner': winner, 'input_shape': x.shape}


def _pool_backward(cache, grad):
    n, c, h, w = cache.saved['input_shape']
    windows = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(windows, cache.saved['winner'][..., None], grad[..., None], axis=-1)
    grad_input = windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return grad_input, {}


def _bn_layout(x):
    if x.ndim == 2:
        return (0,), (1, x.shape[1])
    if x.ndim == 4:
        return (0, 2, 3), (1, x.shape[1], 1, 1)
    raise ContractViolation(f'batch norm expects 2-D or 4-D input, got {x.shape}')


def _bn_forward(spec, params, x, mode):
    if x.shape[1] != spec.in_width:
        raise ContractViolation(f'batch norm expects {spec.in_width} channels, got {x.shape[1]}')
    axes, shape = _bn_layout(x)
    if mode == 'train':
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        params.running_mean = BN_DECAY * params.running_mean + (1.0 - BN_DECAY) * mean
        params.running_var = BN_DECAY * params.running_var + (1.0 - BN_DECAY) * var
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = params.gamma.reshape(shape) * x_hat + params.beta.reshape(shape)
    return out, {'x_hat': x_hat, 'inv_std': inv_std, 'axes': axes, 'shape': shape}


def _bn_backward(cache, grad):
    saved = cache.saved
    axes, shape, x_hat = saved['axes'], saved['shape'], saved['x_hat']
    m = x_hat.size / x_hat.shape[1]
    grads = {'gamma': (grad * x_hat).sum(axis=axes), 'beta': grad.sum(axis=axes)}
    d_hat = grad * cache.params.gamma.reshape(shape)
    grad_input = (saved['inv_std'].reshape(shape) / m) * (
        m * d_hat
        - d_hat.sum(axis=axes, keepdims=True)
        - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
    )
    return grad_input, grads


def _relu_forward(spec, params, x, mode):
    return np.maximum(x, 0.0), {'active': x > 0}


def _relu_backward(cache, grad):
    return grad * cache.saved['active'], {}


def _head_forward(spec, params, x, mode):
    logits, saved = _dense_forward(spec, params, x, mode)
    return np.clip(expit(logits), SCORE_CLAMP, 1.0 - SCORE_CLAMP), saved


_FORWARD = {
    LayerKind.DENSE: _dense_forward,
    LayerKind.CONV2D: _conv_forward,
    LayerKind.MAXPOOL: _pool_forward,
    LayerKind.BATCHNORM: _bn_forward,
    LayerKind.RELU: _relu_forward,
    LayerKind.SIGMOID_HEAD: _head_forward,
}

_BACKWARD = {
    LayerKind.DENSE: _dense_backward,
    LayerKind.CONV2D: _conv_backward,
    LayerKind.MAXPOOL: _pool_backward,
    LayerKind.BATCHNORM: _bn_backward,
    LayerKind.RELU: _relu_backward,
    LayerKind.SIGMOID_HEAD: _dense_backward,
}


def multi_task_bce(scores, labels, mask=None):
    """Masked mean binary cross-entropy over (sample, task) pairs.

    Returns ``(loss, grad)`` where ``grad`` is taken with respect to the
    pre-sigmoid logits: ``mask * (s - t) / count``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.ones_like(labels) if mask is None else np.asarray(mask, dtype=np.float64)
    if scores.shape != labels.shape or mask.shape != labels.shape:
        raise ContractViolation(
            f'scores {scores.shape}, labels {labels.shape} and mask {mask.shape} must match'
        )
    count = mask.sum()
    if count == 0:
        raise EmptyBatchError('no labelled (sample, task) pairs in the batch')
    s = np.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    loss = -(mask * (labels * np.log(s) + (1.0 - labels) * np.log1p(-s))).sum() / count
    return float(loss), mask * (s - labels) / count


def sgd_step(params, grads, lr, momentum, layer_name=None):
    """Classical momentum update in place: ``v = momentum*v - lr*g; w = w + v``."""
    if lr < 0:
        raise ContractViolation(f'learning rate must be >= 0, got {lr}')
    if not 0.0 <= momentum < 1.0:
        raise ContractViolation(f'momentum must lie in [0, 1), got {momentum}')
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f'non-finite gradient for {name}', layer=layer_name)
    for name, grad in grads.items():
        velocity = momentum * params.velocity.get(name, 0.0) - lr * grad
        params.velocity[name] = velocity
        setattr(params, name, getattr(params, name) + velocity)
    return params
