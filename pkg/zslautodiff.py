#!/usr/bin/env python3

# Define-by-run reverse mode differentiation on top of numpy.
#
# Every operation appends a node to a Graph and evaluates its value right
# away. The backward rules are written in terms of the same primitives, so
# a gradient that is asked for with input_gradient() is itself a part of the
# graph and can be differentiated again (needed for the gradient penalty).
#
# All values are float64 and read-only once recorded.
#
# SPDX-License-Identifier: GPL-3.0-only

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from zslerrors import NumericalError, ShapeError


@dataclass(frozen=True, eq=False)
class Node:
    '''One recorded operation (or leaf) in a Graph'''
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    name: str | None = None


@dataclass(frozen=True, eq=False)
class Tensor:
    '''Handle to a node: the graph it lives in plus the node id'''
    graph: 'Graph'
    node_id: int

    @property
    def value(self):
        return self.graph.nodes[self.node_id].value

    @property
    def shape(self):
        return self.value.shape


@dataclass(frozen=True)
class Primitive:
    arity: int
    check: Callable
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, arity, check, forward, vjp):
    PRIMITIVES[name] = Primitive(arity=arity, check=check, forward=forward, vjp=vjp)


def _frozen(value):
    array = np.array(value, dtype=np.float64)
    array.setflags(write=False)
    return array


class Graph:
    '''Append-only record of operations. Node ids are a topological order.'''

    def __init__(self):
        self.nodes: list[Node] = []
        self._parameter_names = set()

    def _append(self, op, inputs, attrs, value, name=None):
        self.nodes.append(Node(op=op, inputs=inputs, attrs=attrs, value=value, name=name))
        return Tensor(self, len(self.nodes) - 1)

    def tensor(self, node_id):
        return Tensor(self, node_id)

    def constant(self, value):
        return self._append('constant', (), {}, _frozen(value))

    def parameter(self, value, name):
        '''Differentiable leaf. Gradients from backward() are keyed by name.'''
        if name in self._parameter_names:
            raise ValueError(f'duplicate parameter name {name}')
        self._parameter_names.add(name)
        return self._append('parameter', (), {}, _frozen(value), name=name)

    def parameters(self):
        return [Tensor(self, i) for i, node in enumerate(self.nodes) if node.op == 'parameter']

    # convenience wrappers around forward_eval
    def matmul(self, a, b):
        return forward_eval(self, 'matmul', [a, b])

    def transpose(self, a):
        return forward_eval(self, 'transpose', [a])

    def add(self, a, b):
        return forward_eval(self, 'add', [a, b])

    def sub(self, a, b):
        return forward_eval(self, 'sub', [a, b])

    def mul(self, a, b):
        return forward_eval(self, 'mul', [a, b])

    def affine(self, a, scale=1.0, shift=0.0):
        return forward_eval(self, 'affine', [a], {'scale': float(scale), 'shift': float(shift)})

    def bias_add(self, x, b):
        return forward_eval(self, 'bias_add', [x, b])

    def sum(self, a):
        return forward_eval(self, 'sum', [a])

    def mean(self, a):
        return forward_eval(self, 'mean', [a])

    def fill(self, a, shape):
        return forward_eval(self, 'fill', [a], {'shape': tuple(shape)})

    def sum_rows(self, a):
        return forward_eval(self, 'sum_rows', [a])

    def broadcast_rows(self, a, rows):
        return forward_eval(self, 'broadcast_rows', [a], {'rows': int(rows)})

    def row_sum(self, a):
        return forward_eval(self, 'row_sum', [a])

    def broadcast_cols(self, a, cols):
        return forward_eval(self, 'broadcast_cols', [a], {'cols': int(cols)})

    def leaky_relu(self, a, slope=0.2):
        return forward_eval(self, 'leaky_relu', [a], {'slope': float(slope)})

    def relu(self, a):
        return forward_eval(self, 'relu', [a])

    def tanh(self, a):
        return forward_eval(self, 'tanh', [a])

    def sqrt(self, a):
        return forward_eval(self, 'sqrt', [a])

    def reciprocal(self, a):
        return forward_eval(self, 'reciprocal', [a])

    def sq_norm_rows(self, a):
        return forward_eval(self, 'sq_norm_rows', [a])

    def softmax(self, a):
        return forward_eval(self, 'softmax', [a])

    def softmax_cross_entropy(self, logits, labels):
        return forward_eval(self, 'softmax_cross_entropy', [logits],
                            {'labels': np.asarray(labels, dtype=np.int64)})

    def concat_cols(self, a, b):
        return forward_eval(self, 'concat_cols', [a, b])

    def slice_cols(self, a, start, stop):
        return forward_eval(self, 'slice_cols', [a], {'start': int(start), 'stop': int(stop)})

    def pad_cols(self, a, start, total):
        return forward_eval(self, 'pad_cols', [a], {'start': int(start), 'total': int(total)})


def forward_eval(graph, primitive, inputs, attrs=None):
    '''Evaluate a primitive on input tensors and record it in the graph'''
    try:
        prim = PRIMITIVES[primitive]
    except KeyError:
        raise ValueError(f'unknown primitive {primitive}') from None
    attrs = attrs or {}
    if len(inputs) != prim.arity:
        raise ShapeError(f'{primitive}: expected {prim.arity} inputs, got {len(inputs)}')
    for tensor in inputs:
        if tensor.graph is not graph:
            raise ValueError(f'{primitive}: input belongs to another graph')
    values = [tensor.value for tensor in inputs]
    problem = prim.check(values, attrs)
    if problem:
        shapes = ' and '.join(str(v.shape) for v in values)
        raise ShapeError(f'{primitive}: {problem} (shapes {shapes})')
    value = _frozen(prim.forward(*values, **attrs))
    return graph._append(primitive, tuple(t.node_id for t in inputs), attrs, value)


def _gradients(graph, output, targets):
    '''Reverse accumulation from a scalar output. Returns node id -> gradient tensor.'''
    if output.graph is not graph:
        raise ValueError('output belongs to another graph')
    if output.value.ndim != 0:
        raise ShapeError(f'gradient needs a scalar output, got shape {output.shape}')
    target_ids = {t.node_id for t in targets}

    # nodes on a path from some target to the output
    live = [False] * (output.node_id + 1)
    for node_id in range(output.node_id + 1):
        node = graph.nodes[node_id]
        live[node_id] = node_id in target_ids or any(live[i] for i in node.inputs)

    grads = {}
    if not live[output.node_id]:
        return grads
    grads[output.node_id] = graph.constant(np.ones(()))

    for node_id in range(output.node_id, -1, -1):
        if node_id not in grads:
            continue
        node = graph.nodes[node_id]
        if not node.inputs:
            continue
        needs = [live[i] for i in node.inputs]
        inputs = [graph.tensor(i) for i in node.inputs]
        contributions = PRIMITIVES[node.op].vjp(graph, inputs, graph.tensor(node_id),
                                                grads[node_id], node.attrs, needs)
        for input_id, needed, contribution in zip(node.inputs, needs, contributions):
            if not needed or contribution is None:
                continue
            if input_id in grads:
                grads[input_id] = graph.add(grads[input_id], contribution)
            else:
                grads[input_id] = contribution
    return grads


def backward(graph, output):
    '''Gradient of a scalar output with respect to every parameter, by name'''
    parameters = graph.parameters()
    grads = _gradients(graph, output, parameters)
    result = {}
    for param in parameters:
        name = graph.nodes[param.node_id].name
        if param.node_id in grads:
            result[name] = np.array(grads[param.node_id].value)
        else:
            result[name] = np.zeros(param.shape)
    return result


def input_gradient(graph, output, wrt):
    '''Gradient of a scalar output with respect to wrt, as a differentiable graph node'''
    grads = _gradients(graph, output, [wrt])
    if wrt.node_id not in grads:
        raise ValueError('input_gradient: wrt is not an ancestor of output')
    return grads[wrt.node_id]


# Primitive table. check() returns a description of the problem or None.

def _same_shape(values, attrs):
    if values[0].shape != values[1].shape:
        return 'operands differ in shape'
    return None


def _matrix(values, attrs):
    if any(v.ndim != 2 for v in values):
        return 'expected a matrix'
    return None


def _any(values, attrs):
    return None


def _check_matmul(values, attrs):
    a, b = values
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        return 'incompatible matrix shapes'
    return None


def _vjp_matmul(graph, inputs, output, grad, attrs, needs):
    a, b = inputs
    return [graph.matmul(grad, graph.transpose(b)) if needs[0] else None,
            graph.matmul(graph.transpose(a), grad) if needs[1] else None]


def _check_bias_add(values, attrs):
    x, b = values
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        return 'bias does not match the matrix columns'
    return None


def _check_fill(values, attrs):
    if values[0].ndim != 0:
        return 'fill needs a scalar'
    return None


def _check_vector(values, attrs):
    if values[0].ndim != 1:
        return 'expected a vector'
    return None


def _check_slice(values, attrs):
    x = values[0]
    if x.ndim != 2 or not 0 <= attrs['start'] < attrs['stop'] <= x.shape[1]:
        return f"column range {attrs['start']}:{attrs['stop']} out of bounds"
    return None


def _check_pad(values, attrs):
    x = values[0]
    if x.ndim != 2 or attrs['start'] < 0 or attrs['start'] + x.shape[1] > attrs['total']:
        return f"cannot place columns at {attrs['start']} within {attrs['total']}"
    return None


def _check_concat(values, attrs):
    a, b = values
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        return 'row counts differ'
    return None


def _check_cross_entropy(values, attrs):
    logits = values[0]
    labels = attrs['labels']
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        return f'labels of shape {labels.shape} do not match the logits'
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        return 'label index out of range'
    return None


def _softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def _cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return log_norm - shifted[np.arange(logits.shape[0]), labels]


def _reciprocal(x):
    result = np.zeros_like(x)
    nonzero = x != 0
    result[nonzero] = 1.0 / x[nonzero]
    return result


def _pad(x, start, total):
    result = np.zeros((x.shape[0], total))
    result[:, start:start + x.shape[1]] = x
    return result


def _vjp_rectifier(slope):
    def vjp(graph, inputs, output, grad, attrs, needs):
        mask = np.where(inputs[0].value > 0, 1.0, attrs.get('slope', slope))
        return [graph.mul(grad, graph.constant(mask))]
    return vjp


_register('matmul', 2, _check_matmul, lambda a, b: a @ b, _vjp_matmul)
_register('transpose', 1, _matrix, lambda a: a.T,
          lambda g, i, o, grad, at, n: [g.transpose(grad)])
_register('add', 2, _same_shape, lambda a, b: a + b,
          lambda g, i, o, grad, at, n: [grad, grad])
_register('sub', 2, _same_shape, lambda a, b: a - b,
          lambda g, i, o, grad, at, n: [grad, g.affine(grad, -1.0) if n[1] else None])
_register('mul', 2, _same_shape, lambda a, b: a * b,
          lambda g, i, o, grad, at, n: [g.mul(grad, i[1]) if n[0] else None,
                                        g.mul(grad, i[0]) if n[1] else None])
_register('affine', 1, _any, lambda a, scale, shift: a * scale + shift,
          lambda g, i, o, grad, at, n: [g.affine(grad, at['scale'])])
_register('bias_add', 2, _check_bias_add, lambda x, b: x + b,
          lambda g, i, o, grad, at, n: [grad, g.sum_rows(grad) if n[1] else None])
_register('sum', 1, _any, lambda a: np.sum(a),
          lambda g, i, o, grad, at, n: [g.fill(grad, i[0].shape)])
_register('mean', 1, _any, lambda a: np.mean(a),
          lambda g, i, o, grad, at, n: [g.affine(g.fill(grad, i[0].shape), 1.0 / i[0].value.size)])
_register('fill', 1, _check_fill, lambda a, shape: np.full(shape, a),
          lambda g, i, o, grad, at, n: [g.sum(grad)])
_register('sum_rows', 1, _matrix, lambda a: a.sum(axis=0),
          lambda g, i, o, grad, at, n: [g.broadcast_rows(grad, i[0].shape[0])])
_register('broadcast_rows', 1, _check_vector, lambda a, rows: np.tile(a, (rows, 1)),
          lambda g, i, o, grad, at, n: [g.sum_rows(grad)])
_register('row_sum', 1, _matrix, lambda a: a.sum(axis=1),
          lambda g, i, o, grad, at, n: [g.broadcast_cols(grad, i[0].shape[1])])
_register('broadcast_cols', 1, _check_vector, lambda a, cols: np.repeat(a[:, None], cols, axis=1),
          lambda g, i, o, grad, at, n: [g.row_sum(grad)])
_register('leaky_relu', 1, _any, lambda a, slope: np.where(a > 0, a, slope * a),
          _vjp_rectifier(None))
_register('relu', 1, _any, lambda a: np.maximum(a, 0.0), _vjp_rectifier(0.0))
_register('tanh', 1, _any, np.tanh,
          lambda g, i, o, grad, at, n: [g.mul(grad, g.affine(g.mul(o, o), -1.0, 1.0))])
# derivative of the root is taken as 0 where the root is 0
_register('sqrt', 1, _any, lambda a: np.sqrt(np.maximum(a, 0.0)),
          lambda g, i, o, grad, at, n: [g.mul(grad, g.affine(g.reciprocal(o), 0.5))])
_register('reciprocal', 1, _any, _reciprocal,
          lambda g, i, o, grad, at, n: [g.mul(grad, g.affine(g.mul(o, o), -1.0))])
_register('sq_norm_rows', 1, _matrix, lambda a: (a * a).sum(axis=1),
          lambda g, i, o, grad, at, n: [g.mul(g.affine(i[0], 2.0),
                                              g.broadcast_cols(grad, i[0].shape[1]))])
_register('softmax', 1, _matrix, _softmax,
          lambda g, i, o, grad, at, n: [g.mul(o, g.sub(grad, g.broadcast_cols(
              g.row_sum(g.mul(grad, o)), o.shape[1])))])
_register('softmax_cross_entropy', 1, _check_cross_entropy, _cross_entropy,
          lambda g, i, o, grad, at, n: [g.mul(
              g.sub(g.softmax(i[0]), g.constant(np.eye(i[0].shape[1])[at['labels']])),
              g.broadcast_cols(grad, i[0].shape[1]))])
_register('concat_cols', 2, _check_concat, lambda a, b: np.concatenate([a, b], axis=1),
          lambda g, i, o, grad, at, n: [
              g.slice_cols(grad, 0, i[0].shape[1]) if n[0] else None,
              g.slice_cols(grad, i[0].shape[1], o.shape[1]) if n[1] else None])
_register('slice_cols', 1, _check_slice, lambda a, start, stop: a[:, start:stop],
          lambda g, i, o, grad, at, n: [g.pad_cols(grad, at['start'], i[0].shape[1])])
_register('pad_cols', 1, _check_pad, _pad,
          lambda g, i, o, grad, at, n: [g.slice_cols(grad, at['start'],
                                                     at['start'] + i[0].shape[1])])


@dataclass
class AdamState:
    '''Adam moments per parameter name plus the shared step counter'''
    alpha: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    '''One bias-corrected Adam update. Returns new parameter arrays and the state.'''
    for name, grad in grads.items():
        if name not in params:
            raise ValueError(f'gradient for unknown parameter {name}')
        if grad.shape != params[name].shape:
            raise ShapeError(f'adam_step: gradient for {name} has shape {grad.shape}, '
                             f'parameter has {params[name].shape}')
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f'non-finite gradient for parameter {name}')

    state.step_count += 1
    t = state.step_count
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        m = state.first_moment.get(name, np.zeros_like(value))
        v = state.second_moment.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        updated[name] = value - state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated, state


def central_difference(fn, array, h=1e-5):
    '''Numerical gradient of a scalar function of one array'''
    x = np.array(array, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        upper = fn(x)
        x[index] = original - h
        lower = fn(x)
        x[index] = original
        grad[index] = (upper - lower) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), 1e-8)
    return diff / scale


def _away_from_zero(rng, shape, low=0.1, high=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


# random instances for the finite difference check: (inputs, attrs)
GRADCHECK_CASES = {
    'matmul': lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], {}),
    'transpose': lambda rng: ([rng.normal(size=(3, 4))], {}),
    'add': lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], {}),
    'sub': lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], {}),
    'mul': lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], {}),
    'affine': lambda rng: ([rng.normal(size=(3, 4))], {'scale': 1.7, 'shift': -0.3}),
    'bias_add': lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=4)], {}),
    'sum': lambda rng: ([rng.normal(size=(3, 4))], {}),
    'mean': lambda rng: ([rng.normal(size=(3, 4))], {}),
    'fill': lambda rng: ([rng.normal(size=())], {'shape': (2, 3)}),
    'sum_rows': lambda rng: ([rng.normal(size=(3, 4))], {}),
    'broadcast_rows': lambda rng: ([rng.normal(size=4)], {'rows': 3}),
    'row_sum': lambda rng: ([rng.normal(size=(3, 4))], {}),
    'broadcast_cols': lambda rng: ([rng.normal(size=3)], {'cols': 4}),
    'leaky_relu': lambda rng: ([_away_from_zero(rng, (3, 4))], {'slope': 0.2}),
    'relu': lambda rng: ([_away_from_zero(rng, (3, 4))], {}),
    'tanh': lambda rng: ([rng.uniform(-2.0, 2.0, size=(3, 4))], {}),
    'sqrt': lambda rng: ([rng.uniform(0.5, 2.0, size=(3, 4))], {}),
    'reciprocal': lambda rng: ([_away_from_zero(rng, (3, 4), 0.5)], {}),
    'sq_norm_rows': lambda rng: ([rng.normal(size=(3, 4))], {}),
    'softmax': lambda rng: ([rng.normal(size=(3, 4))], {}),
    'softmax_cross_entropy': lambda rng: ([rng.normal(size=(3, 4))],
                                          {'labels': rng.integers(0, 4, size=3)}),
    'concat_cols': lambda rng: ([rng.normal(size=(3, 2)), rng.normal(size=(3, 3))], {}),
    'slice_cols': lambda rng: ([rng.normal(size=(3, 5))], {'start': 1, 'stop': 4}),
    'pad_cols': lambda rng: ([rng.normal(size=(3, 2))], {'start': 1, 'total': 5}),
}


def check_primitive(name, rng, h=1e-5):
    '''Largest relative error between backward() and central differences
    for one random instance of a primitive'''
    arrays, attrs = GRADCHECK_CASES[name](rng)
    projection = None

    def evaluate(values):
        graph = Graph()
        leaves = [graph.parameter(v, f'x{i}') for i, v in enumerate(values)]
        out = forward_eval(graph, name, leaves, dict(attrs))
        nonlocal projection
        if projection is None:
            projection = rng.normal(size=out.shape)
        loss = graph.sum(graph.mul(out, graph.constant(projection)))
        return graph, loss

    graph, loss = evaluate(arrays)
    analytic = backward(graph, loss)
    worst = 0.0
    for i, array in enumerate(arrays):
        def scalar(x, i=i):
            values = list(arrays)
            values[i] = x
            return float(evaluate(values)[1].value)
        numeric = central_difference(scalar, array, h)
        worst = max(worst, relative_error(analytic[f'x{i}'], numeric))
    return worst
