"""
Dense float64 tensors with reverse-mode differentiation, Gaussian sampling
and the Adam optimizer.

Every operation on a Tensor records its parents together with a backward
function, so the computation graph is rebuilt on each forward pass
(define-by-run). Gradients are only propagated through nodes that depend on
a tensor created with ``requires_grad=True``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import special

from errors import ContractError, FormatError, NumericalError

logger = logging.getLogger(__name__)


class Tensor:
    """A node of the computation graph holding a float64 array"""

    __slots__ = ("value", "requires_grad", "parents", "backward_fn", "op", "name")
    # Make numpy defer to Tensor's reflected operators (ndarray + Tensor).
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def mT(self):
        return transpose(self)

    def item(self):
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    """Wrap arrays and scalars as constant tensors"""
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x):
    """Plain float64 array behind a tensor, array or scalar"""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum a gradient over the axes that broadcasting expanded"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _node(value, parents, backward_fn, op):
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _swap(x):
    return np.swapaxes(x, -1, -2)


# Elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    return _node(a.value / b.value, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.value ** (exponent - 1.0),)

    return _node(a.value ** exponent, (a,), backward, "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = as_tensor(a)
    out = special.expit(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    active = a.value > 0
    return _node(np.where(active, a.value, 0.0), (a,), lambda g: (g * active,), "relu")


def clip(a, low, high):
    """Clamp entries; the gradient is zero wherever the clamp is active"""
    a = as_tensor(a)
    inside = (a.value > low) & (a.value < high)
    return _node(np.clip(a.value, low, high), (a,), lambda g: (g * inside,), "clip")


def where(condition, a, b):
    """Select from a where condition holds, from b elsewhere"""
    condition = np.asarray(condition, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(np.where(condition, g, 0.0), a.shape),
                _unbroadcast(np.where(condition, 0.0, g), b.shape))

    return _node(np.where(condition, a.value, b.value), (a, b), backward, "where")


# Reductions and shape manipulation

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.value.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tensor_sum(a, axis=axes, keepdims=keepdims) / float(count)


def logsumexp(a, axis=-1):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = special.logsumexp(a.value, axis=axes)

    def backward(g):
        expanded_g = np.expand_dims(g, axes)
        expanded_out = np.expand_dims(out, axes)
        return (expanded_g * np.exp(a.value - expanded_out),)

    return _node(out, (a,), backward, "logsumexp")


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    """Permute axes; by default swap the last two"""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a, index):
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.value[index], (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), backward, "stack")


# Linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")

    def backward(g):
        return (_unbroadcast(g @ _swap(b.value), a.shape),
                _unbroadcast(_swap(a.value) @ g, b.shape))

    return _node(a.value @ b.value, (a, b), backward, "matmul")


def matvec(m, v):
    """Multiply (..., n, d) matrices with (..., d) vectors"""
    v = as_tensor(v)
    column = reshape(v, v.shape + (1,))
    out = matmul(m, column)
    return reshape(out, out.shape[:-1])


def solve(a, b):
    """X with a @ X = b for square a (..., n, n) and b (..., n, k)"""
    a, b = as_tensor(a), as_tensor(b)
    x = np.linalg.solve(a.value, b.value)

    def backward(g):
        gb = np.linalg.solve(_swap(a.value), g)
        return _unbroadcast(-gb @ _swap(x), a.shape), _unbroadcast(gb, b.shape)

    return _node(x, (a, b), backward, "solve")


def logdet(a):
    """Log-determinant of symmetric positive-definite matrices (..., n, n)"""
    a = as_tensor(a)
    sign, out = np.linalg.slogdet(a.value)
    if np.any(sign <= 0):
        raise NumericalError("log-determinant of a matrix that is not positive definite")

    def backward(g):
        return (np.asarray(g)[..., None, None] * _swap(np.linalg.inv(a.value)),)

    return _node(out, (a,), backward, "logdet")


# Graph traversal and differentiation

class Graph:
    """The computation graph reachable from one output node"""

    def __init__(self, output: Tensor):
        self.output = output
        self.order = self._topological_order(output)

    @property
    def nodes(self):
        return list(self.order)

    @staticmethod
    def _topological_order(root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def parameters(self):
        return [node for node in self.order if node.requires_grad and node.backward_fn is None]


def backward(output, wrt: Sequence[Tensor] | None = None):
    """
    Reverse-mode pass from a scalar output.

    Args:
        output: scalar Tensor or a Graph built from one
        wrt: tensors whose gradients to return, in order

    Returns:
        dict mapping every parameter leaf to its gradient, or a list aligned
        with ``wrt`` (zeros for tensors the output does not depend on)
    """
    graph = output if isinstance(output, Graph) else Graph(output)
    root = graph.output
    if root.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {root.shape}")

    grads = {id(root): np.ones(root.shape)}
    results = {}
    for node in reversed(graph.order):
        grad = grads.pop(id(node), None)
        if grad is None or not node.requires_grad:
            continue
        if node.backward_fn is None:
            results[node] = grad
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    if wrt is None:
        return results
    return [results.get(t, np.zeros(t.shape)) for t in wrt]


def gaussian_sample(mean, std, noise):
    """Reparametrized draw mean + std * noise, differentiable in mean and std"""
    mean, std = as_tensor(mean), as_tensor(std)
    noise = np.asarray(noise, dtype=np.float64)
    if np.any(std.value <= 0):
        raise ContractError("standard deviations must be strictly positive")
    expected = np.broadcast_shapes(mean.shape, std.shape)
    if noise.shape != expected:
        raise ContractError(f"noise shape {noise.shape} does not match {expected}")
    return mean + std * noise


# Optimization

@dataclass
class AdamState:
    """
    Adam hyper-parameters and accumulators.

    ``step`` counts calls; ``steps`` counts, per parameter, the updates that
    parameter has received and drives its bias correction.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    steps: dict = field(default_factory=dict)
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """
    One bias-corrected Adam update.

    Parameters without an entry in ``grads`` are left untouched together
    with their moment accumulators and step counts, so a parameter that first
    receives a gradient late starts from a fresh bias correction.

    Returns:
        (updated parameter dict, new AdamState)
    """
    if state.step < 0:
        raise ContractError("Adam step counter must be non-negative")
    steps = dict(state.steps)
    first = dict(state.first_moment)
    second = dict(state.second_moment)
    updated = dict(params)

    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name}")
        param = np.asarray(params[name], dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ContractError(f"gradient shape {grad.shape} does not match parameter {name} {param.shape}")
        count = steps.get(name, 0) + 1
        m = state.beta1 * first.get(name, np.zeros_like(param)) + (1.0 - state.beta1) * grad
        v = state.beta2 * second.get(name, np.zeros_like(param)) + (1.0 - state.beta2) * grad * grad
        steps[name] = count
        first[name] = m
        second[name] = v
        m_hat = m / (1.0 - state.beta1 ** count)
        v_hat = v / (1.0 - state.beta2 ** count)
        updated[name] = param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)

    return updated, dataclasses.replace(state, step=state.step + 1, steps=steps,
                                        first_moment=first, second_moment=second)


def global_norm(grads: Mapping[str, np.ndarray]):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm):
    """Rescale all gradients together so their joint norm is at most max_norm"""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


# Parameter containers

class ParameterGroup:
    """
    Mixin for dataclasses holding parameters.

    Fields are arrays or Tensors, or dicts of them keyed by int. Names take
    the form ``prefix/field`` and ``prefix/field/key``.
    """

    prefix = "params"

    def named(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, dict):
                for key in sorted(value):
                    out[f"{self.prefix}/{f.name}/{key}"] = value[key]
            else:
                out[f"{self.prefix}/{f.name}"] = value
        return out

    @classmethod
    def from_named(cls, arrays: Mapping[str, Any]):
        kwargs = {}
        for f in dataclasses.fields(cls):
            base = f"{cls.prefix}/{f.name}"
            if base in arrays:
                kwargs[f.name] = arrays[base]
                continue
            keyed = {int(name[len(base) + 1:]): value
                     for name, value in arrays.items() if name.startswith(base + "/")}
            if not keyed:
                raise FormatError(f"missing parameter block {base}")
            kwargs[f.name] = keyed
        return cls(**kwargs)

    def map(self, fn: Callable[[Any], Any]):
        changes = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, dict):
                changes[f.name] = {key: fn(item) for key, item in value.items()}
            else:
                changes[f.name] = fn(value)
        return dataclasses.replace(self, **changes)

    def leaves(self, requires_grad=True):
        """Copy with every entry wrapped in a fresh leaf Tensor"""
        return self.map(lambda v: Tensor(value_of(v).copy(), requires_grad=requires_grad))

    def values(self):
        """Copy with every entry as a plain float64 array"""
        return self.map(lambda v: value_of(v).copy())
