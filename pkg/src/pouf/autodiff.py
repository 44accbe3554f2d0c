"""Reverse-mode differentiation over a small, closed set of tensor ops.

Everything is float64. A graph is built once from Node constructors (constants,
named parameters, and the ops below), then evaluated or differentiated as a
pure function of the parameter bindings: no caches, no in-place state, so
repeated calls are bitwise identical.

Matrix products go through einsum with a fixed summation order instead of
BLAS, which keeps results bitwise stable no matter how many threads the
process was given.

Supported ops: matmul, transpose, add, sub, mul (elementwise), scalar-mul,
exp, log, row-l2-normalize, softmax(axis), sum(axis), mean(axis), constant,
parameter. Broadcasting is deliberately absent except for scalar-mul.
"""

from __future__ import annotations

import itertools

import numpy as np

# Rows with an l2 norm below this cannot be normalized meaningfully.
NORM_EPSILON = 1e-12


class GraphError(ValueError):
    """Structural misuse: incompatible shapes, bad bindings, non-scalar output."""


class NumericDomainError(ArithmeticError):
    """An op produced non-finite values (e.g. log of a non-positive input)."""


def _to_array(value, context):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise GraphError(f"{context}: rank {arr.ndim} tensors are not supported")
    return arr


def matmul_values(a, b):
    """Deterministic 2-D matrix product (fixed-order einsum, no BLAS)."""
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def softmax_values(x, axis):
    """Max-shifted softmax along one axis of a 1-D or 2-D float64 array."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    expd = np.exp(shifted)
    return expd / np.sum(expd, axis=axis, keepdims=True)


def row_normalize_values(x):
    """Scale each row of a 2-D array to unit l2 norm; tiny rows are an error."""
    with np.errstate(over="ignore"):  # non-finite results are caught downstream
        norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] < NORM_EPSILON)
    if bad.size:
        raise NumericDomainError(
            f"cannot l2-normalize rows with norm < {NORM_EPSILON:g} (rows {bad.tolist()[:8]})"
        )
    return x / norms


class Node:
    """One op record: kind, input nodes, static shape, and op metadata."""

    _ids = itertools.count()

    __slots__ = ("op", "inputs", "shape", "axis", "value", "name", "uid")

    def __init__(self, op, inputs=(), *, shape, axis=None, value=None, name=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(shape)
        self.axis = axis
        self.value = value
        self.name = name
        self.uid = next(Node._ids)

    def label(self):
        if self.op == "parameter":
            return f"parameter('{self.name}')#{self.uid}"
        return f"{self.op}#{self.uid}"

    def __repr__(self):
        return f"<Node {self.label()} shape={self.shape}>"

    # -- operator sugar, all delegating to the module-level constructors --

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(constant(-1.0), self)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def row_normalize(self):
        return row_normalize(self)

    def softmax(self, axis):
        return softmax(self, axis)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def as_node(value):
    """Wrap a numeric value as a constant node; Nodes pass through."""
    if isinstance(value, Node):
        return value
    return constant(value)


_as_node = as_node


def constant(value):
    arr = _to_array(value, "constant")
    if not np.all(np.isfinite(arr)):
        raise GraphError("constant values must be finite")
    return Node("constant", shape=arr.shape, value=arr)


def parameter(name, shape):
    if not isinstance(name, str) or not name:
        raise GraphError("parameter name must be a non-empty string")
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if len(shape) > 2 or any(s < 1 for s in shape):
        raise GraphError(f"parameter '{name}': invalid shape {shape}")
    return Node("parameter", shape=shape, name=name)


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise GraphError(f"matmul needs two matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return Node("matmul", (a, b), shape=(a.shape[0], b.shape[1]))


def transpose(a):
    a = _as_node(a)
    if len(a.shape) != 2:
        raise GraphError(f"transpose needs a matrix, got shape {a.shape}")
    return Node("transpose", (a,), shape=(a.shape[1], a.shape[0]))


def _elementwise(op, a, b):
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise GraphError(f"{op} needs matching shapes, got {a.shape} vs {b.shape}")
    return Node(op, (a, b), shape=a.shape)


def add(a, b):
    return _elementwise("add", a, b)


def sub(a, b):
    return _elementwise("sub", a, b)


def mul(a, b):
    """Elementwise product; a scalar () operand turns this into scalar-mul."""
    a, b = _as_node(a), _as_node(b)
    if a.shape == () and b.shape != ():
        return scalar_mul(a, b)
    if b.shape == () and a.shape != ():
        return scalar_mul(b, a)
    return _elementwise("mul", a, b)


def scalar_mul(s, x):
    s, x = _as_node(s), _as_node(x)
    if s.shape != ():
        raise GraphError(f"scalar-mul scale must be a scalar, got shape {s.shape}")
    return Node("scalar_mul", (s, x), shape=x.shape)


def exp(x):
    x = _as_node(x)
    return Node("exp", (x,), shape=x.shape)


def log(x):
    x = _as_node(x)
    return Node("log", (x,), shape=x.shape)


def row_normalize(x):
    x = _as_node(x)
    if len(x.shape) != 2:
        raise GraphError(f"row-l2-normalize needs a matrix, got shape {x.shape}")
    return Node("row_normalize", (x,), shape=x.shape)


def softmax(x, axis):
    x = _as_node(x)
    if len(x.shape) == 0 or axis not in range(len(x.shape)):
        raise GraphError(f"softmax axis {axis} invalid for shape {x.shape}")
    return Node("softmax", (x,), shape=x.shape, axis=axis)


def _reduced_shape(shape, axis, op):
    if axis is None:
        return ()
    if not shape or axis not in range(len(shape)):
        raise GraphError(f"{op} axis {axis} invalid for shape {shape}")
    return tuple(s for i, s in enumerate(shape) if i != axis)


def reduce_sum(x, axis=None):
    x = _as_node(x)
    return Node("sum", (x,), shape=_reduced_shape(x.shape, axis, "sum"), axis=axis)


def reduce_mean(x, axis=None):
    x = _as_node(x)
    return Node("mean", (x,), shape=_reduced_shape(x.shape, axis, "mean"), axis=axis)


def _forward(node, vals):
    ins = [vals[n.uid] for n in node.inputs]
    op = node.op
    if op == "matmul":
        return matmul_values(ins[0], ins[1])
    if op == "transpose":
        return ins[0].T.copy()
    if op == "add":
        return ins[0] + ins[1]
    if op == "sub":
        return ins[0] - ins[1]
    if op == "mul":
        return ins[0] * ins[1]
    if op == "scalar_mul":
        return ins[0] * ins[1]
    if op == "exp":
        with np.errstate(over="ignore"):
            out = np.exp(ins[0])
        if not np.all(np.isfinite(out)):
            raise NumericDomainError(f"{node.label()}: exp overflowed to non-finite values")
        return out
    if op == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(ins[0])
        if not np.all(np.isfinite(out)):
            raise NumericDomainError(f"{node.label()}: log of non-positive input")
        return out
    if op == "row_normalize":
        try:
            return row_normalize_values(ins[0])
        except NumericDomainError as err:
            raise NumericDomainError(f"{node.label()}: {err}") from None
    if op == "softmax":
        return softmax_values(ins[0], node.axis)
    if op == "sum":
        return np.sum(ins[0], axis=node.axis)
    if op == "mean":
        return np.mean(ins[0], axis=node.axis)
    raise GraphError(f"unknown op '{op}'")


def _unreduce(grad, in_shape, axis, scale=1.0):
    """Spread a reduction's adjoint back over the reduced axis."""
    if axis is None:
        out = np.full(in_shape, float(grad) * scale, dtype=np.float64)
        return out
    expanded = np.expand_dims(np.asarray(grad, dtype=np.float64), axis)
    return np.broadcast_to(expanded, in_shape).copy() * scale


def _backward(node, vals, out_val, grad):
    """Vector-Jacobian product: adjoint contributions for each input node."""
    ins = [vals[n.uid] for n in node.inputs]
    op = node.op
    if op == "matmul":
        return (
            np.einsum("ik,jk->ij", grad, ins[1], optimize=False),
            np.einsum("ki,kj->ij", ins[0], grad, optimize=False),
        )
    if op == "transpose":
        return (grad.T.copy(),)
    if op == "add":
        return (grad, grad)
    if op == "sub":
        return (grad, -grad)
    if op == "mul":
        return (grad * ins[1], grad * ins[0])
    if op == "scalar_mul":
        return (np.sum(grad * ins[1]), ins[0] * grad)
    if op == "exp":
        return (grad * out_val,)
    if op == "log":
        return (grad / ins[0],)
    if op == "row_normalize":
        norms = np.sqrt(np.sum(ins[0] * ins[0], axis=1, keepdims=True))
        inner = np.sum(out_val * grad, axis=1, keepdims=True)
        return ((grad - out_val * inner) / norms,)
    if op == "softmax":
        inner = np.sum(grad * out_val, axis=node.axis, keepdims=True)
        return (out_val * (grad - inner),)
    if op == "sum":
        return (_unreduce(grad, ins[0].shape, node.axis),)
    if op == "mean":
        n = ins[0].size if node.axis is None else ins[0].shape[node.axis]
        return (_unreduce(grad, ins[0].shape, node.axis, scale=1.0 / n),)
    raise GraphError(f"unknown op '{op}'")


class Graph:
    """A frozen computation: topologically ordered ops ending at one output."""

    def __init__(self, output):
        if not isinstance(output, Node):
            raise GraphError("graph output must be a Node")
        self.output = output
        self.nodes = self._topo_sort(output)
        self.parameters = {}
        for node in self.nodes:
            if node.op == "parameter":
                seen = self.parameters.get(node.name)
                if seen is not None and seen is not node:
                    raise GraphError(f"duplicate parameter name '{node.name}'")
                self.parameters[node.name] = node

    @staticmethod
    def _topo_sort(output):
        order, state = [], {}
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                state[node.uid] = 2
                order.append(node)
                continue
            mark = state.get(node.uid, 0)
            if mark == 2:
                continue
            state[node.uid] = 1
            stack.append((node, True))
            for child in node.inputs:
                if state.get(child.uid, 0) != 2:
                    stack.append((child, False))
        return order

    def _check_bindings(self, bindings):
        bindings = dict(bindings or {})
        unknown = set(bindings) - set(self.parameters)
        if unknown:
            raise GraphError(f"bindings for unknown parameters: {sorted(unknown)}")
        out = {}
        for name, node in self.parameters.items():
            if name not in bindings:
                raise GraphError(f"missing binding for parameter '{name}'")
            arr = _to_array(bindings[name], f"binding '{name}'")
            if arr.shape != node.shape:
                raise GraphError(
                    f"binding '{name}' has shape {arr.shape}, declared {node.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise NumericDomainError(f"binding '{name}' contains non-finite values")
            out[name] = arr
        return out

    def _run_forward(self, bindings):
        bound = self._check_bindings(bindings)
        vals = {}
        for node in self.nodes:
            if node.op == "constant":
                vals[node.uid] = node.value
            elif node.op == "parameter":
                vals[node.uid] = bound[node.name]
            else:
                vals[node.uid] = np.asarray(_forward(node, vals), dtype=np.float64)
        return vals

    def evaluate(self, bindings=None):
        """Forward pass; returns the output value as a float64 array (copy)."""
        vals = self._run_forward(bindings)
        return np.array(vals[self.output.uid], dtype=np.float64)

    def evaluate_many(self, bindings=None, probes=()):
        """One forward pass; returns values for probe nodes inside this graph.

        Probes must be nodes reachable from the output (sub-expressions of
        the graph); asking for a foreign node is a structural error.
        """
        vals = self._run_forward(bindings)
        out = []
        for probe in probes:
            if not isinstance(probe, Node) or probe.uid not in vals:
                raise GraphError("probe node is not part of this graph")
            out.append(np.array(vals[probe.uid], dtype=np.float64))
        return out

    def gradient(self, bindings=None, wrt=None):
        """Reverse pass from a scalar output; returns {parameter name: grad}."""
        if self.output.shape != ():
            raise GraphError(
                f"gradient needs a scalar output, got shape {self.output.shape}"
            )
        if wrt is None:
            wrt = sorted(self.parameters)
        else:
            wrt = [wrt] if isinstance(wrt, str) else list(wrt)
            unknown = set(wrt) - set(self.parameters)
            if unknown:
                raise GraphError(f"gradient wrt unknown parameters: {sorted(unknown)}")

        vals = self._run_forward(bindings)
        adjoints = {self.output.uid: np.asarray(1.0)}
        for node in reversed(self.nodes):
            grad = adjoints.get(node.uid)
            if grad is None or node.op in ("constant", "parameter"):
                continue
            for child, contrib in zip(node.inputs, _backward(node, vals, vals[node.uid], grad)):
                contrib = np.asarray(contrib, dtype=np.float64)
                if child.uid in adjoints:
                    adjoints[child.uid] = adjoints[child.uid] + contrib
                else:
                    adjoints[child.uid] = contrib

        out = {}
        for name in wrt:
            node = self.parameters[name]
            grad = adjoints.get(node.uid)
            out[name] = (
                np.zeros(node.shape) if grad is None else np.array(grad, dtype=np.float64)
            )
        return out


def finite_difference(fn, bindings, wrt, h=1e-5):
    """Central-difference gradient of a scalar function of one bound parameter.

    `fn` maps a bindings dict to a float. Slow by construction; it is the
    reference the analytic gradients are checked against.
    """
    base = {k: _to_array(v, f"binding '{k}'") for k, v in bindings.items()}
    if wrt not in base:
        raise GraphError(f"finite_difference wrt unknown binding '{wrt}'")
    x = base[wrt]
    grad = np.zeros_like(x)
    flat_grad = grad.reshape(-1)
    flat_x = x.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        hi = float(fn(base))
        flat_x[i] = orig - h
        lo = float(fn(base))
        flat_x[i] = orig
        flat_grad[i] = (hi - lo) / (2.0 * h)
    return grad
