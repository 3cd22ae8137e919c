"""Tape-based reverse-mode differentiation and the adadelta optimizer.

Every forward computation appends a node to a :class:`Tape`.  A node is the
op kind, the ids of its inputs, its forward value (a float64 ndarray) and an
optional static argument (an index, a slice bound).  Backward rules live in
the module-level ``BACKWARD`` registry so individual rules can be swapped
out, e.g. by the gradient checker's fault-injection tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands whose shapes do not combine."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _broadcast_pair(op, a, b):
    """Align a vector against a matrix column-wise.

    A length-d vector combined with a d x n matrix is applied to every
    column.  Anything else must have identical shapes or be a scalar.
    """
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return a, b
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0]:
        return a[:, None], b
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[0]:
        return a, b[:, None]
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    if len(shape) == 1 and grad.ndim == 2:
        return grad.sum(axis=1)
    raise ShapeError("unbroadcast", grad.shape, shape)


# -- backward rules --------------------------------------------------------
# signature: (grad_out, out_value, input_values, arg) -> tuple of input grads


def _bw_add(g, out, xs, arg):
    a, b = xs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(g, out, xs, arg):
    a, b = xs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bw_mul(g, out, xs, arg):
    a, b = xs
    a2, b2 = _broadcast_pair("mul", a, b)
    return _unbroadcast(g * b2, a.shape), _unbroadcast(g * a2, b.shape)


def _bw_matmul(g, out, xs, arg):
    a, b = xs
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g * b, g * a


def _bw_relu(g, out, xs, arg):
    # subgradient at exactly 0 is 0
    return (g * (xs[0] > 0.0),)


def _bw_sigmoid(g, out, xs, arg):
    return (g * out * (1.0 - out),)


def _bw_tanh(g, out, xs, arg):
    return (g * (1.0 - out * out),)


def _bw_softmax(g, out, xs, arg):
    return (out * (g - np.dot(g, out)),)


def _bw_max(g, out, xs, arg):
    grad = np.zeros_like(xs[0])
    grad[arg] = g
    return (grad,)


def _bw_weighted_sum(g, out, xs, arg):
    mat, weights = xs
    return np.outer(g, weights), mat.T @ g


def _bw_concat(g, out, xs, arg):
    grads = []
    start = 0
    for x in xs:
        grads.append(g[start:start + x.shape[0]])
        start += x.shape[0]
    return tuple(grads)


def _bw_log(g, out, xs, arg):
    return (g / xs[0],)


def _bw_index(g, out, xs, arg):
    grad = np.zeros_like(xs[0])
    grad[arg] = g
    return (grad,)


def _bw_slice(g, out, xs, arg):
    grad = np.zeros_like(xs[0])
    grad[arg[0]:arg[1]] = g
    return (grad,)


def _bw_sum(g, out, xs, arg):
    return (np.full_like(xs[0], g),)


def _bw_scale(g, out, xs, arg):
    return (g * arg,)


BACKWARD: Dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "softmax": _bw_softmax,
    "max": _bw_max,
    "weighted_sum": _bw_weighted_sum,
    "concat": _bw_concat,
    "log": _bw_log,
    "index": _bw_index,
    "slice": _bw_slice,
    "sum": _bw_sum,
    "scale": _bw_scale,
}

LEAF_OPS = ("param", "const")


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


class Tape:
    """Append-only record of a forward computation.

    Node ids are positions in the tape, so inputs always precede outputs.
    Parameters enter through :meth:`param`, which returns the same node for
    repeated requests of one name; that is what ties the weights of several
    module instances inside one network.
    """

    def __init__(self):
        self.ops: List[str] = []
        self.inputs: List[tuple] = []
        self.values: List[np.ndarray] = []
        self.args: List[object] = []
        self.param_nodes: Dict[str, int] = {}

    def __len__(self):
        return len(self.ops)

    def _push(self, op, inputs, value, arg=None) -> int:
        self.ops.append(op)
        self.inputs.append(inputs)
        self.values.append(value)
        self.args.append(arg)
        return len(self.ops) - 1

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def _check(self, nodes):
        n = len(self.ops)
        for node in nodes:
            if not 0 <= node < n:
                raise IndexError(f"node {node} is not on this tape")

    # leaves

    def param(self, name: str, value) -> int:
        node = self.param_nodes.get(name)
        if node is None:
            node = self._push("param", (), _as_array(value), name)
            self.param_nodes[name] = node
        return node

    def const(self, value) -> int:
        return self._push("const", (), _as_array(value))

    # generic entry point

    def op(self, kind: str, *inputs: int, arg=None) -> int:
        method = getattr(self, kind, None)
        if kind in LEAF_OPS or kind not in BACKWARD or method is None:
            raise ValueError(f"unknown op {kind!r}")
        if arg is None:
            return method(*inputs)
        return method(*inputs, arg)

    # elementwise

    def add(self, a: int, b: int) -> int:
        self._check((a, b))
        x, y = _broadcast_pair("add", self.values[a], self.values[b])
        return self._push("add", (a, b), x + y)

    def sub(self, a: int, b: int) -> int:
        self._check((a, b))
        x, y = _broadcast_pair("sub", self.values[a], self.values[b])
        return self._push("sub", (a, b), x - y)

    def mul(self, a: int, b: int) -> int:
        self._check((a, b))
        x, y = _broadcast_pair("mul", self.values[a], self.values[b])
        return self._push("mul", (a, b), x * y)

    def scale(self, a: int, factor: float) -> int:
        self._check((a,))
        return self._push("scale", (a,), self.values[a] * factor, float(factor))

    def relu(self, a: int) -> int:
        self._check((a,))
        return self._push("relu", (a,), np.maximum(self.values[a], 0.0))

    def sigmoid(self, a: int) -> int:
        self._check((a,))
        return self._push("sigmoid", (a,), 1.0 / (1.0 + np.exp(-self.values[a])))

    def tanh(self, a: int) -> int:
        self._check((a,))
        return self._push("tanh", (a,), np.tanh(self.values[a]))

    def log(self, a: int) -> int:
        self._check((a,))
        return self._push("log", (a,), np.log(self.values[a]))

    # linear algebra and reductions

    def matmul(self, a: int, b: int) -> int:
        self._check((a, b))
        x, y = self.values[a], self.values[b]
        if x.ndim == 0 or y.ndim == 0 or x.ndim > 2 or y.ndim > 2:
            raise ShapeError("matmul", x.shape, y.shape)
        if x.shape[-1] != y.shape[0]:
            raise ShapeError("matmul", x.shape, y.shape)
        return self._push("matmul", (a, b), x @ y)

    def weighted_sum(self, mat: int, weights: int) -> int:
        """Sum of the columns of ``mat`` weighted by ``weights``."""
        self._check((mat, weights))
        m, w = self.values[mat], self.values[weights]
        if m.ndim != 2 or w.ndim != 1 or m.shape[1] != w.shape[0]:
            raise ShapeError("weighted_sum", m.shape, w.shape)
        return self._push("weighted_sum", (mat, weights), m @ w)

    def softmax(self, a: int) -> int:
        self._check((a,))
        x = self.values[a]
        if x.ndim != 1 or x.shape[0] == 0:
            raise ShapeError("softmax", x.shape)
        return self._push("softmax", (a,), softmax(x))

    def max(self, a: int) -> int:
        self._check((a,))
        x = self.values[a]
        if x.ndim != 1 or x.shape[0] == 0:
            raise ShapeError("max", x.shape)
        # argmax returns the first maximal index; ties route there
        k = int(np.argmax(x))
        return self._push("max", (a,), np.asarray(x[k]), k)

    def sum(self, a: int) -> int:
        self._check((a,))
        return self._push("sum", (a,), np.asarray(self.values[a].sum()))

    def concat(self, *parts: int) -> int:
        self._check(parts)
        vals = [self.values[p] for p in parts]
        if any(v.ndim != 1 for v in vals):
            raise ShapeError("concat", *(v.shape for v in vals))
        return self._push("concat", tuple(parts), np.concatenate(vals))

    def index(self, a: int, i) -> int:
        self._check((a,))
        x = self.values[a]
        if x.ndim == 0 or not -x.shape[0] <= int(i) < x.shape[0]:
            raise ShapeError("index", x.shape, (i,))
        return self._push("index", (a,), np.array(x[int(i)]), int(i))

    def slice(self, a: int, bounds) -> int:
        self._check((a,))
        start, stop = bounds
        x = self.values[a]
        if x.ndim != 1 or not 0 <= start <= stop <= x.shape[0]:
            raise ShapeError("slice", x.shape, (start, stop))
        return self._push("slice", (a,), x[start:stop], (start, stop))

    # inspection

    def to_json(self) -> str:
        records = []
        for i, op in enumerate(self.ops):
            rec = {"id": i, "op": op, "inputs": list(self.inputs[i]),
                   "shape": list(self.values[i].shape)}
            if op == "param":
                rec["name"] = self.args[i]
            elif self.args[i] is not None:
                rec["arg"] = self.args[i]
            records.append(rec)
        return json.dumps({"nodes": records})


def backward(tape: Tape, root: int, seed: float = 1.0) -> Dict[int, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to every reachable node."""
    if tape.values[root].shape != ():
        raise ShapeError("backward", tape.values[root].shape)
    grads: Dict[int, np.ndarray] = {root: np.asarray(float(seed))}
    ops, inputs, values, args = tape.ops, tape.inputs, tape.values, tape.args
    for node in range(root, -1, -1):
        g = grads.get(node)
        if g is None or not inputs[node]:
            continue
        ins = inputs[node]
        in_grads = BACKWARD[ops[node]](g, values[node], [values[i] for i in ins], args[node])
        for i, gi in zip(ins, in_grads):
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    return grads


def param_grads(tape: Tape, grads: Mapping[int, np.ndarray],
                params: Mapping[str, np.ndarray],
                names: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
    """Collect gradients by parameter name; parameters off the path get zeros."""
    if names is None:
        names = tape.param_nodes.keys()
    out = {}
    for name in names:
        node = tape.param_nodes.get(name)
        g = grads.get(node) if node is not None else None
        out[name] = np.zeros_like(params[name]) if g is None else np.asarray(g, dtype=np.float64)
    return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], clip_norm: float) -> Dict[str, np.ndarray]:
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdadeltaState:
    rho: float = 0.95
    epsilon: float = 1e-6
    clip_norm: float = 10.0
    sq_grad: Dict[str, np.ndarray] = field(default_factory=dict)
    sq_delta: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def adadelta_step(state: AdadeltaState, params: Dict[str, np.ndarray],
                  grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Apply one adadelta update to ``params`` in place and return the deltas.

    Ordering: E[g^2] is accumulated first, the step is computed from the
    previous E[dx^2], then E[dx^2] is accumulated with the new step.
    """
    rho, eps = state.rho, state.epsilon
    deltas = {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError("adadelta_step", p.shape, g.shape)
        eg = state.sq_grad.get(name)
        ed = state.sq_delta.get(name)
        if eg is None:
            eg = state.sq_grad[name] = np.zeros_like(p)
            ed = state.sq_delta[name] = np.zeros_like(p)
        elif eg.shape != p.shape:
            raise ShapeError("adadelta_step", p.shape, eg.shape)
        eg *= rho
        eg += (1.0 - rho) * g * g
        dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        p += dx
        ed *= rho
        ed += (1.0 - rho) * dx * dx
        deltas[name] = dx
    return deltas
