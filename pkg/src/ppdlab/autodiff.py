"""Small reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` wraps a build function. :func:`evaluate` runs the build
function against a :class:`ParamStore` and a dict of named inputs, recording
one :class:`Node` per operation in creation order (which is a valid
topological order). :func:`backward` walks the recorded tape in reverse.

Operations accept either nodes or plain arrays. When none of the operands is
a node the operation simply returns an array, so the same model code runs
without any tape overhead for inference and for frozen reference models.
Frozen parameters are handed out as plain arrays, which is how gradients for
them are never produced.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "GraphStateError",
    "Node",
    "Graph",
    "ParamStore",
    "evaluate",
    "backward",
    "finite_difference_gradient",
    "AdamWConfig",
    "AdamWState",
    "adamw_step",
]


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class GraphStateError(AutodiffError):
    pass


class Node:
    __slots__ = ("value", "parents", "backward_fn", "op", "graph", "index", "name")
    # Make numpy defer to our reflected operators (array @ node etc.).
    __array_ufunc__ = None

    def __init__(self, value, parents, backward_fn, op, graph, name=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.graph = graph
        self.name = name
        self.index = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.index} {self.op}{label} shape={self.shape})"

    # Operator sugar, so model code reads like array code.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


# ---------------------------------------------------------------------------
# Parameters


class ParamStore:
    """Ordered name -> array mapping with a per-parameter trainable flag."""

    def __init__(self) -> None:
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0 or 0 in arr.shape:
            raise ShapeError(f"parameter {name!r} must have positive dims, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"parameter {name!r} has non-finite entries")
        self._values[name] = arr
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._values:
            raise KeyError(name)
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ShapeError(
                f"parameter {name!r}: shape {arr.shape} != {self._values[name].shape}"
            )
        self._values[name] = arr

    def __contains__(self, name: object) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n in self._values if self._trainable[n]]

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name in self._values:
            self._trainable[name] = bool(predicate(name))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value.copy(), self._trainable[name])
        return out

    def equal(self, other: "ParamStore") -> bool:
        """Exact (bitwise) equality of names, flags and values."""
        if self.names() != other.names():
            return False
        return all(
            self._trainable[n] == other._trainable[n]
            and np.array_equal(self._values[n], other._values[n])
            for n in self._values
        )


# ---------------------------------------------------------------------------
# Graph and tape


class Graph:
    """A differentiable program: ``build(graph) -> scalar node``.

    Inside ``build``, use :meth:`param` and :meth:`input` to access the bound
    parameters and inputs.
    """

    def __init__(self, build: Callable[["Graph"], object], name: str = "graph"):
        self.build = build
        self.name = name
        self.nodes: list[Node] = []
        self.root = None
        self._params: ParamStore | None = None
        self._inputs: Mapping[str, np.ndarray] = {}
        self._leaves: dict[str, Node] = {}

    def param(self, name: str):
        if self._params is None:
            raise GraphStateError("param() called outside evaluate()")
        if name in self._leaves:
            return self._leaves[name]
        value = self._params[name]
        if not self._params.is_trainable(name):
            return value
        node = Node(value, (), None, "param", self, name=name)
        self._leaves[name] = node
        return node

    def input(self, name: str) -> np.ndarray:
        try:
            return self._inputs[name]
        except KeyError:
            raise GraphStateError(f"input {name!r} not bound") from None


def evaluate(graph: Graph, params: ParamStore, inputs: Mapping | None = None) -> np.ndarray:
    """Run ``graph`` and cache every node's output. Returns the root value."""
    graph.nodes = []
    graph._leaves = {}
    graph._params = params
    graph._inputs = {k: np.asarray(v, dtype=np.float64) for k, v in (inputs or {}).items()}
    graph.root = None
    try:
        root = graph.build(graph)
    finally:
        graph._params = None
    graph.root = root
    graph._bound_params = params
    return _value(root)


def backward(graph: Graph) -> dict[str, np.ndarray]:
    """Gradients of the scalar root w.r.t. every trainable parameter."""
    if graph.root is None:
        raise GraphStateError("backward() called before evaluate()")
    root = graph.root
    params: ParamStore = graph._bound_params
    out = OrderedDict((n, np.zeros_like(params[n])) for n in params.trainable_names())
    if np.size(_value(root)) != 1:
        raise GraphStateError(f"root must be scalar, got shape {np.shape(_value(root))}")
    if not isinstance(root, Node):
        return out

    grads: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    for node in reversed(graph.nodes[: root.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.op == "param":
            out[node.name] = out[node.name] + g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if isinstance(parent, Node) and pg is not None:
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
    return out


def finite_difference_gradient(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    h: float = 1e-4,
    names: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` for each trainable entry.

    ``loss_fn`` is called with a perturbed copy of ``params``. It must be a
    deterministic function of its argument; this is checked by evaluating
    the unperturbed loss twice.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = params.copy()
    base_a = float(loss_fn(work))
    base_b = float(loss_fn(work))
    if base_a != base_b:
        raise AutodiffError(f"loss function is not deterministic ({base_a!r} != {base_b!r})")
    out = OrderedDict()
    for name in names if names is not None else params.trainable_names():
        base = params[name]
        grad = np.zeros_like(base)
        flat = grad.reshape(-1)
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] = base.reshape(-1)[i] + h
            work[name] = bumped.reshape(base.shape)
            f_plus = float(loss_fn(work))
            bumped[i] = base.reshape(-1)[i] - h
            work[name] = bumped.reshape(base.shape)
            f_minus = float(loss_fn(work))
            flat[i] = (f_plus - f_minus) / (2.0 * h)
        work[name] = base
        out[name] = grad
    return out


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    hyper: AdamWConfig,
) -> tuple[ParamStore, AdamWState]:
    """One decoupled-weight-decay Adam update of the trainable parameters.

    Parameter arrays are replaced, never written in place, so copies taken
    earlier stay valid. Frozen parameters are left alone even when a
    gradient is supplied for them.
    """
    if hyper.lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for name in params.trainable_names():
        if name not in grads:
            continue
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r}: shape {g.shape} != {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name!r} has shape {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / corr1) / (np.sqrt(v / corr2) + hyper.eps)
        params[name] = p - hyper.lr * hyper.weight_decay * p - hyper.lr * update
    return params, state


# ---------------------------------------------------------------------------
# Operations


def _value(x):
    return x.value if isinstance(x, Node) else x


def _as_array(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _graph_of(*xs) -> Graph | None:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    return None


def _check_finite(op: str, value: np.ndarray, graph: Graph | None) -> None:
    if not np.all(np.isfinite(value)):
        where = f" (node #{len(graph.nodes)})" if graph is not None else ""
        raise NonFiniteError(f"non-finite output in {op}{where}")


def _emit(op: str, value: np.ndarray, parents: tuple, backward_fn):
    graph = _graph_of(*parents)
    _check_finite(op, value, graph)
    if graph is None:
        return value
    return Node(value, parents, backward_fn, op, graph)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray, graph) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        where = f" at node #{len(graph.nodes)}" if graph is not None else ""
        raise ShapeError(f"{op}{where}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    av, bv = _as_array(a), _as_array(b)
    _broadcast_shape("add", av, bv, _graph_of(a, b))
    return _emit(
        "add", av + bv, (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    av, bv = _as_array(a), _as_array(b)
    _broadcast_shape("sub", av, bv, _graph_of(a, b))
    return _emit(
        "sub", av - bv, (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    av, bv = _as_array(a), _as_array(b)
    _broadcast_shape("mul", av, bv, _graph_of(a, b))
    return _emit(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    av, bv = _as_array(a), _as_array(b)
    _broadcast_shape("div", av, bv, _graph_of(a, b))
    out = av / bv
    return _emit(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a):
    return _emit("neg", -_as_array(a), (a,), lambda g: (-g,))


def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D or has the same leading dims as ``a``."""
    av, bv = _as_array(a), _as_array(b)
    graph = _graph_of(a, b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        where = f" at node #{len(graph.nodes)}" if graph is not None else ""
        raise ShapeError(f"matmul{where}: cannot multiply {av.shape} by {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        where = f" at node #{len(graph.nodes)}" if graph is not None else ""
        raise ShapeError(f"matmul{where}: batch dims differ {av.shape} vs {bv.shape}")

    def grad_fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        if bv.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _emit("matmul", av @ bv, (a, b), grad_fn)


def transpose(a):
    """Swap the last two axes."""
    return _emit("transpose", np.swapaxes(_as_array(a), -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    av = _as_array(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {av.shape} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def concat(xs, axis: int = -1):
    vals = [_as_array(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = _as_array(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit("sum", out, (a,), grad_fn)


def mean(a, axis=None, keepdims: bool = False):
    av = _as_array(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    out = av.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, av.shape).copy(),)

    return _emit("mean", out, (a,), grad_fn)


def squared_error(a, b):
    """Row-wise ``||a - b||^2`` over the last axis."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"squared_error: shapes differ {av.shape} vs {bv.shape}")
    diff = av - bv
    return _emit(
        "squared_error", (diff * diff).sum(axis=-1), (a, b),
        lambda g: (2.0 * g[..., None] * diff, -2.0 * g[..., None] * diff),
    )


def softmax(a):
    """Softmax over the last axis."""
    av = _as_array(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", out, (a,), grad_fn)


def logsumexp(a):
    """``log(sum(exp(a)))`` over the last axis."""
    av = _as_array(a)
    m = av.max(axis=-1, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    return _emit("logsumexp", out, (a,), lambda g: (g[..., None] * e / s,))


def attention(q, k, v):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``."""
    dq, dk = _as_array(q).shape[-1], _as_array(k).shape[-1]
    if dq != dk:
        raise ShapeError(f"attention: query dim {dq} != key dim {dk}")
    if _as_array(k).shape[-2] != _as_array(v).shape[-2]:
        raise ShapeError("attention: key and value token counts differ")
    logits = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(dq))
    return matmul(softmax(logits), v)


def layer_norm(a, eps: float = 1e-5):
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    av = _as_array(a)
    n = av.shape[-1]
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad_fn(g):
        gx = inv / n * (n * g - g.sum(axis=-1, keepdims=True)
                        - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx,)

    return _emit("layer_norm", xhat, (a,), grad_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def logistic(a):
    av = _as_array(a)
    out = _sigmoid(av)
    return _emit("logistic", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """``log(1 + exp(a))``; ``-log(sigmoid(z))`` is ``softplus(-z)``."""
    av = _as_array(a)
    return _emit("softplus", _softplus(av), (a,), lambda g: (g * _sigmoid(av),))


def log(a):
    av = _as_array(a)
    if np.any(av <= 0):
        raise NonFiniteError("log of non-positive value")
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    av = _as_array(a)
    if np.any(av < 0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(av)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(_as_array(a))
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a):
    av = _as_array(a)
    s = _sigmoid(av)
    return _emit("silu", av * s, (a,), lambda g: (g * (s * (1.0 + av * (1.0 - s))),))


def relu(a):
    av = _as_array(a)
    mask = av > 0
    return _emit("relu", av * mask, (a,), lambda g: (g * mask,))


def value_of(x) -> np.ndarray:
    """The array behind a node (or the array itself)."""
    return _value(x)
