"""Reverse-mode autodiff over dense float64 arrays.

Every differentiable quantity in the package is built from the primitives
registered here.  A :class:`Graph` records primitive applications as an
append-only node list; :func:`backward` walks it in reverse and returns
gradients keyed by parameter name.

Forward-mode derivatives (:func:`jvp`) are computed by pushing a
:class:`Dual` through the same functions.  The tangent rules are themselves
written with primitives, so a tangent computed on an attached input is an
ordinary graph tensor and can be fed back into :func:`backward`.  This is how
the gradient of a Lyapunov candidate becomes trainable without a
double-backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]  # -1 marks a detached input
    values: tuple[np.ndarray, ...]
    out: np.ndarray
    attrs: dict
    requires: bool = False
    name: str | None = None


class Graph:
    """Append-only record of primitive applications."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.parameters: dict[str, int] = {}
        self._trainable: set[str] = set()
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def parameter(self, name: str, value, trainable: bool = True) -> "Tensor":
        if name in self.parameters:
            raise GraphError(f"parameter {name!r} already bound")
        arr = np.array(value, dtype=np.float64)
        nid = self._append(Node("leaf", (), (), arr, {}, requires=trainable, name=name))
        self.parameters[name] = nid
        if trainable:
            self._trainable.add(name)
        return Tensor(arr, self, nid)

    def bind(self, params: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {name: self.parameter(name, params[name]) for name in sorted(params)}

    def clear_grads(self) -> None:
        self._consumed = False

    def replay(self, overrides: Mapping[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every node's forward from the recorded kinds and inputs.

        Leaves take their recorded value unless overridden by name.
        """
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                v = overrides.get(node.name, node.out)
                values.append(np.array(v, dtype=np.float64))
                continue
            ins = tuple(values[j] if j >= 0 else c for j, c in zip(node.inputs, node.values))
            values.append(_PRIMITIVES[node.kind].forward(*ins, **node.attrs))
        return values


class _Ops:
    """Operator sugar shared by Tensor and Dual."""

    __array_priority__ = 1000

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


class Tensor(_Ops):
    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: Graph | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def attached(self) -> bool:
        return self.graph is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.attached else ""
        return f"Tensor({self.data!r}{tag})"


class Dual(_Ops):
    """Primal/tangent pair; a ``None`` tangent means zero."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: Tensor, tangent: Tensor | None):
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self) -> tuple[int, ...]:
        return self.primal.shape

    @property
    def ndim(self) -> int:
        return self.primal.ndim

    @property
    def data(self) -> np.ndarray:
        return self.primal.data


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Dual):
        raise TypeError("Dual passed where a Tensor is required")
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitive table


@dataclass
class Primitive:
    forward: Callable
    vjp: Callable
    jvp: Callable | None = None
    check: Callable | None = None


_PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(kind: str, forward, vjp, jvp=None, check=None) -> None:
    _PRIMITIVES[kind] = Primitive(forward, vjp, jvp, check)


def primitive_kinds() -> list[str]:
    return sorted(_PRIMITIVES)


def _check_broadcast(kind, shapes, attrs):
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {shapes}") from None


def _check_unary(kind, shapes, attrs):
    if len(shapes) != 1:
        raise ShapeError(f"{kind}: expects one input, got shapes {shapes}")


def _check_matmul(kind, shapes, attrs):
    a, b = shapes
    if len(a) == 0 or len(b) == 0 or len(b) > 2:
        raise ShapeError(f"{kind}: unsupported shapes {a} and {b}")
    if len(b) == 1 and len(a) > 2:
        raise ShapeError(f"{kind}: unsupported shapes {a} and {b}")
    if a[-1] != b[0]:
        raise ShapeError(f"{kind}: inner dimensions differ in {a} and {b}")


def _matmul_vjp(g, ins, out, attrs, need):
    a, b = ins
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = g2[None, ...]
    if b.ndim == 1:
        g2 = g2[..., None]
    ga = gb = None
    if need[0]:
        ga = g2 @ b2.T
        ga = ga.reshape(a.shape)
    if need[1]:
        k, m = b2.shape
        gb = a2.reshape(-1, k).T @ g2.reshape(-1, m)
        gb = gb.reshape(b.shape)
    return ga, gb


def _relu_smooth(y, d):
    return np.where(y <= 0.0, 0.0, np.where(y < d, y * y / (2.0 * d), y - 0.5 * d))


def _ramp(y, d):
    return np.clip(y / d, 0.0, 1.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _min_forward(x, axis):
    return np.min(x, axis=axis)


def _min_vjp(g, ins, out, attrs, need):
    (x,) = ins
    axis = attrs["axis"]
    idx = np.expand_dims(np.argmin(x, axis=axis), axis)
    gx = np.zeros_like(x)
    np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
    return (gx,)


def _take_forward(x, axis, indices):
    return np.take_along_axis(x, np.expand_dims(indices, axis), axis=axis).squeeze(axis)


def _take_vjp(g, ins, out, attrs, need):
    (x,) = ins
    axis = attrs["axis"]
    gx = np.zeros_like(x)
    np.put_along_axis(gx, np.expand_dims(attrs["indices"], axis), np.expand_dims(g, axis), axis=axis)
    return (gx,)


def _sum_vjp(g, ins, out, attrs, need):
    (x,) = ins
    axis, keep = attrs.get("axis"), attrs.get("keepdims", False)
    if axis is not None and not keep:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_vjp(g, ins, out, attrs, need):
    (x,) = ins
    axis = attrs.get("axis")
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return (_sum_vjp(g, ins, out, attrs, need)[0] / n,)


def _split_bounds(sizes, index):
    start = int(np.sum(sizes[:index], dtype=np.int64))
    return start, start + int(sizes[index])


def _split_forward(x, axis, sizes, index):
    lo, hi = _split_bounds(sizes, index)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(lo, hi)
    return x[tuple(sl)].copy()


def _split_vjp(g, ins, out, attrs, need):
    (x,) = ins
    lo, hi = _split_bounds(attrs["sizes"], attrs["index"])
    gx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[attrs["axis"]] = slice(lo, hi)
    gx[tuple(sl)] = g
    return (gx,)


def _check_split(kind, shapes, attrs):
    (s,) = shapes
    axis = attrs["axis"]
    if int(np.sum(attrs["sizes"])) != s[axis]:
        raise ShapeError(f"{kind}: sizes {attrs['sizes']} do not partition axis {axis} of {s}")


def _concat_vjp(g, ins, out, attrs, need):
    axis = attrs["axis"]
    bounds = np.cumsum([x.shape[axis] for x in ins])[:-1]
    parts = np.split(g, bounds, axis=axis)
    return tuple(p if n else None for p, n in zip(parts, need))


def _check_concat(kind, shapes, attrs):
    axis = attrs["axis"]
    ref = list(shapes[0])
    for s in shapes[1:]:
        t = list(s)
        if len(t) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t, ref)) if i != axis % len(ref)):
            raise ShapeError(f"{kind}: shapes {shapes} differ off axis {axis}")


def _check_where(kind, shapes, attrs):
    _check_broadcast(kind, list(shapes) + [np.shape(attrs["mask"])], attrs)


def _where_vjp(g, ins, out, attrs, need):
    a, b = ins
    m = attrs["mask"]
    ga = _unbroadcast(np.where(m, g, 0.0), a.shape) if need[0] else None
    gb = _unbroadcast(np.where(m, 0.0, g), b.shape) if need[1] else None
    return ga, gb


def _check_reshape(kind, shapes, attrs):
    (s,) = shapes
    if int(np.prod(s)) != int(np.prod(attrs["shape"])):
        raise ShapeError(f"{kind}: cannot reshape {s} to {attrs['shape']}")


def _check_broadcast_to(kind, shapes, attrs):
    (s,) = shapes
    try:
        if np.broadcast_shapes(s, tuple(attrs["shape"])) != tuple(attrs["shape"]):
            raise ValueError
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {s} to {attrs['shape']}") from None


_EW = _check_broadcast
_U = _check_unary

register_primitive(
    "add",
    lambda a, b: a + b,
    lambda g, ins, out, at, need: (
        _unbroadcast(g, ins[0].shape) if need[0] else None,
        _unbroadcast(g, ins[1].shape) if need[1] else None,
    ),
    check=_EW,
)
register_primitive(
    "sub",
    lambda a, b: a - b,
    lambda g, ins, out, at, need: (
        _unbroadcast(g, ins[0].shape) if need[0] else None,
        _unbroadcast(-g, ins[1].shape) if need[1] else None,
    ),
    check=_EW,
)
register_primitive(
    "mul",
    lambda a, b: a * b,
    lambda g, ins, out, at, need: (
        _unbroadcast(g * ins[1], ins[0].shape) if need[0] else None,
        _unbroadcast(g * ins[0], ins[1].shape) if need[1] else None,
    ),
    check=_EW,
)
register_primitive(
    "div",
    lambda a, b: a / b,
    lambda g, ins, out, at, need: (
        _unbroadcast(g / ins[1], ins[0].shape) if need[0] else None,
        _unbroadcast(-g * out / ins[1], ins[1].shape) if need[1] else None,
    ),
    check=_EW,
)
register_primitive("matmul", lambda a, b: a @ b, _matmul_vjp, check=_check_matmul)
register_primitive("exp", np.exp, lambda g, ins, out, at, need: (g * out,), check=_U)
register_primitive("log", np.log, lambda g, ins, out, at, need: (g / ins[0],), check=_U)
register_primitive("tanh", np.tanh, lambda g, ins, out, at, need: (g * (1.0 - out * out),), check=_U)
register_primitive("sigmoid", expit, lambda g, ins, out, at, need: (g * out * (1.0 - out),), check=_U)
register_primitive("softplus", _softplus, lambda g, ins, out, at, need: (g * expit(ins[0]),), check=_U)
register_primitive("square", np.square, lambda g, ins, out, at, need: (2.0 * g * ins[0],), check=_U)
# sqrt is given a zero subgradient at 0 so distance-based losses stay finite
register_primitive(
    "sqrt",
    np.sqrt,
    lambda g, ins, out, at, need: (np.where(out > 0.0, g / (2.0 * np.where(out > 0.0, out, 1.0)), 0.0),),
    check=_U,
)
register_primitive("neg", np.negative, lambda g, ins, out, at, need: (-g,), check=_U)
register_primitive("scale", lambda x, c: c * x, lambda g, ins, out, at, need: (at["c"] * g,), check=_U)
register_primitive(
    "sum",
    lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
    _sum_vjp,
    check=_U,
)
register_primitive(
    "mean",
    lambda x, axis=None, keepdims=False: np.mean(x, axis=axis, keepdims=keepdims),
    _mean_vjp,
    check=_U,
)
register_primitive("min_over_axis", _min_forward, _min_vjp, check=_U)
register_primitive("take", _take_forward, _take_vjp, check=_U)
register_primitive("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp, check=_check_concat)
register_primitive("split", _split_forward, _split_vjp, check=_check_split)
register_primitive(
    "relu_smooth",
    _relu_smooth,
    lambda g, ins, out, at, need: (g * _ramp(ins[0], at["d"]),),
    check=_U,
)
register_primitive(
    "ramp",
    _ramp,
    lambda g, ins, out, at, need: (np.where((ins[0] > 0.0) & (ins[0] < at["d"]), g / at["d"], 0.0),),
    check=_U,
)
register_primitive("where", lambda a, b, mask: np.where(mask, a, b), _where_vjp, check=_check_where)
register_primitive(
    "reshape",
    lambda x, shape: x.reshape(shape),
    lambda g, ins, out, at, need: (g.reshape(ins[0].shape),),
    check=_check_reshape,
)
register_primitive(
    "broadcast",
    lambda x, shape: np.broadcast_to(x, shape).copy(),
    lambda g, ins, out, at, need: (_unbroadcast(g, ins[0].shape),),
    check=_check_broadcast_to,
)


def _lincomb_forward(*xs, coeffs):
    out = coeffs[0] * xs[0]
    for c, x in zip(coeffs[1:], xs[1:]):
        out = out + c * x
    return out


register_primitive(
    "lincomb",
    _lincomb_forward,
    lambda g, ins, out, at, need: tuple(
        _unbroadcast(c * g, x.shape) if n else None for c, x, n in zip(at["coeffs"], ins, need)
    ),
    check=_EW,
)

# --------------------------------------------------------------------------
# tangent rules; each is written with the public functions so it records


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def _full(t: Tensor | None, shape) -> Tensor:
    if t is None:
        return _zeros(shape)
    if t.shape != tuple(shape):
        return broadcast(t, shape)
    return t


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _jvp_add(p, t, out, at):
    return _full(_tadd(t[0], t[1]), out.shape)


def _jvp_sub(p, t, out, at):
    tb = None if t[1] is None else neg(t[1])
    return _full(_tadd(t[0], tb), out.shape)


def _jvp_mul(p, t, out, at):
    ta = None if t[0] is None else mul(t[0], p[1])
    tb = None if t[1] is None else mul(p[0], t[1])
    return _full(_tadd(ta, tb), out.shape)


def _jvp_div(p, t, out, at):
    num = t[0]
    if t[1] is not None:
        num = _tadd(num, neg(mul(out, t[1])))
    return _full(div(num, p[1]), out.shape)


def _jvp_matmul(p, t, out, at):
    ta = None if t[0] is None else matmul(t[0], p[1])
    tb = None if t[1] is None else matmul(p[0], t[1])
    return _full(_tadd(ta, tb), out.shape)


def _jvp_sqrt(p, t, out, at):
    mask = out.data > 0.0
    safe = where(mask, out, 1.0)
    return where(mask, div(t[0], scale(safe, 2.0)), 0.0)


def _jvp_ramp(p, t, out, at):
    x = p[0].data
    return mul(t[0], Tensor(np.where((x > 0.0) & (x < at["d"]), 1.0 / at["d"], 0.0)))


def _jvp_min(p, t, out, at):
    idx = np.argmin(p[0].data, axis=at["axis"])
    return take(t[0], at["axis"], idx)


def _jvp_concat(p, t, out, at):
    return concat([_full(ti, pi.shape) for pi, ti in zip(p, t)], axis=at["axis"])


def _jvp_where(p, t, out, at):
    ta = _full(t[0], p[0].shape) if t[0] is not None else 0.0
    tb = _full(t[1], p[1].shape) if t[1] is not None else 0.0
    return where(at["mask"], ta, tb)


def _jvp_lincomb(p, t, out, at):
    pairs = [(c, ti) for c, ti in zip(at["coeffs"], t) if ti is not None]
    res = lincomb([ti for _, ti in pairs], [c for c, _ in pairs])
    return _full(res, out.shape)


def _linear(fn_name):
    def rule(p, t, out, at):
        return apply_primitive(fn_name, t[0], **at)

    return rule


_TANGENT_RULES: dict[str, Callable] = {
    "add": _jvp_add,
    "sub": _jvp_sub,
    "mul": _jvp_mul,
    "div": _jvp_div,
    "matmul": _jvp_matmul,
    "exp": lambda p, t, out, at: mul(t[0], out),
    "log": lambda p, t, out, at: div(t[0], p[0]),
    "tanh": lambda p, t, out, at: sub(t[0], mul(t[0], square(out))),
    "sigmoid": lambda p, t, out, at: mul(t[0], mul(out, sub(1.0, out))),
    "softplus": lambda p, t, out, at: mul(t[0], sigmoid(p[0])),
    "square": lambda p, t, out, at: scale(mul(p[0], t[0]), 2.0),
    "sqrt": _jvp_sqrt,
    "relu_smooth": lambda p, t, out, at: mul(t[0], ramp(p[0], at["d"])),
    "ramp": _jvp_ramp,
    "min_over_axis": _jvp_min,
    "concat": _jvp_concat,
    "where": _jvp_where,
    "lincomb": _jvp_lincomb,
}
for _k in ("neg", "scale", "sum", "mean", "split", "reshape", "broadcast", "take"):
    _TANGENT_RULES[_k] = _linear(_k)


# --------------------------------------------------------------------------
# application


def _graph_of(tensors: Sequence[Tensor]) -> Graph | None:
    graph = None
    for t in tensors:
        if t.graph is not None:
            if graph is None:
                graph = t.graph
            elif t.graph is not graph:
                raise GraphError("inputs belong to different graphs")
    return graph


def apply_primitive(kind: str, *inputs, **attrs):
    prim = _PRIMITIVES.get(kind)
    if prim is None:
        raise ValueError(f"unknown primitive kind {kind!r}")
    if any(isinstance(x, Dual) for x in inputs):
        return _apply_dual(kind, inputs, attrs)
    ts = [as_tensor(x) for x in inputs]
    if prim.check is not None:
        prim.check(kind, [t.shape for t in ts], attrs)
    values = tuple(t.data for t in ts)
    out = prim.forward(*values, **attrs)
    graph = _graph_of(ts)
    if graph is None:
        return Tensor(out)
    ids = tuple(t.node_id if t.graph is not None else -1 for t in ts)
    requires = any(j >= 0 and graph.nodes[j].requires for j in ids)
    nid = graph._append(Node(kind, ids, values, out, attrs, requires))
    return Tensor(out, graph, nid)


def _apply_dual(kind, inputs, attrs):
    primals = []
    tangents = []
    for x in inputs:
        if isinstance(x, Dual):
            primals.append(x.primal)
            tangents.append(x.tangent)
        else:
            primals.append(as_tensor(x))
            tangents.append(None)
    out = apply_primitive(kind, *primals, **attrs)
    if all(t is None for t in tangents):
        return Dual(out, None)
    rule = _PRIMITIVES[kind].jvp or _TANGENT_RULES.get(kind)
    if rule is None:
        raise ValueError(f"primitive {kind!r} has no tangent rule")
    return Dual(out, rule(primals, tangents, out, attrs))


# public op functions ------------------------------------------------------


def add(a, b):
    return apply_primitive("add", a, b)


def sub(a, b):
    return apply_primitive("sub", a, b)


def mul(a, b):
    return apply_primitive("mul", a, b)


def div(a, b):
    return apply_primitive("div", a, b)


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def exp(x):
    return apply_primitive("exp", x)


def log(x):
    return apply_primitive("log", x)


def tanh(x):
    return apply_primitive("tanh", x)


def sigmoid(x):
    return apply_primitive("sigmoid", x)


def softplus(x):
    return apply_primitive("softplus", x)


def square(x):
    return apply_primitive("square", x)


def sqrt(x):
    return apply_primitive("sqrt", x)


def neg(x):
    return apply_primitive("neg", x)


def scale(x, c: float):
    return apply_primitive("scale", x, c=float(c))


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001
    return apply_primitive("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False):
    return apply_primitive("mean", x, axis=axis, keepdims=keepdims)


def min_over_axis(x, axis: int):
    """Minimum along ``axis``; the gradient goes to the first minimal entry."""
    return apply_primitive("min_over_axis", x, axis=axis)


def take(x, axis: int, indices):
    """Select ``x[..., indices[...], ...]`` along ``axis``; one index per slice."""
    return apply_primitive("take", x, axis=axis, indices=np.asarray(indices))


def concat(xs, axis: int = 0):
    return apply_primitive("concat", *xs, axis=axis)


def split(x, sizes: Sequence[int], axis: int = 0) -> list:
    sizes = tuple(int(s) for s in sizes)
    return [apply_primitive("split", x, axis=axis, sizes=sizes, index=i) for i in range(len(sizes))]


def relu_smooth(x, d: float):
    """0 below zero, y**2/(2d) on (0, d), y - d/2 above; C1 everywhere."""
    return apply_primitive("relu_smooth", x, d=float(d))


def ramp(x, d: float):
    return apply_primitive("ramp", x, d=float(d))


def where(mask, a, b):
    return apply_primitive("where", a, b, mask=np.asarray(mask, dtype=bool))


def lincomb(xs, coeffs):
    """sum_i coeffs[i] * xs[i] as one node."""
    if len(xs) != len(coeffs) or not xs:
        raise ShapeError("lincomb needs one coefficient per input")
    return apply_primitive("lincomb", *xs, coeffs=tuple(float(c) for c in coeffs))


def reshape(x, shape):
    return apply_primitive("reshape", x, shape=tuple(shape))


def broadcast(x, shape):
    return apply_primitive("broadcast", x, shape=tuple(shape))


def stack(xs, axis: int = 0):
    parts = []
    for x in xs:
        s = list(x.shape)
        s.insert(axis if axis >= 0 else len(s) + 1 + axis, 1)
        parts.append(reshape(x, s))
    return concat(parts, axis=axis)


# --------------------------------------------------------------------------
# differentiation entry points


def backward(root: Tensor) -> dict[str, Tensor]:
    """Gradient of a scalar ``root`` with respect to every trainable parameter."""
    if not isinstance(root, Tensor) or root.graph is None:
        raise GraphError("backward needs a graph-attached root")
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    graph = root.graph
    if graph._consumed:
        raise GraphError("backward already ran on this graph; call clear_grads() first")
    nodes = graph.nodes
    grads: list[np.ndarray | None] = [None] * (root.node_id + 1)
    grads[root.node_id] = np.ones_like(root.data)
    for i in range(root.node_id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.kind == "leaf" or not node.requires:
            continue
        need = tuple(j >= 0 and nodes[j].requires for j in node.inputs)
        in_grads = _PRIMITIVES[node.kind].vjp(g, node.values, node.out, node.attrs, need)
        for j, gj, n in zip(node.inputs, in_grads, need):
            if n and gj is not None:
                grads[j] = gj if grads[j] is None else grads[j] + gj
        grads[i] = None
    graph._consumed = True
    out = {}
    for name in sorted(graph._trainable):
        nid = graph.parameters[name]
        g = grads[nid] if nid <= root.node_id else None
        out[name] = Tensor(np.zeros_like(nodes[nid].out) if g is None else g)
    return out


def value_and_jvp(fn: Callable, x, v):
    x = x if isinstance(x, Tensor) else as_tensor(x)
    v = v if isinstance(v, Tensor) else as_tensor(v)
    if x.shape != v.shape:
        raise ShapeError(f"jvp: direction shape {v.shape} differs from point shape {x.shape}")
    out = fn(Dual(x, v))
    if not isinstance(out, Dual):
        out = as_tensor(out)
        return out, _zeros(out.shape)
    return out.primal, _full(out.tangent, out.primal.shape)


def jvp(fn: Callable, x, v) -> Tensor:
    """Directional derivative D fn(x)[v], recorded on the graph of its inputs."""
    return value_and_jvp(fn, x, v)[1]


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_index: tuple[int, ...] | None = None
    message: str = ""
    analytic: np.ndarray | None = field(default=None, repr=False)
    numeric: np.ndarray | None = field(default=None, repr=False)


def grad_check(fn: Callable, x, step: float = 1e-6, tol: float = 1e-6, floor: float = 1e-10) -> GradCheckReport:
    """Compare backward gradients of scalar ``fn`` against central differences."""
    if step <= 0 or tol <= 0:
        raise ValueError("step and tol must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    graph = Graph()
    xt = graph.parameter("x", x0)
    root = fn(xt)
    if not np.all(np.isfinite(root.data)):
        return GradCheckReport(np.inf, False, None, "non-finite value at the base point")
    analytic = backward(root)["x"].data
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        idx = np.unravel_index(i, x0.shape)
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += step
        xm[idx] -= step
        fp = as_tensor(fn(Tensor(xp))).item()
        fm = as_tensor(fn(Tensor(xm))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradCheckReport(np.inf, False, tuple(int(k) for k in idx), f"non-finite value when perturbing index {idx}")
        flat[i] = (fp - fm) / (2.0 * step)
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(k) for k in np.argwhere(~np.isfinite(analytic))[0])
        return GradCheckReport(np.inf, False, bad, f"non-finite analytic gradient at {bad}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else None
    err = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        err,
        err <= tol,
        None if worst is None else tuple(int(k) for k in worst),
        "",
        analytic,
        numeric,
    )
