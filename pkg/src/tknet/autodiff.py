"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every value is a :class:`Tensor` wrapping a numpy array. Operations build a
graph implicitly by recording their parents and a local backward rule;
:func:`backward` walks that graph once in reverse topological order.

Broadcasting is deliberately narrow: elementwise binary ops accept either
identical shapes or a scalar (shape ``()``) on one side.  Anything else raises
:class:`ShapeError` naming the op and both shapes.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_HEADER = "tknet-ckpt-v1"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_consumed")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return len(self.value)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar operand broadcast against a tensor: its gradient is the total
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum())
    return grad


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.shape == ():
        return b.shape
    if b.shape == ():
        return a.shape
    raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.value + b.value, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.value - b.value, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    av, bv = a.value, b.value

    def backward(g):
        return _reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)

    return _make(av * bv, "mul", (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def backward(g):
        a2 = av.reshape(1, -1) if av.ndim == 1 else av
        b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(av.shape)
        gb = (a2.T @ g2).reshape(bv.shape)
        return ga, gb

    return _make(av @ bv, "matmul", (a, b), backward)


def outer(a, b) -> Tensor:
    """Outer product over the last axis; leading axes (if any) must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError("outer", a.shape, b.shape)
    av, bv = a.value, b.value

    def backward(g):
        return (g * bv[..., None, :]).sum(-1), (g * av[..., :, None]).sum(-2)

    return _make(av[..., :, None] * bv[..., None, :], "outer", (a, b), backward)


# ---------------------------------------------------------------------------
# unary elementwise ops


def _unary(op: str, x, fn, dfn) -> Tensor:
    x = as_tensor(x)
    out_value = fn(x.value)

    def backward(g):
        return (g * dfn(x.value, out_value),)

    return _make(out_value, op, (x,), backward)


def neg(x) -> Tensor:
    return _unary("neg", x, np.negative, lambda v, o: -1.0)


def sin(x) -> Tensor:
    return _unary("sin", x, np.sin, lambda v, o: np.cos(v))


def cos(x) -> Tensor:
    return _unary("cos", x, np.cos, lambda v, o: -np.sin(v))


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda v, o: o)


def log(x) -> Tensor:
    return _unary("log", x, np.log, lambda v, o: 1.0 / v)


def tanh(x) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda v, o: 1.0 - o * o)


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    return _unary("sigmoid", x, lambda v: _sigmoid(np.atleast_1d(v)).reshape(np.shape(v)),
                  lambda v, o: o * (1.0 - o))


def relu(x) -> Tensor:
    # derivative at exactly 0 is 0
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0).astype(np.float64))


def abs_(x) -> Tensor:
    return _unary("abs", x, np.abs, lambda v, o: np.sign(v))


# ---------------------------------------------------------------------------
# reductions and structural ops


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.value.sum(axis=axis)), "sum", (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    shape = x.shape

    def backward(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.value.mean(axis=axis)), "mean", (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    ax = axis % len(ref) if ref else 0
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.value for t in tensors], axis=ax), "concat", tensors, backward)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.value[index]), "slice", (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(np.atleast_1d(shape))) from None
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    return _make(out, "reshape", (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.value, axes), "transpose", (x,), backward)


def broadcast(x, shape) -> Tensor:
    """Broadcast a scalar tensor to ``shape``."""
    x = as_tensor(x)
    if x.shape != ():
        raise ShapeError("scalar-broadcast", x.shape, tuple(shape))

    def backward(g):
        return (np.asarray(g.sum()),)

    return _make(np.full(shape, float(x.value)), "scalar-broadcast", (x,), backward)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "neg": neg,
    "sum": sum_,
    "mean": mean,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "outer": outer,
    "scalar-broadcast": broadcast,
    "abs": abs_,
}


def forward_op(name: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered op by name."""
    try:
        fn = OPS[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    The graph is released afterwards; calling again on the same loss raises.
    """
    if loss.shape != ():
        raise ShapeError("backward", loss.shape, ())
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild it with a fresh forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._backward = None
        node._consumed = True


def grad_check_leaves(fn: Callable[[], Tensor], leaves: Iterable[Tensor], step: float = 1e-5):
    """Central finite-difference gradients of ``fn()`` with respect to ``leaves``."""
    out = []
    for leaf in leaves:
        g = np.zeros_like(leaf.value)
        flat = leaf.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# parameter registry and checkpoints


class Parameters:
    """Named registry of trainable leaves plus frozen buffers."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def buffers(self):
        return self._buffers.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"load {k}", p.shape, arr.shape)
            p.value = arr.copy()


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}


def _unpack(entry: dict) -> np.ndarray:
    return np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])


def save_checkpoint(path, params: Parameters, meta: dict | None = None) -> None:
    """Write ``params`` (and buffers) as JSON under the ``tknet-ckpt-v1`` header.

    Layout::

        {"format": "tknet-ckpt-v1",
         "meta": {...},
         "params": {name: {"shape": [...], "values": [...]}},
         "buffers": {name: {"shape": [...], "values": [...]}}}

    Values are flattened row-major; JSON floats round-trip float64 exactly.
    """
    doc = {
        "format": CHECKPOINT_HEADER,
        "meta": meta or {},
        "params": {k: _pack(p.value) for k, p in params.items()},
        "buffers": {k: _pack(b) for k, b in params.buffers()},
    }
    Path(path).write_text(json.dumps(doc))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER} checkpoint (format={doc.get('format')!r})")
    params = {k: _unpack(v) for k, v in doc["params"].items()}
    buffers = {k: _unpack(v) for k, v in doc.get("buffers", {}).items()}
    return params, buffers, doc.get("meta", {})


def load_checkpoint(path, params: Parameters) -> dict:
    state, buffers, meta = read_checkpoint(path)
    params.load_state_dict(state)
    for k, v in buffers.items():
        if k in params._buffers:
            params._buffers[k][...] = v
    return meta
