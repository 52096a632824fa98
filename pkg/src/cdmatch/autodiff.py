"""Minimal tape-based reverse-mode automatic differentiation over float64 arrays.

Operations only record onto a :class:`Tape` when one is active *and* at least
one operand requires a gradient. Outside a tape every op is a plain numpy
computation, which doubles as a cheap inference mode::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]   # array([2., 4., 6.])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "as_tensor",
    "add", "sub", "mul", "div", "matmul", "sum", "mean", "exp", "log", "sqrt",
    "square", "neg", "relu", "silu", "tanh", "sin", "cos", "abs", "power",
    "broadcast_to", "reshape", "transpose", "concat", "index_select", "clamp_min",
    "logsumexp", "sort_with_gradient", "graph_depth_and_node_count", "gradcheck",
]


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


_ACTIVE: list["Tape"] = []


class Node:
    __slots__ = ("op", "parents", "backward", "depth", "size")

    def __init__(self, op, parents, backward, depth, size):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.depth = depth
        self.size = size


class Tape:
    """Append-only record of differentiable operations.

    ``nodes`` counts recorded forward ops, ``depth`` is the longest operand
    chain and ``activations`` the total number of float elements produced by
    recorded ops (a proxy for stored activations).
    """

    def __init__(self, retain: bool = False):
        self.retain = retain
        self._nodes: list[Node] = []
        self.n_nodes = 0
        self.depth = 0
        self.activations = 0
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return self.n_nodes

    def _record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self._nodes.append(node)
        self.n_nodes += 1
        self.activations += node.size
        if node.depth > self.depth:
            self.depth = node.depth

    def mark(self) -> tuple[int, int]:
        """Snapshot of (nodes, activations) for measuring a sub-segment."""
        return self.n_nodes, self.activations

    def backward(self, root: "Tensor", wrt: Iterable["Tensor"] | None = None) -> "Gradients":
        """Propagate d(root)/d(.) back to every leaf that requires a gradient."""
        if self.consumed:
            raise TapeError("backward on a consumed tape (use Tape(retain=True) to reuse)")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[object, np.ndarray] = {}
        leaves: list[Tensor] = []
        if root._node is not None:
            grads[root._node] = np.ones_like(root.data)
            start = None
            for i in range(len(self._nodes) - 1, -1, -1):
                if self._nodes[i] is root._node:
                    start = i
                    break
            if start is None:
                raise TapeError("root was not recorded on this tape")
            for node in reversed(self._nodes[: start + 1]):
                g = grads.pop(node, None)
                if g is None:
                    continue
                parent_grads = node.backward(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = p._node if p._node is not None else p
                    if key is p and key not in grads:
                        leaves.append(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        elif root.requires_grad:
            leaves.append(root)
            grads[root] = np.ones_like(root.data)
        out = Gradients()
        for leaf in leaves:
            out._store[id(leaf)] = (leaf, grads[leaf])
        if wrt is not None:
            for t in wrt:
                if id(t) not in out._store:
                    out._store[id(t)] = (t, np.zeros_like(t.data))
        if not self.retain:
            self.free()
        return out

    def free(self) -> None:
        self._nodes = []
        self.consumed = True


class Gradients:
    """Mapping from leaf tensors to gradient arrays (keyed by identity)."""

    def __init__(self):
        self._store: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __getitem__(self, t: "Tensor") -> np.ndarray:
        try:
            return self._store[id(t)][1]
        except KeyError:
            return np.zeros_like(t.data)

    def __contains__(self, t: "Tensor") -> bool:
        return id(t) in self._store

    def __len__(self) -> int:
        return len(self._store)

    def items(self):
        return [v for v in self._store.values()]


def graph_depth_and_node_count(tape: Tape) -> tuple[int, int]:
    return tape.depth, tape.n_nodes


class Tensor:
    __slots__ = ("data", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, idx):
        return _getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._node = None
    if _ACTIVE and any(p.requires_grad for p in parents):
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        tape = _ACTIVE[-1]
        depth = 1 + max((p._node.depth if p._node is not None else 0) for p in parents)
        node = Node(op, tuple(parents), backward, depth, data.size)
        out.requires_grad = True
        out._node = node
        tape._record(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b),
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), "mean", (a,), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, "power", (a,), lambda g: (g * p * ad ** (p - 1),))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sgn,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), "clamp_min", (a,), lambda g: (g * mask,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _make(ad * sig, "silu", (a,), lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), "sin", (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), "cos", (a,), lambda g: (-g * np.sin(ad),))


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    sa = a.shape
    return _make(out, "broadcast", (a,), lambda g: (_unbroadcast(g, sa),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {sa} to {tuple(shape)}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(sa),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, "transpose", (a,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, "concat", tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def index_select(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    sa = a.shape

    def back(g):
        full = np.zeros(sa)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), "index_select", (a,), back)


def _getitem(a: Tensor, idx) -> Tensor:
    sa = a.shape

    def back(g):
        full = np.zeros(sa)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), "getitem", (a,), back)


def logsumexp(a, axis=None) -> Tensor:
    """log(sum(exp(a))) with a constant max shift for stability."""
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    s = sum(exp(sub(a, shift)), axis=axis, keepdims=True)
    out = add(log(s), shift)
    if axis is None:
        return reshape(out, ())
    return reshape(out, np.squeeze(out.data, axis=axis).shape)


def sort_with_gradient(v) -> tuple[Tensor, np.ndarray]:
    """Stable ascending sort; backward scatters through the permutation.

    Accepts a 1-D tensor, or a 2-D tensor sorted independently per column.
    """
    v = as_tensor(v)
    if np.any(np.isnan(v.data)):
        raise ValueError("sort_with_gradient: NaN in input")
    if v.ndim == 1:
        perm = np.argsort(v.data, kind="stable")

        def back(g):
            out = np.empty_like(g)
            out[perm] = g
            return (out,)

        return _make(v.data[perm], "sort", (v,), back), perm
    if v.ndim != 2:
        raise ShapeError(f"sort_with_gradient: expected 1-D or 2-D input, got {v.shape}")
    perm = np.argsort(v.data, axis=0, kind="stable")
    cols = np.arange(v.shape[1])[None, :]

    def back2(g):
        out = np.empty_like(g)
        out[perm, cols] = g
        return (out,)

    return _make(v.data[perm, cols], "sort", (v,), back2), perm


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5,
              rtol: float = 1e-4, atol: float = 1e-8) -> tuple[bool, float]:
    """Compare tape gradients of scalar ``fn`` with central finite differences.

    Returns (passed, worst relative error). The relative error of each entry is
    ``|a - n| / max(|a|, |n|, atol / rtol)`` so tiny gradients use an absolute floor.
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*leaves)
    grads = tape.backward(out)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = grads[leaf]
        numeric = np.zeros_like(leaf.data)
        base = [np.array(x, dtype=np.float64) for x in inputs]
        flat = base[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(*[Tensor(b) for b in base]).data.item()
            flat[i] = orig - step
            fm = fn(*[Tensor(b) for b in base]).data.item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
        err = np.max(np.abs(analytic - numeric) / scale) if analytic.size else 0.0
        worst = max(worst, float(err))
    return worst <= rtol, worst
