"""Dense arrays with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy array. Operations on tensors that
require gradients are recorded on the active :class:`Tape`; ``backward``
replays that record in reverse and accumulates ``.grad`` on tracked leaves.

Recording only happens inside ``with Tape():``. Outside a tape every
operation is a plain numpy computation, which is what evaluation uses.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError, StateError

_TAPES: list["Tape"] = []


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    The append order is a topological order of the graph, so a reverse walk
    visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.frozen = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    @property
    def recording(self) -> bool:
        return not self.frozen

    def record(self, node: _Node) -> None:
        if self.frozen:
            raise StateError("cannot record on a frozen tape; open a new Tape()")
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []
        self.frozen = False

    def backward(self, loss: "Tensor") -> None:
        if self.frozen:
            raise StateError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        if loss.is_leaf and loss.requires_grad:
            loss.grad += np.ones_like(loss.data)
        self.frozen = True
        self.nodes = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, inputs: tuple, backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.is_leaf = True
        out.requires_grad = False
        out._tape = None
        tape = _active_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.is_leaf = False
            out._tape = tape
            tape.record(_Node(inputs, out, backward))
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # nothing tracked on the path: leaf gradients stay as they are (zero)
        return
    tape.backward(loss)


# -- elementwise ---------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(out, (a, b),
                          lambda g: (_unbroadcast(g / bd, ad.shape),
                                     _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return Tensor._result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,))


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return Tensor._result(out, (a, b), bw)


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``.

    ``weight`` is stored (out_features, in_features).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, inputs, bw)


# -- reductions and shape ops -----------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = range(a.ndim) if axis is None else ((axis,) if isinstance(axis, int) else axis)
    count = math.prod(shape[ax] for ax in axes)
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,),
                          lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, src),))


def getitem(a, idx) -> Tensor:
    """Basic (slice / integer) indexing."""
    a = as_tensor(a)
    src, dtype = a.shape, a.dtype
    out = a.data[idx]

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        full[idx] += g
        return (full,)

    return Tensor._result(out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=ax)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return Tensor._result(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes {shape} and {t.shape} differ")
    out = np.stack([t.data for t in ts], axis=axis)
    return Tensor._result(out, ts,
                          lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def pad_left(a, count: int, axis: int) -> Tensor:
    """Zero-pad ``count`` entries at the start of ``axis``."""
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (count, 0)
    n = a.shape[axis]
    out = np.pad(a.data, widths)
    return Tensor._result(out, (a,),
                          lambda g: (np.take(g, range(count, count + n), axis=axis),))


# -- stochastic ---------------------------------------------------------------------

def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ParameterError("train-mode dropout needs a random generator")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,))


# -- recurrence -----------------------------------------------------------------------

def scan(step: Callable[[Tensor, Tensor], Tensor], init, xs, axis: int = 1):
    """Run ``carry = step(carry, xs[..., t, ...])`` over ``axis``.

    Returns the stacked carries (time inserted at ``axis``) and the final
    carry. The loop is unrolled onto the tape, so gradients flow through
    whatever ``step`` records.
    """
    xs = as_tensor(xs)
    carry = as_tensor(init)
    outs = []
    index = [slice(None)] * xs.ndim
    for t in range(xs.shape[axis]):
        index[axis] = t
        carry = step(carry, xs[tuple(index)])
        outs.append(carry)
    if not outs:
        raise ShapeError(f"scan: empty time axis in shape {xs.shape}")
    return stack(outs, axis=axis), carry


# -- gradient verification ------------------------------------------------------------

def finite_difference_gradient(f: Callable[[], float], params: Sequence, step: float = 1e-5,
                               kink_tol: float = 1e-2):
    """Central-difference gradient of ``f`` with respect to every element of ``params``.

    ``params`` are arrays (or tensors) that ``f`` reads; they are perturbed in
    place and restored. Returns ``(grads, comparable)`` lists. An element is
    marked non-comparable when its one-sided slopes disagree by more than
    ``kink_tol`` relative to their size, which flags kinks such as ``|x|`` at 0.
    """
    if not step > 0:
        raise ParameterError(f"finite-difference step must be positive, got {step}")
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]

    def evaluate(k, idx):
        v = float(f())
        if not math.isfinite(v):
            raise NumericError(f"non-finite objective at parameter {k}, index {idx}")
        return v

    base = evaluate(-1, None)
    grads, masks = [], []
    for k, arr in enumerate(arrays):
        g = np.zeros(arr.shape, dtype=np.float64)
        ok = np.ones(arr.shape, dtype=bool)
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ParameterError(f"parameter {k} is not contiguous; cannot perturb in place")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate(k, i)
            flat[i] = orig - step
            fm = evaluate(k, i)
            flat[i] = orig
            fwd = (fp - base) / step
            bwd = (base - fm) / step
            g.flat[i] = (fp - fm) / (2.0 * step)
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                ok.flat[i] = False
        grads.append(g)
        masks.append(ok)
    return grads, masks


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def primitive_set() -> dict[str, Callable]:
    """Catalogue of the differentiable primitives this module provides."""
    return {
        "matmul": matmul, "affine": affine, "add": add, "sub": sub, "mul": mul,
        "div": div, "neg": neg, "sigmoid": sigmoid, "tanh": tanh, "silu": silu,
        "softplus": softplus, "exp": exp, "abs": abs_, "concat": concat, "stack": stack,
        "getitem": getitem, "reshape": reshape, "transpose": transpose,
        "broadcast_to": broadcast_to, "pad_left": pad_left, "sum": sum_, "mean": mean,
        "dropout": dropout, "scan": scan,
    }
