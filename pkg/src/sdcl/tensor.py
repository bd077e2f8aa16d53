"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation goes through :func:`apply`, which runs the
forward kernel and, when any input requires a gradient, records a node that
knows how to push the output gradient back to its inputs.  Nodes are numbered
in creation order, so walking them in reverse creation order is a valid
topological order (the tape).

Spatial tensors use the layout ``(batch, channel, W, H, D)``; 2D data carries
``D == 1``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Any, Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()
_node_counter = itertools.count()


class TensorError(ValueError):
    """Raised for shape mismatches, non-finite inputs and misuse of backward."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (used for teacher inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class _Node:
    __slots__ = ("order", "inputs", "backward_fn")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.order = next(_node_counter)
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    The value array is treated as immutable once the tensor is created; only
    ``grad`` changes.  Parameters are leaves created with
    ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_consumed", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 5:
            raise TensorError("tensor", f"at most 5 axes supported, got {arr.ndim}")
        if any(n <= 0 for n in arr.shape):
            raise TensorError("tensor", f"all extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError("item", f"tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar, all routed through apply().
    def __add__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return apply("add", [self, other])
        return apply("shift", [self], value=float(other))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return apply("negate", [self])

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return apply("add", [self, apply("negate", [other])])
        return apply("shift", [self], value=-float(other))

    def __rsub__(self, other: float) -> "Tensor":
        return apply("shift", [apply("negate", [self])], value=float(other))

    def __mul__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise TensorError("scale", "use mul_mask/div for tensor-tensor products")
        return apply("scale", [self], factor=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return apply("div", [self, other])
        return apply("scale", [self], factor=1.0 / float(other))

    def backward(self) -> None:
        backward(self)


def as_tensor(x: "Tensor | np.ndarray | float") -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Kernels.  Each returns (output array, backward closure).  The closure maps
# the output gradient to a tuple of input gradients (None where not needed).
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        axes = [i for i, (m, n) in enumerate(zip(a.shape, b.shape)) if m != n]
        if a.ndim != b.ndim:
            raise TensorError(op, f"rank mismatch {a.shape} vs {b.shape}")
        raise TensorError(op, f"shape mismatch {a.shape} vs {b.shape} on axes {axes}")


class _ConvGeometry:
    """Flat layout of a zero-padded batch in which every kernel tap is a fixed 1-D offset.

    Channels lead and the (batch, padded spatial) axes are flattened, with a
    margin on both ends so that shifted slices never leave the buffer.  Border
    positions of the padded grid hold junk after a matmul and are cropped.
    """

    def __init__(self, xshape, kshape):
        self.batch, self.channels = xshape[:2]
        self.spatial = tuple(xshape[2:])
        self.pad = tuple(k // 2 for k in kshape)
        self.padded = tuple(n + 2 * p for n, p in zip(self.spatial, self.pad))
        _, hp, dp = self.padded
        self.offsets = [
            (a - self.pad[0]) * hp * dp + (b - self.pad[1]) * dp + (c - self.pad[2])
            for a in range(kshape[0])
            for b in range(kshape[1])
            for c in range(kshape[2])
        ]
        self.margin = self.pad[0] * hp * dp + self.pad[1] * dp + self.pad[2]
        self.n = self.batch * int(np.prod(self.padded))

    def interior(self):
        return (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(self.pad, self.spatial))

    def embed(self, v):
        """(B, C, W, H, D) -> zero-padded (C, B*Wp*Hp*Dp) matrix."""
        full = np.zeros((v.shape[1], self.batch) + self.padded)
        full[self.interior()] = v.transpose(1, 0, 2, 3, 4)
        return full.reshape(v.shape[1], self.n)

    def crop(self, mat):
        """Inverse of :meth:`embed` on the interior."""
        full = mat.reshape((mat.shape[0], self.batch) + self.padded)
        return np.ascontiguousarray(full[self.interior()].transpose(1, 0, 2, 3, 4))

    def columns(self, x):
        """Tap-major column matrix of shape (taps*C, n)."""
        c, m, n = self.channels, self.margin, self.n
        flat = np.zeros((c, n + 2 * m))
        flat[:, m:m + n] = self.embed(x)
        cols = np.empty((len(self.offsets) * c, n))
        for k, off in enumerate(self.offsets):
            cols[k * c:(k + 1) * c] = flat[:, m + off:m + off + n]
        return cols

    def scatter(self, gcols):
        """Adjoint of :meth:`columns`, cropped back to (B, C, W, H, D)."""
        c, m, n = self.channels, self.margin, self.n
        flat = np.zeros((c, n + 2 * m))
        for k, off in enumerate(self.offsets):
            flat[:, m + off:m + off + n] += gcols[k * c:(k + 1) * c]
        return self.crop(flat[:, m:m + n])


def _k_conv(inputs, need, attrs):
    x, w = inputs
    if x.ndim != 5 or w.ndim != 5:
        raise TensorError("conv", f"expected 5-D input and kernel, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise TensorError("conv", f"channel mismatch on axis 1: input {x.shape[1]}, kernel {w.shape[1]}")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise TensorError("conv", f"kernel extents must be odd, got {w.shape[2:]}")
    geo = _ConvGeometry(x.shape, w.shape[2:])
    # weight columns ordered (tap, in-channel) to match the column matrix
    wmat = w.transpose(0, 2, 3, 4, 1).reshape(w.shape[0], -1)
    cols = geo.columns(x)
    out = geo.crop(wmat @ cols)
    if not need[1]:
        cols = None  # only the weight gradient reads the columns

    def back(g):
        gx = gw = None
        gmat = geo.embed(g)
        if need[0]:
            gx = geo.scatter(wmat.T @ gmat)
        if need[1]:
            o, c = w.shape[:2]
            gw = (gmat @ cols.T).reshape((o,) + w.shape[2:] + (c,)).transpose(0, 4, 1, 2, 3)
        return gx, gw

    return out, back


def _k_bias(inputs, need, attrs):
    x, b = inputs
    if b.ndim != 1 or x.ndim < 2 or b.shape[0] != x.shape[1]:
        raise TensorError("bias", f"bias shape {b.shape} incompatible with channel axis of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    out = x + b.reshape(view)

    def back(g):
        sum_axes = (0,) + tuple(range(2, g.ndim))
        return g, g.sum(axis=sum_axes)

    return out, back


def _k_relu(inputs, need, attrs):
    (x,) = inputs
    positive = x > 0
    out = np.where(positive, x, 0.0)
    return out, lambda g: (g * positive,)


def _k_add(inputs, need, attrs):
    a, b = inputs
    _check_same_shape("add", a, b)
    return a + b, lambda g: (g, g)


def _k_mul_mask(inputs, need, attrs):
    (x,) = inputs
    mask = np.asarray(attrs["mask"], dtype=DTYPE)
    try:
        out = x * mask
    except ValueError:
        raise TensorError("mul_mask", f"mask shape {mask.shape} does not broadcast to {x.shape}") from None
    if out.shape != x.shape:
        raise TensorError("mul_mask", f"mask shape {mask.shape} would broadcast {x.shape} to {out.shape}")
    return out, lambda g: (g * mask,)


def _k_div(inputs, need, attrs):
    a, b = inputs
    _check_same_shape("div", a, b)
    if np.any(b == 0):
        raise TensorError("div", "division by zero")
    out = a / b
    return out, lambda g: (g / b, -g * a / (b * b))


def _k_softmax(inputs, need, attrs):
    (x,) = inputs
    axis = attrs.get("axis", 1)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return out, back


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _k_sum(inputs, need, attrs):
    (x,) = inputs
    axes = _normalize_axes(attrs.get("axis"), x.ndim)
    keepdims = attrs.get("keepdims", False)
    out = x.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, back


def _k_mean(inputs, need, attrs):
    (x,) = inputs
    axes = _normalize_axes(attrs.get("axis"), x.ndim)
    keepdims = attrs.get("keepdims", False)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.sum(axis=axes, keepdims=keepdims) / count

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return out, back


def _k_broadcast(inputs, need, attrs):
    (x,) = inputs
    shape = tuple(attrs["shape"])
    try:
        out = np.broadcast_to(x, shape).copy()
    except ValueError:
        raise TensorError("broadcast", f"cannot broadcast {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim
    stretched = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        return (g.sum(axis=stretched, keepdims=True) if stretched else g,)

    return out, back


def _k_log(inputs, need, attrs):
    (x,) = inputs
    floor = attrs.get("clamp")
    if floor is None:
        if np.any(x <= 0):
            raise TensorError("log", "non-positive input without clamp")
        return np.log(x), lambda g: (g / x,)
    active = x > floor
    safe = np.where(active, x, floor)
    return np.log(safe), lambda g: (np.where(active, g / safe, 0.0),)


def _k_square(inputs, need, attrs):
    (x,) = inputs
    return x * x, lambda g: (2.0 * x * g,)


def _k_negate(inputs, need, attrs):
    (x,) = inputs
    return -x, lambda g: (-g,)


def _k_scale(inputs, need, attrs):
    (x,) = inputs
    factor = float(attrs["factor"])
    return x * factor, lambda g: (g * factor,)


def _k_shift(inputs, need, attrs):
    (x,) = inputs
    return x + float(attrs["value"]), lambda g: (g,)


_KERNELS: dict[str, Callable] = {
    "conv": _k_conv,
    "bias": _k_bias,
    "relu": _k_relu,
    "add": _k_add,
    "mul_mask": _k_mul_mask,
    "div": _k_div,
    "softmax": _k_softmax,
    "sum": _k_sum,
    "mean": _k_mean,
    "broadcast": _k_broadcast,
    "log": _k_log,
    "square": _k_square,
    "negate": _k_negate,
    "scale": _k_scale,
    "shift": _k_shift,
}

OP_KINDS = tuple(_KERNELS)

_ARITY = {"conv": 2, "bias": 2, "add": 2, "div": 2}


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Run one op and record it for backward when any input needs a gradient."""
    try:
        kernel = _KERNELS[op_kind]
    except KeyError:
        raise TensorError(op_kind, f"unknown op kind; expected one of {OP_KINDS}") from None
    inputs = [as_tensor(t) for t in inputs]
    if len(inputs) != _ARITY.get(op_kind, 1):
        raise TensorError(op_kind, f"expected {_ARITY.get(op_kind, 1)} inputs, got {len(inputs)}")
    for i, t in enumerate(inputs):
        if not np.isfinite(t.data).all():
            raise TensorError(op_kind, f"input {i} contains non-finite values")
    record = is_grad_enabled() and any(t.requires_grad for t in inputs)
    need = tuple(record and t.requires_grad for t in inputs)
    out_data, back = kernel([t.data for t in inputs], need, attrs)
    out = Tensor(out_data, requires_grad=record)
    if record:
        out._node = _Node(inputs, back)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise TensorError("backward", f"loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TensorError("backward", "graph already consumed; rebuild it before calling backward again")
    if not loss.requires_grad:
        raise TensorError("backward", "loss does not depend on any requires_grad tensor")
    loss._consumed = True
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return

    # Collect the reachable part of the tape.
    nodes: dict[int, tuple[_Node, Tensor]] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            nodes[t._node.order] = (t._node, t)
            stack.extend(t._node.inputs)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for order in sorted(nodes, reverse=True):
        node, t = nodes[order]
        g = pending.pop(id(t), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
        # Free the closure so intermediate buffers can be released early.
        node.backward_fn = _consumed_backward
        t._consumed = True


def _consumed_backward(g):
    raise TensorError("backward", "graph already consumed")


# Convenience wrappers used by nets and losses.


def conv(x: Tensor, w: Tensor) -> Tensor:
    return apply("conv", [x, w])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return apply("bias", [x, b])


def relu(x: Tensor) -> Tensor:
    return apply("relu", [x])


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return apply("softmax", [x], axis=axis)


def mul_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    return apply("mul_mask", [x], mask=mask)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply("sum", [x], axis=axis, keepdims=keepdims)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", [x], axis=axis, keepdims=keepdims)


def log(x: Tensor, clamp: float | None = None) -> Tensor:
    return apply("log", [x], clamp=clamp)


def square(x: Tensor) -> Tensor:
    return apply("square", [x])


def numeric_grad(f: Callable[[], float], array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
