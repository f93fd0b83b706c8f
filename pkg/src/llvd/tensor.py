"""Dense tensors and a reverse-mode tape covering the operations LLVD needs.

Tensors wrap read-only numpy arrays. Differentiable operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) are recorded on that tape
whenever at least one input requires a gradient; :func:`backward` then walks the
record in reverse and returns one gradient per leaf.

Convolutions follow the cross-correlation convention with zero padding.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used when building tensors from raw data.

    ``precision(np.float64)`` is the gradient-checking mode; everything else
    runs in float32.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has dims {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype or default_dtype()))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of differentiable operations (one logical stream)."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _get("tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def reset(self):
        self.nodes.clear()

    def leaves(self) -> list[Tensor]:
        produced = {id(n.output) for n in self.nodes}
        seen, out = set(), []
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _active_tape() -> Tape | None:
    stack = _get("tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording (inference paths)."""
    prev = _get("tapes", None)
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = prev


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        t = Tensor._wrap(out, requires_grad=True)
        tape.nodes.append(Node(op, tuple(inputs), t, vjp))
        return t
    return Tensor._wrap(out)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Propagate d(loss)/d(leaf) for every requires_grad leaf recorded on ``tape``.

    The tape is consumed. Leaves that never reach ``loss`` receive zero gradients;
    tensors that are not on the tape are absent from the result.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    leaves = tape.leaves()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        result[leaf] = Tensor._wrap(np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape))
    tape.reset()
    return result


# ----------------------------------------------------------------- MAC counting


class MacCounter:
    """Tally of multiply-accumulates executed by convolution kernels."""

    def __init__(self):
        self.macs = 0
        self.calls: list[tuple[str, int]] = []

    def add(self, op, n):
        self.macs += int(n)
        self.calls.append((op, int(n)))


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    prev = _get("counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def _tally(op, n):
    counter = _get("counter", None)
    if counter is not None:
        counter.add(op, n)


# ------------------------------------------------------------------ elementwise


def _same_dims(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: dims {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dims("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dims("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dims("mul", a, b)
    x, y = a.data, b.data
    return _record("mul", (a, b), x * y, lambda g: (g * y, g * x))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_dims("div", a, b)
    x, y = a.data, b.data
    out = x / y
    return _record("div", (a, b), out, lambda g: (g / y, -g * out / y))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record("add_scalar", (a,), a.data + c, lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # keep the codomain open: rounding would otherwise hit exactly 0 or 1
    fi = np.finfo(out.dtype)
    out = np.clip(out, fi.tiny, 1.0 - fi.epsneg)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), a.data * mask, lambda g: (g * mask,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _record("square", (a,), x * x, lambda g: (2 * g * x,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    out = np.asarray(a.data.mean())
    return _record("mean", (a,), out, lambda g: (np.broadcast_to(g / n, shape),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat along axis {axis}: {ref} vs {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def concat_channels(*tensors: Tensor) -> Tensor:
    for t in tensors:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels expects 4-D tensors, got {t.shape}")
    return concat(tensors, axis=1)


def split_channels(a: Tensor, parts: int) -> list[Tensor]:
    """Split the channel axis into ``parts`` equal slices."""
    c = a.shape[1]
    if c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts} parts")
    step = c // parts
    outs = []
    for i in range(parts):
        sl = slice(i * step, (i + 1) * step)

        def vjp(g, sl=sl):
            full = np.zeros_like(a.data)
            full[:, sl] = g
            return (full,)

        outs.append(_record("slice", (a,), a.data[:, sl].copy(), vjp))
    return outs


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, tanh, relu, concat_channels."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "sigmoid": sigmoid,
        "tanh": tanh,
        "relu": relu,
        "concat_channels": concat_channels,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ----------------------------------------------------------------- convolutions


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, ho, wo, k, k) strided view."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter(cols: np.ndarray, shape, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: accumulate (N, C, ho, wo, k, k) into ``shape``."""
    out = np.zeros(shape, dtype=cols.dtype)
    _, _, ho, wo, k, _ = cols.shape
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky : ky + (ho - 1) * stride + 1 : stride, kx : kx + (wo - 1) * stride + 1 : stride] += cols[
                ..., ky, kx
            ]
    return out


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, in_axis: int, out_axis: int, name: str):
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{name}: expected 4-D input and square 4-D weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(
            f"{name}: input has {x.shape[1]} channels but weight expects {w.shape[in_axis]}"
        )
    if b is not None and b.shape != (w.shape[out_axis],):
        raise ShapeError(f"{name}: bias shape {b.shape} does not match {w.shape[out_axis]} output channels")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,k,k]; padding defaults to k // 2."""
    _check_conv(x, w, b, 1, 0, "conv2d")
    k = w.shape[2]
    p = k // 2 if padding is None else padding
    if stride < 1 or p < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    n, cin, h, wd = x.shape
    if k > h + 2 * p or k > wd + 2 * p:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * p}x{wd + 2 * p}")
    ho, wo = (h + 2 * p - k) // stride + 1, (wd + 2 * p - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(xp, k, stride, ho, wo)
    W = w.data
    _tally("conv2d", n * ho * wo * cin * k * k * W.shape[0])
    out = np.tensordot(cols, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, W, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gxp = _scatter(gcols, xp.shape, stride)
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, vjp)


def conv2d_transpose(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int | None = None,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d` in its input, with w[Cin,Cout,k,k].

    Output extent is (H - 1) * stride - 2 * padding + k + output_padding;
    ``output_padding`` (< stride) picks between the input sizes that conv2d maps
    onto the same output size.
    """
    _check_conv(x, w, b, 0, 1, "conv2d_transpose")
    k = w.shape[2]
    p = k // 2 if padding is None else padding
    if stride < 1 or p < 0 or not 0 <= output_padding < stride:
        raise ValueError("need stride >= 1, padding >= 0, 0 <= output_padding < stride")
    n, cin, h, wd = x.shape
    cout = w.shape[1]
    ho = (h - 1) * stride - 2 * p + k + output_padding
    wo = (wd - 1) * stride - 2 * p + k + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: empty output {ho}x{wo}")
    full = (n, cout, (h - 1) * stride + k + output_padding, (wd - 1) * stride + k + output_padding)
    W = w.data
    _tally("conv2d_transpose", n * h * wd * cin * cout * k * k)
    cols = np.tensordot(x.data, W, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _scatter(cols, full, stride)[:, :, p : p + ho, p : p + wo]
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    xd = x.data

    def vjp(g):
        gp = np.zeros(full, dtype=g.dtype)
        gp[:, :, p : p + ho, p : p + wo] = g
        gcols = _windows(gp, k, stride, h, wd)
        gx = None
        if x.requires_grad:
            gx = np.tensordot(gcols, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, gcols, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d_transpose", inputs, out, vjp)


# --------------------------------------------------------------- pixel shuffle


def _unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def _shuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c // (r * r), h * r, w * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: out channel c * r**2 + dy * r + dx holds offset (dy, dx) of input channel c."""
    if x.ndim != 4 or r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: factor {r} does not divide spatial dims of {x.shape}")
    if r == 1:
        return x
    return _record("pixel_unshuffle", (x,), np.ascontiguousarray(_unshuffle(x.data, r)), lambda g: (_shuffle(g, r),))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space; exact inverse of :func:`pixel_unshuffle`."""
    if x.ndim != 4 or r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {r}**2 does not divide the {x.shape[1]} channels")
    if r == 1:
        return x
    return _record("pixel_shuffle", (x,), np.ascontiguousarray(_shuffle(x.data, r)), lambda g: (_unshuffle(g, r),))
