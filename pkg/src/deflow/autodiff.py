"""Reverse-mode automatic differentiation on dense float64 arrays.

Small, explicit engine: a :class:`Tensor` wraps a row-major float64 numpy
array, and a :class:`Tape` (used as a context manager) records every
differentiable operation executed while it is active.  ``backward`` replays
the tape in strict reverse execution order and accumulates gradients into
the participating leaves.  There is no implicit global graph; a tape is
created per forward pass and consumed by its backward pass.

Everything is 64-bit.  Invertibility and log-determinant checks elsewhere
in the package rely on that precision.
"""

from __future__ import annotations

import struct
import threading

import numpy as np

_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are recorded.  ``backward`` consumes the tape:
    saved intermediates are released and a second backward is rejected.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn), execution order
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape context exited out of order")
        stack.pop()
        return False

    def _record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def clear(self):
        self._records.clear()
        self.consumed = True


class Tensor:
    """Dense N-dimensional float64 array, optionally tracked for gradients.

    Tensors are immutable once created except for gradient accumulation in
    ``backward`` and explicit in-place parameter updates between passes
    (``data`` is exposed for the optimizer).  Non-finite values are never
    raised on silently: query ``all_finite`` to check.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C" copies only when needed and keeps 0-d shape
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False):
        return Tensor(np.ones(shape), requires_grad)

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def all_finite(self) -> bool:
        """Explicit NaN/Inf query; ops flag rather than raise."""
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar (definitions below) ----------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make_op(out_data, inputs, backward_fn) -> Tensor:
    """Wrap a result; record on the active tape if any input needs grads."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._record(out, inputs, backward_fn)
    return out


def _reduce_to_shape(grad: np.ndarray, shape) -> np.ndarray:
    """Undo numpy broadcasting: sum grad down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{opname}: shapes {tuple(a.shape)} and {tuple(b.shape)} are not "
            "broadcast-compatible"
        ) from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)

    return _make_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)

    return _make_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to_shape(g * bd, a.shape), _reduce_to_shape(g * ad, b.shape)

    return _make_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def backward(g):
        ga = g / bd
        gb = -g * out / bd
        return _reduce_to_shape(ga, a.shape), _reduce_to_shape(gb, b.shape)

    return _make_op(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log; non-positive inputs yield NaN/-inf, flagged not raised."""
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

        def backward(g):
            return (g / a.data,)

    return _make_op(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


# -- reductions and shape moves ----------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, tuple(sorted(i % len(in_shape) for i in ax)))
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make_op(out, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in ax]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    out = a.data.reshape(shape)
    return _make_op(out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a, perm) -> Tensor:
    a = as_tensor(a)
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    return _make_op(
        np.ascontiguousarray(a.data.transpose(perm)),
        (a,),
        lambda g: (g.transpose(inv),),
    )


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make_op(np.concatenate([t.data for t in tensors], axis=axis),
                    tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(
            f"narrow: [{start}, {start + length}) out of range for extent "
            f"{a.shape[axis]} on axis {axis}"
        )
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape)
        full[sl] = g
        return (full,)

    return _make_op(np.ascontiguousarray(a.data[sl]), (a,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make_op(ad @ bd, (a, b), backward)


def matrix_inverse(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix_inverse expects a square matrix, got {a.shape}")
    out = np.linalg.inv(a.data)

    def backward(g):
        return (-out.T @ g @ out.T,)

    return _make_op(out, (a,), backward)


def logdet(a) -> Tensor:
    """ln|det A| as a scalar tensor; rejects singular input loudly."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"logdet expects a square matrix, got {a.shape}")
    sign, val = np.linalg.slogdet(a.data)
    if sign == 0:
        raise ValueError("logdet: matrix is singular")
    inv_t = np.linalg.inv(a.data).T

    def backward(g):
        return (g * inv_t,)

    return _make_op(val, (a,), backward)


# -- convolution -------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N, C*9, H*W] patches of the zero-padded input."""
    n, c, h, w = x.shape
    padded = np.zeros((n, c, h + 2, w + 2))
    padded[:, :, 1:-1, 1:-1] = x
    s = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded, shape=(n, c, 3, 3, h, w), strides=(s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return windows.reshape(n, c * 9, h * w)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the input."""
    n, c, h, w = shape
    g = cols.reshape(n, c, 3, 3, h, w)
    padded = np.zeros((n, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            padded[:, :, i:i + h, j:j + w] += g[:, :, i, j]
    return padded[:, :, 1:-1, 1:-1]


def conv2d(x, kernel, bias) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; spatial extents preserved."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [N,C,H,W], got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernel must be [C',C,3,3], got {kernel.shape}")
    n, c, h, w = x.shape
    c_out, c_in = kernel.shape[0], kernel.shape[1]
    if c_in != c:
        raise ValueError(
            f"conv2d: kernel expects {c_in} input channels, input has {c}"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias must be [{c_out}], got {bias.shape}")

    cols = _im2col(x.data)  # [N, C*9, H*W]
    w2 = kernel.data.reshape(c_out, c * 9)
    out = (w2[None] @ cols).reshape(n, c_out, h, w) + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, c_out, h * w)
        grad_bias = g.sum(axis=(0, 2, 3))
        grad_w = np.einsum("nop,nkp->ok", g2, cols).reshape(kernel.shape)
        grad_cols = w2.T[None] @ g2
        grad_x = _col2im(grad_cols, (n, c, h, w))
        return grad_x, grad_w, grad_bias

    return _make_op(out, (x, kernel, bias), backward)


# -- nearest-neighbor resize (integer factors) -------------------------------

def nn_resize(x, out_hw) -> Tensor:
    """Nearest-neighbor spatial resize of [N,C,H,W] by an integer factor."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return reshape(x, x.shape)  # identity with gradient passthrough
    if oh >= h:
        if oh % h or ow % w:
            raise ValueError(f"nn_resize: {h}x{w} -> {oh}x{ow} is not an integer upscale")
        kh, kw = oh // h, ow // w
        out = np.repeat(np.repeat(x.data, kh, axis=2), kw, axis=3)

        def backward(g):
            return (g.reshape(n, c, h, kh, w, kw).sum(axis=(3, 5)),)

        return _make_op(out, (x,), backward)
    if h % oh or w % ow:
        raise ValueError(f"nn_resize: {h}x{w} -> {oh}x{ow} is not an integer downscale")
    kh, kw = h // oh, w // ow

    def backward(g):
        full = np.zeros((n, c, h, w))
        full[:, :, ::kh, ::kw] = g
        return (full,)

    return _make_op(np.ascontiguousarray(x.data[:, :, ::kh, ::kw]), (x,), backward)


# -- backward pass -----------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every participating leaf's ``grad``.

    The loss must be a scalar produced on a live tape; the tape is consumed.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not produced on an active tape")
    if tape.consumed:
        raise RuntimeError("backward on a consumed tape")

    grads = {id(loss): np.array(1.0)}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, gin in zip(inputs, in_grads):
            if gin is None or not t.requires_grad:
                continue
            if t._tape is None:
                # leaf: accumulate into .grad
                if t.grad is None:
                    t.grad = np.zeros(t.shape)
                t.grad += gin
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
    tape.clear()


# -- raw tensor file format ---------------------------------------------------
# 8-byte magic, u32 rank, u32 extents, float64 little-endian values.

TENSOR_MAGIC = b"TNSR\x00\x01\x00\x00"


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        f.write(tensor_bytes(t))


def tensor_bytes(t: Tensor) -> bytes:
    head = TENSOR_MAGIC + struct.pack("<I", t.ndim)
    head += struct.pack(f"<{t.ndim}I", *t.shape)
    return head + t.data.astype("<f8").tobytes()


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:8] != TENSOR_MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 8)
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    expected = offset + 8 * count
    if len(buf) < expected:
        raise ValueError(
            f"truncated tensor file: need {expected} bytes, have {len(buf)}"
        )
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return Tensor(data.reshape(shape).astype(np.float64))
