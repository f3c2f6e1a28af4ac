"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every op builds a new :class:`Tensor` whose ``_backward`` closure knows how
to push the output gradient into its parents. :func:`backward` linearises
the graph into a :class:`Tape` (topological order) and replays it in
reverse.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import kernels

LRELU_SLOPE = 0.2

_state = threading.local()


class DimensionError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


class ContractError(RuntimeError):
    """Raised when an API precondition (not a shape) is violated."""


class NumericError(FloatingPointError):
    """Raised when a non-finite value shows up where it must not."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)


class Tape:
    """Operations reachable from a root, in topological order.

    ``ops[k]`` never appears before the producers of its inputs.
    """

    def __init__(self, root: Tensor):
        order = []
        seen = set()
        stack = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.ops = [t for t in order if t._backward is not None]
        self.nodes = order

    def __len__(self):
        return len(self.ops)

    def replay(self, seed_grad):
        grads = {id(self.nodes[-1]): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(output: Tensor):
    """Accumulate d(output)/d(leaf) into every ``requires_grad`` leaf."""
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    Tape(output).replay(np.ones_like(output.data))


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, b)
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def scale(a: Tensor, k: float):
    k = float(k)
    return _result(a.data * a.data.dtype.type(k), (a,), lambda g: (g * g.dtype.type(k),))


def absolute(a: Tensor):
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def lrelu(x: Tensor, slope: float = LRELU_SLOPE):
    """Leaky ReLU: ``x`` where ``x >= 0`` else ``slope * x``."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"lrelu slope must lie in (0, 1), got {slope}")
    s = x.data.dtype.type(slope)
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * s)
    return _result(out, (x,), lambda g: (np.where(pos, g, g * s),))


def clamp(x: Tensor, lo: float, hi: float):
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _result(out, (x,), lambda g: (g * inside,))


# -- reductions --------------------------------------------------------------

def total(x: Tensor):
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),))


def mean(x: Tensor):
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def getitem(x: Tensor, index):
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), back)


# -- convolution family -----------------------------------------------------

def _check4(name, t):
    if t.ndim != 4:
        raise DimensionError(f"{name}: expected a 4-D NCHW tensor, got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0):
    """2-D cross-correlation with zero padding.

    ``weight`` is (Cout, Cin, kH, kW); output is
    (N, Cout, (H + 2p - kH)//s + 1, (W + 2p - kW)//s + 1).
    """
    _check4("conv2d input", x)
    _check4("conv2d weight", weight)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(
            f"conv2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, cin, h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(n, cout, oh * ow)
        gw = gx = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if kh == kw == 1 and stride == 1 and padding == 0:
                gx = gcols.reshape(x.shape)
            else:
                gx = kernels.col2im(gcols, x.shape, kh, kw, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return _result(out, parents, back)


def tconv2d(x: Tensor, weight: Tensor, stride: int = 2):
    """Transposed convolution (no padding). ``weight`` is (Cin, Cout, kH, kW).

    Output size per axis is (H - 1) * stride + k, i.e. 2H for k = stride = 2.
    """
    _check4("tconv2d input", x)
    _check4("tconv2d weight", weight)
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(
            f"tconv2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})")
    oh, ow = (h - 1) * stride + kh, (w - 1) * stride + kw
    wmat = weight.data.reshape(cin, cout * kh * kw)
    xmat = x.data.reshape(n, cin, h * w)
    cols = np.matmul(wmat.T, xmat)
    out = kernels.col2im(cols, (n, cout, oh, ow), kh, kw, stride, 0)

    def back(g):
        gcols = kernels.im2col(np.ascontiguousarray(g), kh, kw, stride, 0)
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xmat, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        return gx, gw

    return _result(out, (x, weight), back)


def max_pool2(x: Tensor):
    """2x2 non-overlapping max pool; ties route gradient to the first element."""
    _check4("max_pool2 input", x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"max_pool2 needs even H and W, got {x.shape[2]}x{x.shape[3]}")
    out, idx = kernels.maxpool2_forward(x.data)
    return _result(out, (x,), lambda g: (kernels.maxpool2_backward(g, idx),))


def concat_channels(parts):
    """Concatenate NCHW tensors along the channel axis, preserving order."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_channels needs at least one tensor")
    for p in parts:
        _check4("concat_channels part", p)
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise DimensionError(
                f"concat_channels: spatial/batch mismatch {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=1)
    return _result(out, parts, lambda g: tuple(np.split(g, splits, axis=1)))


def depth_to_space(x: Tensor, factor: int):
    """(N, C*f*f, H, W) -> (N, C, f*H, f*W).

    Channels c*f*f .. (c+1)*f*f fill each f x f output patch in row-major order.
    """
    _check4("depth_to_space input", x)
    n, c, h, w = x.shape
    f = int(factor)
    if c % (f * f):
        raise DimensionError(f"depth_to_space: {c} channels not divisible by factor^2={f * f}")
    co = c // (f * f)
    out = x.data.reshape(n, co, f, f, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * f, w * f)
    return _result(np.ascontiguousarray(out), (x,), lambda g: (_s2d(g, f),))


def _s2d(a, f):
    n, c, h, w = a.shape
    out = a.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(n, c * f * f, h // f, w // f))


def _d2s(a, f):
    n, c, h, w = a.shape
    co = c // (f * f)
    out = a.reshape(n, co, f, f, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(n, co, h * f, w * f))


def space_to_depth(x: Tensor, factor: int):
    """Exact inverse of :func:`depth_to_space`."""
    _check4("space_to_depth input", x)
    f = int(factor)
    if x.shape[2] % f or x.shape[3] % f:
        raise DimensionError(f"space_to_depth: spatial dims {x.shape[2:]} not divisible by {f}")
    return _result(_s2d(x.data, f), (x,), lambda g: (_d2s(g, f),))


def glorot_uniform(shape, rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
