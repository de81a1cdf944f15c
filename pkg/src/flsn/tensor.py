"""Rank-4 tensors with a reverse-mode differentiation tape.

Every tensor is laid out as (sample, channel, row, col). Ops record a
closure that maps the upstream gradient to one gradient per input; calling
:func:`backward` on a 1x1x1x1 result walks the recorded graph once, in
reverse topological order, and accumulates into ``.grad`` of the leaves.

Training runs in float32; wrap gradient checks in ``precision(np.float64)``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, GeometryError, SliceError

Shape = tuple[int, int, int, int]

_local = threading.local()


def _state():
    if not hasattr(_local, "dtype"):
        _local.dtype = np.dtype(np.float32)
        _local.grad_enabled = True
        _local.flops = None
    return _local


def default_dtype() -> np.dtype:
    return _state().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    st = _state()
    prev, st.dtype = st.dtype, np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev, st.grad_enabled = st.grad_enabled, False
    try:
        yield
    finally:
        st.grad_enabled = prev


class FlopCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int):
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_flops():
    """Collect floating-point operation counts of every op run inside the block."""
    st = _state()
    prev, st.flops = st.flops, FlopCounter()
    try:
        yield st.flops
    finally:
        st.flops = prev


def _flops(op: str, n: int):
    counter = _state().flops
    if counter is not None:
        counter.add(op, n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.ndim != 4:
            raise DimensionError(f"tensors are rank-4 (n, c, h, w); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._op = None
        self._parents = ()
        self._backward = None

    @classmethod
    def zeros(cls, shape: Shape, **kw) -> "Tensor":
        return cls(np.zeros(shape), **kw)

    @classmethod
    def ones(cls, shape: Shape, **kw) -> "Tensor":
        return cls(np.ones(shape), **kw)

    @classmethod
    def full(cls, shape: Shape, value: float, **kw) -> "Tensor":
        return cls(np.full(shape, value), **kw)

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _state().grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor):
    """Populate ``.grad`` of every leaf that ``root`` depends on.

    Gradients add onto whatever the leaves already hold; zero them between
    optimizer steps. The recorded graph is released afterwards.
    """
    if root.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a 1x1x1x1 root, got {root.shape}")
    if root._op == "consumed":
        raise ContractError("this graph was already consumed by an earlier backward()")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor with requires_grad=True")
    tape = _tape(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                if node.grad is None:
                    node.grad = g.astype(node.data.dtype, copy=True)
                else:
                    node.grad += g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        node._parents = ()
        node._backward = None
        node._op = "consumed"


# ---------------------------------------------------------------- convolution

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]


def _correlate(xp: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    kh, kw = k.shape[2:]
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    cols = _windows(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(g: np.ndarray, k: np.ndarray, stride: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Transpose of :func:`_correlate`: spreads g (n, o, oh, ow) back through k (o, c, kh, kw)."""
    n, _, oh, ow = g.shape
    c, kh, kw = k.shape[1:]
    taps = np.tensordot(g, k, axes=([1], [0]))  # n, oh, ow, c, kh, kw
    out = np.zeros((n, c) + tuple(out_hw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += (
                taps[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    cols = _windows(x, kh, kw, stride, g.shape[2], g.shape[3])
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x with kernel (out_c, in_c, kh, kw), zero padded."""
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels, kernel {kernel.shape} expects {ci}")
    if bias is not None and bias.shape != (1, o, 1, 1):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}; expected (1, {o}, 1, 1)")
    if stride < 1 or padding < 0:
        raise GeometryError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise GeometryError(f"conv2d: padded input {hp}x{wp} is smaller than kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out = _correlate(xp, kernel.data, stride)
    if bias is not None:
        out += bias.data
    _flops("conv2d", 2 * out.size * c * kh * kw + (out.size if bias is not None else 0))

    def grad_fn(g):
        gx = gk = None
        if x.requires_grad:
            gx = _scatter(g, kernel.data, stride, (hp, wp))
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
        if kernel.requires_grad:
            gk = _kernel_grad(xp, g, kh, kw, stride)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), keepdims=True))
        return grads

    parents = [x, kernel] if bias is None else [x, kernel, bias]
    return _result("conv2d", out, parents, grad_fn)


def conv2d_transposed(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; kernel is laid out (in_c, out_c, kh, kw).

    Output size is (h - 1) * stride + kh - 2 * padding.
    """
    n, c, h, w = x.shape
    ci, o, kh, kw = kernel.shape
    if c != ci:
        raise DimensionError(
            f"conv2d_transposed: input {x.shape} has {c} channels, kernel {kernel.shape} expects {ci}"
        )
    if stride < 1 or padding < 0:
        raise GeometryError(f"conv2d_transposed: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    full = ((h - 1) * stride + kh, (w - 1) * stride + kw)
    if full[0] - 2 * padding < 1 or full[1] - 2 * padding < 1:
        raise GeometryError(f"conv2d_transposed: padding {padding} leaves an empty output")
    out = _scatter(x.data, kernel.data, stride, full)
    if padding:
        out = np.ascontiguousarray(out[:, :, padding:-padding, padding:-padding])
    _flops("conv2d_transposed", 2 * x.size * o * kh * kw)

    def grad_fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gx = _correlate(gp, kernel.data, stride) if x.requires_grad else None
        # contracts x (n, in_c, h, w) against windows of gp -> (in_c, out_c, kh, kw)
        gk = _kernel_grad(gp, x.data, kh, kw, stride) if kernel.requires_grad else None
        return gx, gk

    return _result("conv2d_transposed", out, [x, kernel], grad_fn)


# ---------------------------------------------------------------- reductions

def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h * w < 1:
        raise GeometryError("global_avg_pool on an empty tensor")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    _flops("global_avg_pool", x.size)

    def grad_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return _result("global_avg_pool", out, [x], grad_fn)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (sample, channel) standardization, no affine."""
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    _flops("instance_norm", 5 * x.size)

    def grad_fn(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result("instance_norm", xhat, [x], grad_fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = np.full((1, 1, 1, 1), x.data.sum(), dtype=x.dtype)
    _flops("sum", x.size)
    return _result("sum", out, [x], lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.full((1, 1, 1, 1), x.data.mean(), dtype=x.dtype)
    _flops("mean", n)
    return _result("mean", out, [x], lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


# ---------------------------------------------------------------- pointwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _flops("relu", x.size)
    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype), [x], lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    _flops("sigmoid", 4 * x.size)
    return _result("sigmoid", s, [x], lambda g: (g * s * (1 - s),))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    _flops("abs", x.size)
    return _result("abs", np.abs(x.data), [x], lambda g: (g * sign,))


def scale(x: Tensor, k: float) -> Tensor:
    _flops("scale", x.size)
    return _result("scale", x.data * x.dtype.type(k), [x], lambda g: (g * x.dtype.type(k),))


def add_scalar(x: Tensor, k: float) -> Tensor:
    _flops("add_scalar", x.size)
    return _result("add_scalar", x.data + x.dtype.type(k), [x], lambda g: (g,))


def _check_broadcast(op: str, x: Tensor, other: Tensor):
    if any(o != s and o != 1 for s, o in zip(x.shape, other.shape)):
        raise DimensionError(f"{op}: cannot broadcast {other.shape} onto {x.shape}")


def _unbroadcast(g: np.ndarray, shape: Shape) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def add(x: Tensor, other: Tensor) -> Tensor:
    """x + other, where other is x-shaped or has size-1 axes that broadcast."""
    _check_broadcast("add", x, other)
    _flops("add", x.size)
    return _result("add", x.data + other.data, [x, other], lambda g: (g, _unbroadcast(g, other.shape)))


def sub(x: Tensor, other: Tensor) -> Tensor:
    _check_broadcast("sub", x, other)
    _flops("sub", x.size)
    return _result("sub", x.data - other.data, [x, other], lambda g: (g, -_unbroadcast(g, other.shape)))


def mul(x: Tensor, other: Tensor) -> Tensor:
    _check_broadcast("mul", x, other)
    _flops("mul", x.size)

    def grad_fn(g):
        gx = g * other.data if x.requires_grad else None
        go = _unbroadcast(g * x.data, other.shape) if other.requires_grad else None
        return gx, go

    return _result("mul", x.data * other.data, [x, other], grad_fn)


def pointwise(x: Tensor, kind: str, arg=None) -> Tensor:
    """Dispatch by name: relu, sigmoid, scale(k), add(other), mul(other)."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "scale":
        return scale(x, arg)
    if kind == "add":
        return add(x, arg)
    if kind == "mul":
        return mul(x, arg)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------- layout

def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(f"channel_concat: {a.shape} and {b.shape} differ outside the channel axis")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result("channel_concat", out, [a, b], lambda g: (g[:, :ca], g[:, ca:]))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels [start, stop)."""
    if not 0 <= start < stop <= x.shape[1]:
        raise SliceError(f"channel_slice: [{start}, {stop}) is not a valid range for {x.shape[1]} channels")

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result("channel_slice", np.ascontiguousarray(x.data[:, start:stop]), [x], grad_fn)


def avg_downsample2(x: Tensor) -> Tensor:
    """Mean of disjoint 2x2 blocks."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"avg_downsample2 needs even spatial dims, got {h}x{w}")
    d = x.data
    out = (d[:, :, 0::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 0::2] + d[:, :, 1::2, 1::2]) / 4
    _flops("avg_downsample2", x.size)

    def grad_fn(g):
        q = g * x.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return _result("avg_downsample2", out, [x], grad_fn)


_interp_cache: dict = {}


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    key = (n_in, factor, np.dtype(dtype).str)
    m = _interp_cache.get(key)
    if m is None:
        n_out = n_in * factor
        m = np.zeros((n_out, n_in))
        if n_in == 1:
            m[:, 0] = 1.0
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
            lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
            frac = pos - lo
            m[np.arange(n_out), lo] = 1.0 - frac
            m[np.arange(n_out), lo + 1] += frac
        m = m.astype(dtype)
        _interp_cache[key] = m
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear resize by an integer factor on a corner-aligned grid."""
    if factor < 1:
        raise GeometryError(f"bilinear_upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    mh = _interp_matrix(h, factor, x.dtype)
    mw = _interp_matrix(w, factor, x.dtype)
    out = mh @ x.data @ mw.T
    _flops("bilinear_upsample", 7 * out.size)
    return _result("bilinear_upsample", out, [x], lambda g: (mh.T @ g @ mw,))


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """(n, c*r*r, h, w) -> (n, c, h*r, w*r); channel c*r*r + i*r + j lands at offset (i, j)."""
    n, cr, h, w = x.shape
    if cr % (r * r):
        raise DimensionError(f"depth_to_space: {cr} channels is not a multiple of {r * r}")
    c = cr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def grad_fn(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _result("depth_to_space", out, [x], grad_fn)


def haar_band(x: Tensor, k: np.ndarray) -> Tensor:
    """Depthwise stride-2 correlation with one fixed 2x2 kernel, shared by all channels."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"wavelet analysis needs even spatial dims, got {h}x{w}")
    k = np.asarray(k, dtype=x.dtype)
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = np.einsum("nchiwj,ij->nchw", blocks, k)
    _flops("haar_band", 8 * out.size)

    def grad_fn(g):
        return (np.einsum("nchw,ij->nchiwj", g, k).reshape(x.shape),)

    return _result("haar_band", out, [x], grad_fn)


def haar_band_transposed(y: Tensor, k: np.ndarray) -> Tensor:
    """Adjoint of :func:`haar_band`: each coefficient paints k onto its 2x2 block."""
    n, c, h, w = y.shape
    k = np.asarray(k, dtype=y.dtype)
    out = np.einsum("nchw,ij->nchiwj", y.data, k).reshape(n, c, 2 * h, 2 * w)
    _flops("haar_band_transposed", 8 * y.size)

    def grad_fn(g):
        return (np.einsum("nchiwj,ij->nchw", g.reshape(n, c, h, 2, w, 2), k),)

    return _result("haar_band_transposed", out, [y], grad_fn)


# ---------------------------------------------------------------- gradient check

def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    samples: int = 50,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    ``fn(*inputs)`` must return a 1x1x1x1 tensor. Up to ``samples``
    coordinates per input are perturbed; inputs should be float64.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with no_grad():
        ref = fn(*inputs).data.copy()
    out = fn(*inputs)
    if not np.array_equal(ref, out.data):
        raise ContractError("grad_check: two forward passes disagree; fn is not deterministic")
    backward(out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + step
                fp = fn(*inputs).item()
                flat[i] = orig - step
                fm = fn(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                ana = float(analytic.reshape(-1)[i])
                err = np.abs(ana - num) / max(np.abs(ana), np.abs(num), 1e-8)
                worst = max(worst, float(err))
    return worst
