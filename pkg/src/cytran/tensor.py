"""Dense tensors with reverse-mode differentiation.

Every differentiable primitive records a node holding its parents and a
closure mapping the output adjoint to parent adjoints. Nodes carry a global
sequence number, so ``backward`` can replay adjoints in exact reverse order
of forward execution.

Image tensors are channel-first (N, C, H, W), row-major.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "NumericError", "tensor", "no_grad", "precision",
    "get_default_dtype", "set_default_dtype", "backward",
    "add", "sub", "mul", "neg", "scale", "add_scalar", "matmul", "transpose",
    "reshape", "flatten", "concat", "index", "relu", "leaky_relu", "gelu",
    "softmax", "absolute", "square", "sum", "mean", "conv2d",
    "transposed_conv2d", "batch_norm", "instance_norm", "grid_sample",
]


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A NaN or infinity entered or left a primitive."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_SEQ = itertools.count()


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them for differentiation."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_SEQ)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a tensor at the default (or given) precision."""
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"{name}: non-finite values in input")


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1 and grad is None:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    _check_finite("backward", loss.data)

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    adj: dict[int, np.ndarray] = {id(loss): seed}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = adj.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in adj:
                adj[id(p)] = adj[id(p)] + pg
            else:
                adj[id(p)] = pg


# ---------------------------------------------------------------- algebra

def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _node(a.data + a.dtype.type(s), (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(a.data @ b.data, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor, start: int = 0) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = a.data[key]

    def fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _node(out, (a,), fn)


# ------------------------------------------------------------ activations

def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1, slope).astype(x.dtype)
    return _node(x.data * factor, (x,), lambda g: (g * factor,))


_INV_SQRT2 = 1 / np.sqrt(2.0)
_INV_SQRT2PI = 1 / np.sqrt(2 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF (erf form)."""
    cdf = (0.5 * (1 + erf(x.data * _INV_SQRT2))).astype(x.dtype)

    def fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf).astype(x.dtype),)

    return _node(x.data * cdf, (x,), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def absolute(x: Tensor) -> Tensor:
    # subgradient sign(0) = 0
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis))

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), fn)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / count)


# ---------------------------------------------------------- convolutions
#
# Every convolution reduces to ``_correlate`` on a pre-padded input. Input
# adjoints are correlations of the zero-dilated, padded output adjoint with
# the spatially flipped, channel-swapped kernel, so all heavy lifting stays
# in BLAS-backed tensordot/matmul.

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> strided view (N, C, ho, wo, k, k)."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


# Below this many input channels a single im2col matmul beats per-tap matmuls.
_TAP_MIN_CHANNELS = 4


def _tap(xt: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _out_extent(hp: int, k: int, stride: int) -> int:
    return (hp - k) // stride + 1


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, groups: int) -> np.ndarray:
    """Valid cross-correlation of padded (N, C, Hp, Wp) with (O, C/groups, k, k)."""
    n, c, hp, wp = xp.shape
    co, cg, k, _ = w.shape
    ho, wo = _out_extent(hp, k, stride), _out_extent(wp, k, stride)
    if groups == 1:
        if k == 1:
            xs = xp[:, :, ::stride, ::stride] if stride > 1 else xp
            return np.matmul(w.reshape(co, c), xs.reshape(n, c, ho * wo)).reshape(n, co, ho, wo)
        if c < _TAP_MIN_CHANNELS:
            cols = _windows(xp, k, stride, ho, wo)
            return np.ascontiguousarray(
                np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            )
        xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
        wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        out = np.zeros((co, n * ho * wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                out += wt[i, j] @ _tap(xt, i, j, stride, ho, wo).reshape(c, -1)
        return np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    if cg == 1 and co == c:
        out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                tap = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
                out += tap * w[None, :, 0, i, j, None, None]
        return out
    og = co // groups
    c7 = _windows(xp, k, stride, ho, wo).reshape(n, groups, cg, ho, wo, k, k)
    out = np.einsum("ngchwij,gocij->ngohw", c7, w.reshape(groups, og, cg, k, k))
    return out.reshape(n, co, ho, wo)


def _weight_grad(g: np.ndarray, xp: np.ndarray, k: int, stride: int, groups: int) -> np.ndarray:
    """d(correlate)/d(weight) contracted with output adjoint ``g`` (N, O, Ho, Wo)."""
    n, c, _, _ = xp.shape
    co, ho, wo = g.shape[1:]
    if groups == 1:
        if k == 1:
            xs = xp[:, :, ::stride, ::stride] if stride > 1 else xp
            return np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        if c < _TAP_MIN_CHANNELS:
            return np.tensordot(g, _windows(xp, k, stride, ho, wo), axes=([0, 2, 3], [0, 2, 3]))
        xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        gw = np.empty((co, c, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gw[:, :, i, j] = g2 @ _tap(xt, i, j, stride, ho, wo).reshape(c, -1).T
        return gw
    cg = c // groups
    if cg == 1 and co == c:
        gw = np.empty((c, 1, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                tap = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
                gw[:, 0, i, j] = (g * tap).sum(axis=(0, 2, 3))
        return gw
    c7 = _windows(xp, k, stride, ho, wo).reshape(n, groups, cg, ho, wo, k, k)
    g5 = g.reshape(n, groups, co // groups, ho, wo)
    return np.einsum("ngohw,ngchwij->gocij", g5, c7).reshape(co, cg, k, k)


def _adjoint_kernel(w: np.ndarray, groups: int) -> np.ndarray:
    """Flip spatially and swap in/out channels within each group."""
    co, cg, k, _ = w.shape
    og = co // groups
    wt = w.reshape(groups, og, cg, k, k).transpose(0, 2, 1, 3, 4).reshape(groups * cg, og, k, k)
    return np.ascontiguousarray(wt[:, :, ::-1, ::-1])


def _dilate_pad(g: np.ndarray, stride: int, lo: int, hi_h: int, hi_w: int) -> np.ndarray:
    n, c, h, w = g.shape
    dh, dw = (h - 1) * stride + 1, (w - 1) * stride + 1
    out = np.zeros((n, c, lo + dh + hi_h, lo + dw + hi_w), dtype=g.dtype)
    out[:, :, lo : lo + dh : stride, lo : lo + dw : stride] = g
    return out


def _input_grad(g: np.ndarray, w: np.ndarray, stride: int, groups: int, hp: int, wp: int) -> np.ndarray:
    """Adjoint of ``_correlate`` w.r.t. its padded input, shape (N, C, hp, wp)."""
    k = w.shape[2]
    ho, wo = g.shape[2:]
    if k == 1 and groups == 1 and stride == 1:
        co, c = w.shape[:2]
        n = g.shape[0]
        return np.matmul(w.reshape(co, c).T, g.reshape(n, co, ho * wo)).reshape(n, c, hp, wp)
    hi_h = k - 1 + hp - ((ho - 1) * stride + k)
    hi_w = k - 1 + wp - ((wo - 1) * stride + k)
    return _correlate(_dilate_pad(g, stride, k - 1, hi_h, hi_w), _adjoint_kernel(w, groups), 1, groups)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation. ``weight`` is (C_out, C_in/groups, k, k).

    ``groups == C_in`` gives a depthwise convolution.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, cg, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels supported, got {k}x{k2}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if groups < 1 or c % groups or co % groups or cg != c // groups:
        raise ShapeError(
            f"conv2d: input channels {c}, weight {weight.shape} and groups={groups} disagree"
        )
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {hp}x{wp}")
    _check_finite("conv2d", x.data)

    xp = _pad(x.data, padding)
    out = _correlate(xp, weight.data, stride, groups)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def fn(g):
        gx = _input_grad(g, weight.data, stride, groups, hp, wp) if x.requires_grad else None
        if gx is not None and padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        gw = _weight_grad(g, xp, k, stride, groups)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, fn)


def transposed_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of conv2d. ``weight`` is (C_in, C_out, k, k).

    Output extent per axis: (in - 1) * stride - 2 * padding + k + output_padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"transposed_conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}"
        )
    n, c, h, w = x.shape
    ci, co, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"transposed_conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or not 0 <= output_padding < stride:
        raise ShapeError(
            f"transposed_conv2d: need stride >= 1 and 0 <= output_padding < stride "
            f"(got stride={stride}, output_padding={output_padding})"
        )
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({co},)")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d: padding {padding} leaves an empty output")
    _check_finite("transposed_conv2d", x.data)

    # The forward pass is conv2d's input adjoint for a (C_out -> C_in) kernel.
    hf = (h - 1) * stride + k + output_padding
    wf = (w - 1) * stride + k + output_padding
    wd = weight.data
    full = _input_grad(x.data, wd, stride, 1, hf, wf)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def fn(g):
        gfull = np.zeros((n, co, hf, wf), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gx = _correlate(gfull, wd, stride, 1)[:, :, :h, :w] if x.requires_grad else None
        gw = _weight_grad(x.data, gfull, k, stride, 1)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, fn)


# ---------------------------------------------------------- normalization

def _normalize_backward(g, xhat, invstd, axes, count):
    s1 = g.sum(axis=axes, keepdims=True)
    s2 = (g * xhat).sum(axis=axes, keepdims=True)
    return invstd * (g - s1 / count - xhat * s2 / count)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    In training mode the running statistics are updated in place
    (``new = (1 - momentum) * old + momentum * batch``, unbiased batch variance).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have length {c}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count == 0:
        raise ShapeError("batch_norm: empty batch")
    axes = (0, 2, 3)
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.reshape(c)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(x.dtype)
    invstd = (1 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * invstd
    out = gd * xhat + bd

    def fn(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            gx = _normalize_backward(g * gd, xhat, invstd, axes, count)
        else:
            gx = g * gd * invstd
        return gx, gg, gb

    return _node(out, (x, gamma, beta), fn)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over (H, W), no affine terms."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected (N, C, H, W), got {x.shape}")
    axes = (2, 3)
    count = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    invstd = (1 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * invstd
    return _node(xhat, (x,), lambda g: (_normalize_backward(g, xhat, invstd, axes, count),))


# ------------------------------------------------------------- resampling

def _bilinear_setup(field: np.ndarray, h: int, w: int):
    iy = np.arange(h, dtype=field.dtype)[:, None]
    ix = np.arange(w, dtype=field.dtype)[None, :]
    py = iy + field[:, 0]
    px = ix + field[:, 1]
    in_y = (py > 0) & (py < h - 1)
    in_x = (px > 0) & (px < w - 1)
    py = np.clip(py, 0, h - 1)
    px = np.clip(px, 0, w - 1)
    y0 = np.minimum(np.floor(py), max(h - 2, 0)).astype(np.intp)
    x0 = np.minimum(np.floor(px), max(w - 2, 0)).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return py - y0, px - x0, y0, x0, y1, x1, in_y, in_x


def grid_sample(img: Tensor, field: Tensor) -> Tensor:
    """Bilinear resampling of ``img`` (N, C, H, W) at pixel + ``field``.

    ``field`` is (N, 2, H, W) holding (dy, dx) in pixel units. Sample points
    are clamped to the image, so out-of-range positions take edge values and
    contribute no gradient to the field.
    """
    n, c, h, w = img.shape
    if field.shape != (n, 2, h, w):
        raise ShapeError(f"grid_sample: field {field.shape} does not match image {img.shape}")
    _check_finite("grid_sample", img.data, field.data)
    wy, wx, y0, x0, y1, x1, in_y, in_x = _bilinear_setup(field.data, h, w)
    bidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]
    v = img.data

    def tap(yy, xx):
        return v[bidx, cidx, yy[:, None], xx[:, None]]

    v00, v01, v10, v11 = tap(y0, x0), tap(y0, x1), tap(y1, x0), tap(y1, x1)
    wy4, wx4 = wy[:, None], wx[:, None]
    out = (1 - wy4) * ((1 - wx4) * v00 + wx4 * v01) + wy4 * ((1 - wx4) * v10 + wx4 * v11)

    def fn(g):
        gimg = np.zeros(n * c * h * w, dtype=v.dtype)
        base = (bidx * c + cidx) * (h * w)
        for yy, xx, wgt in (
            (y0, x0, (1 - wy4) * (1 - wx4)),
            (y0, x1, (1 - wy4) * wx4),
            (y1, x0, wy4 * (1 - wx4)),
            (y1, x1, wy4 * wx4),
        ):
            flat = (base + yy[:, None] * w + xx[:, None]).ravel()
            gimg += np.bincount(flat, weights=(g * wgt).ravel(), minlength=gimg.size).astype(v.dtype)
        dy = ((1 - wx4) * (v10 - v00) + wx4 * (v11 - v01)) * g
        dx = ((1 - wy4) * (v01 - v00) + wy4 * (v11 - v10)) * g
        gfield = np.stack([dy.sum(axis=1) * in_y, dx.sum(axis=1) * in_x], axis=1).astype(v.dtype)
        return gimg.reshape(v.shape), gfield

    return _node(out.astype(v.dtype), (img, field), fn)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
