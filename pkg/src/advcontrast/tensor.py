"""Dense float32 tensors with reverse-mode automatic differentiation.

Small by design: just enough ops for convolutional encoders, contrastive /
distillation losses and gradient-based input attacks. All arrays are float32,
all reductions run in numpy's fixed ascending-index order, so repeated runs on
identical inputs are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf value was produced while NaN checks are enabled."""


_NAN_CHECKS = False


def set_nan_checks(enabled: bool) -> None:
    """Globally enable per-op output finiteness checks (debug mode)."""
    global _NAN_CHECKS
    _NAN_CHECKS = bool(enabled)


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


class Tensor:
    """A float32 ndarray plus an optional gradient slot and autograd linkage.

    Nodes created by ops keep references to their parent tensors and a vjp
    closure mapping the output gradient to per-parent gradients. ``backward``
    walks the graph once in reverse topological order and accumulates (+=)
    gradients on requires_grad leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _NAN_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in output")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float32 else data.astype(np.float32)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._vjp = vjp if out.requires_grad else None
    out._op = op
    return out


# ---------------------------------------------------------------------------
# broadcast rules: equal shapes, scalar, or one operand that (after left-
# padding with 1s) has at most one non-unit axis -- the bias / per-channel
# cases. Anything fancier is rejected to keep the backward rules auditable.
# ---------------------------------------------------------------------------

def _check_binary_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} vs {b.shape} do not conform") from None
    for small, big in ((a, b), (b, a)):
        if big.shape == out_shape:
            non_unit = [d for d in small.shape if d != 1]
            if len(non_unit) <= 1:
                return
    raise ShapeError(
        f"{op}: broadcast of {a.shape} with {b.shape} is outside the supported "
        "scalar / per-channel cases"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("add", a.data, b.data)
    return _make(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("sub", a.data, b.data)
    return _make(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("mul", a.data, b.data)
    return _make(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("div", a.data, b.data)
    return _make(
        "div", a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} vs {b.data.shape} do not conform")
    return _make(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2-D, got {a.data.shape}")
    return _make("transpose2d", np.ascontiguousarray(a.data.T), (a,),
                 lambda g: (np.ascontiguousarray(g.T),))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, np.float32(0.0)), (a,),
                 lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make("exp", out_data, (a,), lambda g: (g * out_data,))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _make("sqrt", out_data, (a,), lambda g: (g * np.float32(0.5) / out_data,))


def _norm_axis(axis, ndim) -> Optional[tuple]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.data.ndim)
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def vjp(g):
        gg = g
        if not keepdims and axis is not None:
            shape = list(a.data.shape)
            for ax in axis:
                shape[ax] = 1
            gg = g.reshape(shape)
        return (np.broadcast_to(gg, a.data.shape).astype(np.float32, copy=False) + np.float32(0.0),)

    return _make("sum", np.asarray(out_data, dtype=np.float32), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.data.ndim)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    out_data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)
    inv = np.float32(1.0 / count)

    def vjp(g):
        gg = g * inv
        if not keepdims and axis is not None:
            shape = list(a.data.shape)
            for ax in axis:
                shape[ax] = 1
            gg = gg.reshape(shape)
        return (np.broadcast_to(gg, a.data.shape).astype(np.float32, copy=False) + np.float32(0.0),)

    return _make("mean", np.asarray(out_data, dtype=np.float32), (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make("softmax", s, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def vjp(g):
        return (g - sm * g.sum(axis=ax, keepdims=True),)

    return _make("log_softmax", out_data, (a,), vjp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.data.ndim
    norm = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True, dtype=np.float32))
    y = a.data / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=ax, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    ax = axis % tensors[0].data.ndim
    out_data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            slicer[ax] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(grads)

    return _make("concat", out_data, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    ax = axis % a.data.ndim
    if start < 0 or start + length > a.data.shape[ax]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for axis {ax} of {a.data.shape}")
    slicer = [slice(None)] * a.data.ndim
    slicer[ax] = slice(start, start + length)
    slicer = tuple(slicer)

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[slicer] = g
        return (gx,)

    return _make("narrow", np.ascontiguousarray(a.data[slicer]), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make("reshape", a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.data.shape),))


def interleave_rows(a: Tensor, b: Tensor) -> Tensor:
    """Rows (a0, b0, a1, b1, ...); inverse of taking even/odd row slices."""
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError(f"interleave_rows: shapes {a.data.shape} vs {b.data.shape}")
    n, p = a.data.shape
    out_data = np.empty((2 * n, p), dtype=np.float32)
    out_data[0::2] = a.data
    out_data[1::2] = b.data

    def vjp(g):
        return (np.ascontiguousarray(g[0::2]), np.ascontiguousarray(g[1::2]))

    return _make("interleave_rows", out_data, (a, b), vjp)


# ---------------------------------------------------------------------------
# conv2d / max_pool2d, NCHW, via window views (im2col)
# ---------------------------------------------------------------------------

def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather sliding windows into (N, C, KH, KW, OH, OW); copies for contiguity."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def _scatter_windows(gcols: np.ndarray, x_shape: tuple, kh: int, kw: int,
                     stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = gcols.shape[4], gcols.shape[5]
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
    if pad:
        gxp = gxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(gxp)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), x: (N,C,H,W), w: (F,C,KH,KW)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/weight, got {x.data.shape}, {w.data.shape}")
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {c} vs weight channels {cw}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd} (pad {padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _window_view(xp, kh, kw, stride, oh, ow)
    # (N*OH*OW, C*KH*KW) @ (C*KH*KW, F)
    cols_mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    w_mat = w.data.reshape(f, c * kh * kw).T
    out_data = (cols_mat @ w_mat).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    def vjp(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        gw = (cols_mat.T @ g_mat).T.reshape(f, c, kh, kw)
        gcols_mat = g_mat @ w_mat.T
        gcols = gcols_mat.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = _scatter_windows(np.ascontiguousarray(gcols), x.data.shape, kh, kw, stride, padding)
        return (gx, np.ascontiguousarray(gw))

    return _make("conv2d", out_data, (x, w), vjp)


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling over kernel x kernel windows; ties route to the first index."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-D input, got {x.data.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.data.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d: kernel {kernel} too large for input {h}x{w}")
    cols = _window_view(x.data, kernel, kernel, stride, oh, ow)
    flat = cols.reshape(n, c, kernel * kernel, oh, ow)
    idx = flat.argmax(axis=2)
    out_data = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[:, :, None], g[:, :, None], axis=2)
        gcols = gflat.reshape(n, c, kernel, kernel, oh, ow)
        return (_scatter_windows(gcols, x.data.shape, kernel, kernel, stride, 0),)

    return _make("max_pool2d", np.ascontiguousarray(out_data), (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf reachable from root.

    root must be scalar. Each graph node is visited exactly once; repeated
    calls without clearing keep accumulating into leaf .grad buffers.
    """
    if root.data.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads: dict = {id(root): np.ones((), dtype=np.float32)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        else:
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-3) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |cd|).

    f must map a Tensor to a scalar Tensor and be evaluable at x +- h per
    coordinate. The analytic gradient of a constant f (no path to x) counts
    as zero.
    """
    if h <= 0:
        raise ValueError(f"grad_check: h must be positive, got {h}")
    x = _f32(x)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.data.shape != ():
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.data.shape}")
    backward(out)
    analytic = np.zeros_like(x) if xt.grad is None else xt.grad

    work = x.copy()
    flat = work.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + np.float32(h)
        fp = f(Tensor(work)).item()
        flat[i] = orig - np.float32(h)
        fm = f(Tensor(work)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(1.0, np.abs(numeric))
    err = np.abs(analytic.astype(np.float64) - numeric.astype(np.float64)) / denom
    return float(err.max()) if err.size else 0.0
