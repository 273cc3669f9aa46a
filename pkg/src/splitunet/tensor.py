"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the handful of operations needed by Split-U-Net and the inversion
attack are provided.  Every differentiable op records its inputs and a
backward closure on the output tensor; :func:`backward` replays the
reachable records in reverse creation order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
LEAKY_SLOPE = 0.1

_node_ids = itertools.count()
_grad_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class TensorShape(NamedTuple):
    batch: int
    channels: int
    height: int
    width: int

    @classmethod
    def of(cls, shape: Sequence[int]) -> "TensorShape":
        if len(shape) != 4:
            raise ShapeError(f"expected a 4-D (B, C, H, W) shape, got {tuple(shape)}")
        if any(int(d) < 1 for d in shape):
            raise ShapeError(f"all dimensions must be >= 1, got {tuple(shape)}")
        return cls(*(int(d) for d in shape))

    @property
    def numel(self) -> int:
        return self.batch * self.channels * self.height * self.width


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation.

    Leaves created with ``requires_grad=True`` accumulate gradients into
    ``.grad``.  Non-leaf tensors keep a reference to their parents and a
    closure mapping the output gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward([self], None if grad is None else [grad])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn`` receives the output gradient and returns one entry per
    parent (``None`` for parents that need no gradient).
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(roots: Sequence[Tensor], grads: Sequence[np.ndarray] | None = None,
             inputs: Iterable[Tensor] = ()) -> None:
    """Backpropagate from ``roots`` seeded with ``grads``.

    With ``grads=None`` every root must be a single-element tensor and is
    seeded with 1.  Leaves listed in ``inputs`` that the roots do not reach
    receive a zero gradient.
    """
    roots = list(roots)
    if grads is None:
        for r in roots:
            if r.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got {r.shape}")
        grads = [np.ones_like(r.data) for r in roots]
    elif len(grads) != len(roots):
        raise ValueError("one seed gradient per root is required")

    pending: dict[int, np.ndarray] = {}
    nodes: dict[int, Tensor] = {}
    for r, g in zip(roots, grads):
        g = np.asarray(g, dtype=r.dtype)
        if g.shape != r.shape:
            raise ShapeError(f"seed gradient shape {g.shape} does not match root {r.shape}")
        if not r.requires_grad:
            continue
        nodes[r.node_id] = r
        pending[r.node_id] = pending[r.node_id] + g if r.node_id in pending else g.copy()

    # collect every recorded node reachable from the roots
    stack = list(nodes.values())
    while stack:
        t = stack.pop()
        for p in t._parents:
            if p.requires_grad and p.node_id not in nodes:
                nodes[p.node_id] = p
                stack.append(p)

    # creation order is a topological order, so reverse it
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = pending.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in pending:
                pending[p.node_id] = pending[p.node_id] + pg
            else:
                pending[p.node_id] = pg

    for leaf in inputs:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# convolutions


def _check_nchw(x: Tensor, what: str) -> TensorShape:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (B, C, H, W), got shape {x.shape}")
    return TensorShape.of(x.shape)


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Square-kernel convolution with zero "same" padding of ``k // 2``.

    ``weight`` is ``(Cout, Cin, k, k)`` with odd ``k``.  Stride 2 halves the
    spatial size and requires even H and W.
    """
    B, C, H, W = _check_nchw(x, "conv2d input")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}")
    Cout, Cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if Cin != C:
        raise ShapeError(f"conv2d input has {C} channels but weight expects {Cin} (weight {weight.shape})")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d bias must have shape ({Cout},), got {bias.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (H % 2 or W % 2):
        raise ShapeError(f"stride-2 conv2d needs even H and W, got {H}x{W}")

    k, pad = kh, kh // 2
    Ho, Wo = H // stride, W // stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride)
    wmat = weight.data.reshape(Cout, Cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g: np.ndarray):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, Cin, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out, parents, _backward)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2, stride-2 transposed convolution; doubles H and W.

    ``weight`` has shape ``(Cin, Cout, 2, 2)``.
    """
    B, C, H, W = _check_nchw(x, "transposed_conv2d input")
    if weight.data.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"transposed_conv2d weight must be (Cin, Cout, 2, 2), got {weight.shape}")
    Cin, Cout = weight.shape[:2]
    if Cin != C:
        raise ShapeError(f"transposed_conv2d input has {C} channels but weight expects {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"transposed_conv2d bias must have shape ({Cout},), got {bias.shape}")

    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, Cin)
    wmat = weight.data.reshape(Cin, Cout * 4)
    y = (xm @ wmat).reshape(B, H, W, Cout, 2, 2)
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5)).reshape(B, Cout, 2 * H, 2 * W)
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g: np.ndarray):
        gm = g.reshape(B, Cout, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, Cout * 4)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gm @ wmat.T).reshape(B, H, W, Cin).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (xm.T @ gm).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out, parents, _backward)


# ---------------------------------------------------------------------------
# pooling and normalization


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties go to the first element in scan order."""
    B, C, H, W = _check_nchw(x, "max_pool2 input")
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2 needs even H and W, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_op(out, (x,), _backward)


def instance_norm2d(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every (b, c) slice to zero mean and unit variance (no affine)."""
    B, C, H, W = _check_nchw(x, "instance_norm2d input")
    if H * W < 2:
        raise ShapeError(f"instance_norm2d needs at least 2 pixels per slice, got {H}x{W}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv

    def _backward(g: np.ndarray):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_op(xhat, (x,), _backward)


# ---------------------------------------------------------------------------
# pointwise ops


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def _backward(g: np.ndarray):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return make_op(out, (x,), _backward)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs identical shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return make_op(x.data * f, (x,), lambda g: (g * f,))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 at every (b, h, w)."""
    _check_nchw(x, "softmax_channels input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_op(s, (x,), _backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels, preserving the given order."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = _check_nchw(tensors[0], "concat_channels input")
    for t in tensors[1:]:
        s = _check_nchw(t, "concat_channels input")
        if (s.batch, s.height, s.width) != (ref.batch, ref.height, ref.width):
            raise ShapeError(f"concat_channels needs matching B, H, W; got {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=1))

    return make_op(out, tuple(tensors), _backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    return make_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def l2_norm(x: Tensor) -> Tensor:
    """Un-squared Euclidean norm over all elements."""
    n = np.sqrt(np.sum(x.data.astype(np.float64) ** 2))
    out = np.asarray(n, dtype=x.dtype)

    def _backward(g: np.ndarray):
        if n == 0.0:
            return (np.zeros_like(x.data),)
        return ((x.data * (g / x.dtype.type(n))).astype(x.dtype),)

    return make_op(out, (x,), _backward)


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))
