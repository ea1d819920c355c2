"""Dense tensors with a reverse-mode tape.

Every differentiable operation appends one node to the active :class:`Tape`
(one per thread).  :func:`backward` walks the tape in reverse creation order,
which is a valid reverse topological order because a node's inputs always exist
before the node itself.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.float32, np.float64)


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple:
        return tuple(t.tape_id for t in self.inputs)


@dataclass(eq=False)
class Tape:
    nodes: list = field(default_factory=list)
    enabled: bool = True

    def record(self, kind, inputs, output, backward) -> None:
        output.tape_id = len(self.nodes)
        self.nodes.append(Node(kind, tuple(inputs), output, backward))

    def reset(self) -> None:
        for node in self.nodes:
            node.output.tape_id = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.generic):
        # 0-d numpy results come back as scalars; keep their precision
        data = np.asarray(data)
    if isinstance(data, np.ndarray):
        arr = data
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(DEFAULT_DTYPE)
    else:
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None

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

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

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
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(kind: str, data: np.ndarray, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    inputs = tuple(inputs)
    tape = get_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(kind, inputs, out, backward_fn)
    return out


def _row_sum(x2: np.ndarray) -> np.ndarray:
    """Column sums of a 2-d array; a BLAS gemv is far faster than ``sum(axis=0)``."""
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if shape and grad.shape[extra:] == shape:
        return _row_sum(grad.reshape(-1, int(np.prod(shape)))).reshape(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    b_is_tensor = isinstance(b, Tensor)
    bt = b if b_is_tensor else _lift(b, a)
    try:
        np.broadcast_shapes(a.shape, bt.shape)
    except ValueError:
        raise ValueError(
            f"{op_kind}: shapes {a.shape} and {bt.shape} are not broadcast-compatible"
        ) from None
    x, y = a.data, bt.data
    if op_kind == "add":
        data = x + y

        def bw(g):
            return unbroadcast(g, x.shape), unbroadcast(g, y.shape)
    elif op_kind == "sub":
        data = x - y

        def bw(g):
            return unbroadcast(g, x.shape), unbroadcast(-g, y.shape)
    elif op_kind == "mul":
        data = x * y

        def bw(g):
            return unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)
    elif op_kind == "div":
        data = x / y

        def bw(g):
            gx = g / y
            return unbroadcast(gx, x.shape), unbroadcast(-gx * data, y.shape)
    else:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if b_is_tensor:
        return _make(op_kind, data, (a, bt), bw)
    return _make(op_kind, data, (a,), lambda g: bw(g)[:1])


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)
    return _make("sqrt", data, (x,), lambda g: (g * 0.5 / data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; gradient flows only where ``x > floor``."""
    mask = x.data > floor
    data = np.where(mask, x.data, np.asarray(floor, dtype=x.dtype))
    return _make("clamp_min", data, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    x, y = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        gb = unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return _make("matmul", x @ y, (a, b), bw)


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    B, H, W, C = x.shape
    out = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=x.dtype)
    out[:, pad:pad + H, pad:pad + W] = x
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """im2col for channels-last input: (B*Ho*Wo, kh*kw*C), column order (kh, kw, C)."""
    B, C = xp.shape[0], xp.shape[3]
    if kh == 1 and kw == 1:
        return xp[:, :stride * Ho:stride, :stride * Wo:stride].reshape(B * Ho * Wo, C)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, :stride * Ho:stride, :stride * Wo:stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)


def _conv_shapes(x_shape, w_shape, stride, padding):
    B, H, W, C = x_shape
    O, Cw, kh, kw = w_shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input has {C} channels, kernel {tuple(w_shape)}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    return (Hp - kh) // stride + 1, (Wp - kw) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, need_x_grad: bool = True):
    """Channels-last convolution kernel; returns the output and a backward closure."""
    B, H, W, C = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = _conv_shapes(x.shape, w.shape, stride, padding)
    cols = _windows(_pad_hw(x, padding), kh, kw, stride, Ho, Wo)
    wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * C, O)
    out = (cols @ wmat).reshape(B, Ho, Wo, O)

    def bw(g):
        gmat = g.reshape(B * Ho * Wo, O)
        gw = (cols.T @ gmat).reshape(kh, kw, C, O).transpose(3, 2, 0, 1)
        if not need_x_grad:
            return None, gw
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            return (gmat @ wmat.T).reshape(B, H, W, C), gw
        if stride == 1 and padding <= min(kh, kw) - 1:
            # input gradient = full correlation of g with the flipped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.zeros((B, Ho + 2 * ph, Wo + 2 * pw, O), dtype=g.dtype)
            gp[:, ph:ph + Ho, pw:pw + Wo] = g
            gcols = _windows(gp, kh, kw, 1, H, W)
            wflip = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
            return (gcols @ wflip).reshape(B, H, W, C), gw
        gcols = (gmat @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
        return gxp[:, padding:padding + H, padding:padding + W], gw

    return out, bw


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,kh,kw), zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    out, inner = _conv_forward(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), w.data,
                               stride, padding, x.requires_grad)

    def bw(g):
        gx, gw = inner(np.ascontiguousarray(g.transpose(0, 2, 3, 1)))
        return (None if gx is None else gx.transpose(0, 3, 1, 2)), gw

    return _make("conv2d", np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, w), bw)


def conv2d_nhwc(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last :func:`conv2d`: ``x`` is (B,H,W,C), kernel still (O,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    out, bw = _conv_forward(x.data, w.data, stride, padding, x.requires_grad)
    return _make("conv2d", out, (x, w), bw)


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for tensor of rank {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(op_kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    if op_kind not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduction {op_kind!r}")
    if not axes:
        return x
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    n = int(np.prod([shape[i] for i in axes]))

    if op_kind == "sum":
        data = x.data.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif op_kind == "mean":
        data = x.data.mean(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) / n, shape).copy(),)
    else:
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        perm = rest + axes
        moved = x.data.transpose(perm)
        flat = moved.reshape(moved.shape[:len(rest)] + (n,))
        idx = flat.argmax(axis=-1)  # first maximum on ties
        data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            data = data.reshape(kept)
        inv = np.argsort(perm)

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            return (gflat.reshape(moved.shape).transpose(inv),)

    return _make(op_kind, np.asarray(data, dtype=x.dtype), (x,), bw)


# ---------------------------------------------------------------- activations

_GELU_C = np.sqrt(2.0 / np.pi)


def activation(kind: str, x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    if kind == "relu":
        mask = d > 0
        return _make("relu", d * mask, (x,), lambda g: (g * mask,))
    if kind == "gelu":
        u = _GELU_C * (d + 0.044715 * d**3)
        t = np.tanh(u)
        data = 0.5 * d * (1.0 + t)
        du = _GELU_C * (1.0 + 3 * 0.044715 * d**2)
        deriv = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du
        return _make("gelu", data, (x,), lambda g: (g * deriv,))
    if kind == "softmax":
        e = np.exp(d - d.max(axis=axis, keepdims=True))
        s = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

        return _make("softmax", s, (x,), bw)
    raise ValueError(f"unknown activation {kind!r}")


def relu(x):
    return activation("relu", x)


def gelu(x):
    return activation("gelu", x)


def softmax(x, axis=-1):
    return activation("softmax", x, axis=axis)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# ---------------------------------------------------------------- normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5, channel_axis: int = 1) -> Tensor:
    """Per-channel normalization over every axis except ``channel_axis``.

    In training mode the batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    d = x.data
    ch = channel_axis % d.ndim
    C = d.shape[ch]
    # work on a (N, C) matrix with channels last
    perm = tuple(i for i in range(d.ndim) if i != ch) + (ch,)
    moved = d if ch == d.ndim - 1 else d.transpose(perm)
    x2 = np.ascontiguousarray(moved).reshape(-1, C)
    n = x2.shape[0]
    if training:
        mean = _row_sum(x2) / n
        xc = x2 - mean
        var = _row_sum(xc * xc) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
        xc = x2 - mean.astype(d.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(d.dtype)
    xhat = xc * inv
    out2 = xhat * gamma.data + beta.data
    inv_perm = tuple(np.argsort(perm))
    out = out2.reshape(moved.shape)
    if ch != d.ndim - 1:
        out = np.ascontiguousarray(out.transpose(inv_perm))

    def bw(g):
        gm = g if ch == d.ndim - 1 else g.transpose(perm)
        g2 = np.ascontiguousarray(gm).reshape(-1, C)
        gbeta = _row_sum(g2)
        ggamma = _row_sum(g2 * xhat)
        gxhat = g2 * gamma.data
        if training:
            gx = inv * (gxhat - _row_sum(gxhat) / n - xhat * (ggamma * gamma.data / n))
        else:
            gx = gxhat * inv
        gx = gx.reshape(moved.shape)
        if ch != d.ndim - 1:
            gx = gx.transpose(inv_perm)
        return gx, ggamma, gbeta

    return _make("batch_norm", out, (x, gamma, beta), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    mean = d.mean(axis=-1, keepdims=True)
    var = d.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mean) * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is reset afterwards; tensors from the consumed graph cannot be
    differentiated again.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    tid = loss.tape_id
    if tid is None or tid >= len(tape.nodes) or tape.nodes[tid].output is not loss:
        raise ValueError("loss is not connected to the active tape")
    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes[: tid + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.tape_id is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = ig if prev is None else prev + ig
    tape.reset()
