"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable computation in this package is built from the
primitives below. Forward results are plain numpy; when a Tape is active
and an input requires gradients, a node with a backward closure is
appended to the tape. backward() replays the tape in strict reverse
append order and accumulates gradients into the requiring leaves.
"""

from __future__ import annotations

import hashlib
import threading
from collections import Counter
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Forward invocation counts per primitive, for operation-count probes
# (e.g. verifying a stripped model never touches the render path).
OP_COUNTS: Counter = Counter()


def reset_op_counts() -> None:
    OP_COUNTS.clear()


def op_counts() -> dict:
    return dict(OP_COUNTS)


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class TapeError(RuntimeError):
    """Tape misuse: reuse after backward, cross-tape mixing, non-scalar loss."""


class Tensor:
    """Dense n-dimensional array of float64 scalars, optionally on a tape.

    Tensors are immutable after creation by convention: primitives always
    allocate fresh outputs. `grad` is populated by backward() for leaves
    created with requires_grad=True.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of this tensor's values, off any tape, not requiring grad."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.tape is not None:
            flags.append("on_tape")
        suffix = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}{suffix})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of one forward pass, consumed by a single backward().

    A tape is a per-forward-pass object owned by exactly one logical
    thread of execution; independent passes on separate tapes may run
    concurrently. Use as a context manager:

        with Tape():
            loss = model(...)
        backward(loss)
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_LOCAL = threading.local()


def _tape_stack() -> list:
    try:
        return _LOCAL.stack
    except AttributeError:
        _LOCAL.stack = []
        return _LOCAL.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _tape_for(op: str, *tensors: Tensor) -> Optional[Tape]:
    """The active tape if this op must be recorded, else None."""
    stack = _tape_stack()
    if not stack:
        return None
    tape = stack[-1]
    track = False
    for t in tensors:
        if t.tape is not None:
            if t.tape is not tape:
                raise TapeError(f"{op}: input was recorded on a different tape")
            track = True
        elif t.requires_grad:
            track = True
    return tape if track else None


def _append(tape: Tape, op: str, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
    out.tape = tape
    out.tape_id = len(tape.nodes)
    out.requires_grad = True
    tape.nodes.append(_Node(op, inputs, backward_fn))


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss; consumes and clears the tape.

    Gradients are accumulated (+=) into `grad` of every requires_grad leaf
    that participated in the forward pass. A second backward on the same
    tape raises TapeError.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is not recorded on any tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")

    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.tape_id] = np.ones_like(loss.data)
    for i in range(loss.tape_id, -1, -1):
        g = grads[i]
        grads[i] = None
        if g is None:
            continue
        node = tape.nodes[i]
        for t, tg in zip(node.inputs, node.backward_fn(g)):
            if tg is None:
                continue
            if t.tape is tape:
                j = t.tape_id
                grads[j] = tg if grads[j] is None else grads[j] + tg
            elif t.requires_grad:
                t.grad = np.array(tg) if t.grad is None else t.grad + tg
    tape.consumed = True
    tape.nodes = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar broadcast is supported, so the target is a size-1 tensor
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: mismatched shapes {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    OP_COUNTS["add"] += 1
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)
    tape = _tape_for("add", a, b)
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        _append(tape, "add", out, (a, b), bwd)
    return out


def sub(a, b) -> Tensor:
    OP_COUNTS["sub"] += 1
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("sub", a, b)
    tape = _tape_for("sub", a, b)
    out = Tensor(a.data - b.data)
    if tape is not None:
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        _append(tape, "sub", out, (a, b), bwd)
    return out


def mul(a, b) -> Tensor:
    OP_COUNTS["mul"] += 1
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)
    tape = _tape_for("mul", a, b)
    out = Tensor(a.data * b.data)
    if tape is not None:
        def bwd(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        _append(tape, "mul", out, (a, b), bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a fixed python scalar (no gradient for s)."""
    OP_COUNTS["scale"] += 1
    a = _as_tensor(a)
    s = float(s)
    tape = _tape_for("scale", a)
    out = Tensor(a.data * s)
    if tape is not None:
        _append(tape, "scale", out, (a,), lambda g: (g * s,))
    return out


def neg(a: Tensor) -> Tensor:
    OP_COUNTS["neg"] += 1
    a = _as_tensor(a)
    tape = _tape_for("neg", a)
    out = Tensor(-a.data)
    if tape is not None:
        _append(tape, "neg", out, (a,), lambda g: (-g,))
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    OP_COUNTS["matmul"] += 1
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    tape = _tape_for("matmul", a, b)
    out = Tensor(a.data @ b.data)
    if tape is not None:
        def bwd(g):
            return g @ b.data.T, a.data.T @ g
        _append(tape, "matmul", out, (a, b), bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with b broadcast over rows; x is (N, K), w (K, M), b (M,)."""
    OP_COUNTS["linear"] += 1
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes x{x.shape} w{w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape}, expected ({w.shape[1]},)")
    tape = _tape_for("linear", x, w, b)
    out_arr = x.data @ w.data
    out_arr += b.data
    out = Tensor(out_arr)
    if tape is not None:
        def bwd(g):
            return g @ w.data.T, x.data.T @ g, g.sum(axis=0)
        _append(tape, "linear", out, (x, w, b), bwd)
    return out


def linear_leaky_relu(x: Tensor, w: Tensor, b: Tensor, slope: float) -> Tensor:
    """Fused affine map followed by leaky ReLU (saves a full activation buffer)."""
    OP_COUNTS["linear_leaky_relu"] += 1
    if not 0.0 < slope < 1.0:
        raise ValueError(f"linear_leaky_relu: slope must lie in (0, 1), got {slope}")
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear_leaky_relu: incompatible shapes x{x.shape} w{w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear_leaky_relu: bias shape {b.shape}, expected ({w.shape[1]},)")
    tape = _tape_for("linear_leaky_relu", x, w, b)
    pre = x.data @ w.data
    pre += b.data
    neg = pre < 0
    np.multiply(pre, slope, out=pre, where=neg)  # in place on the fresh buffer
    out = Tensor(pre)
    if tape is not None:
        def bwd(g):
            gpre = g.copy()
            np.multiply(gpre, slope, out=gpre, where=neg)
            return gpre @ w.data.T, x.data.T @ gpre, gpre.sum(axis=0)
        _append(tape, "linear_leaky_relu", out, (x, w, b), bwd)
    return out


def _im2col3(xp: np.ndarray) -> np.ndarray:
    """(B, C, H+2, W+2) padded input -> (B*H*W, C*9) patch matrix."""
    B, C, Hp, Wp = xp.shape
    H, W = Hp - 2, Wp - 2
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (B, H, W, C, 3, 3), (s0, s2, s3, s1, s2, s3))
    return win.reshape(B * H * W, C * 9)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1, plus bias.

    x is (C_in, H, W) or (B, C_in, H, W); w is (C_out, C_in, 3, 3); b is (C_out,).
    """
    OP_COUNTS["conv2d_3x3"] += 1
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d_3x3: input must be 3-d or 4-d, got {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3: weight must be (C_out, C_in, 3, 3), got {w.shape}")
    B, C_in, H, W = xd.shape
    C_out = w.shape[0]
    if w.shape[1] != C_in:
        raise ShapeError(
            f"conv2d_3x3: channel mismatch, input has {C_in}, weight expects {w.shape[1]}")
    if b.shape != (C_out,):
        raise ShapeError(f"conv2d_3x3: bias shape {b.shape}, expected ({C_out},)")

    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp)
    wmat = w.data.reshape(C_out, C_in * 9)
    out_flat = cols @ wmat.T + b.data
    out_arr = np.ascontiguousarray(
        out_flat.reshape(B, H, W, C_out).transpose(0, 3, 1, 2))
    out = Tensor(out_arr[0] if squeeze else out_arr)

    tape = _tape_for("conv2d_3x3", x, w, b)
    if tape is not None:
        def bwd(g):
            gd = g[None] if squeeze else g
            gmat = gd.reshape(B, C_out, H * W).transpose(0, 2, 1).reshape(B * H * W, C_out)
            gb = gmat.sum(axis=0)
            gw = (gmat.T @ cols).reshape(w.shape)
            # input gradient is the correlation of g with the flipped kernel
            gp = np.pad(gd, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gcols = _im2col3(gp)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C_in, C_out * 9)
            gx = np.ascontiguousarray(
                (gcols @ wflip.T).reshape(B, H, W, C_in).transpose(0, 3, 1, 2))
            return (gx[0] if squeeze else gx), gw, gb
        _append(tape, "conv2d_3x3", out, (x, w, b), bwd)
    return out


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the trailing two axes."""
    OP_COUNTS["avg_pool2x2"] += 1
    x = _as_tensor(x)
    H, W = x.shape[-2], x.shape[-1]
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2x2: spatial size {H}x{W} not divisible by 2")
    lead = x.shape[:-2]
    out_arr = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))
    out = Tensor(out_arr)
    tape = _tape_for("avg_pool2x2", x)
    if tape is not None:
        def bwd(g):
            gx = np.broadcast_to(
                g[..., :, None, :, None] * 0.25,
                (*lead, H // 2, 2, W // 2, 2)).reshape(x.shape)
            return (np.ascontiguousarray(gx),)
        _append(tape, "avg_pool2x2", out, (x,), bwd)
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the trailing two axes."""
    OP_COUNTS["upsample_nearest2x"] += 1
    x = _as_tensor(x)
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1))
    tape = _tape_for("upsample_nearest2x", x)
    if tape is not None:
        H, W = x.shape[-2], x.shape[-1]
        lead = x.shape[:-2]
        def bwd(g):
            return (g.reshape(*lead, H, 2, W, 2).sum(axis=(-3, -1)),)
        _append(tape, "upsample_nearest2x", out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    OP_COUNTS["relu"] += 1
    x = _as_tensor(x)
    tape = _tape_for("relu", x)
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0
        _append(tape, "relu", out, (x,), lambda g: (g * mask,))
    return out


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    OP_COUNTS["leaky_relu"] += 1
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    x = _as_tensor(x)
    tape = _tape_for("leaky_relu", x)
    neg = x.data < 0
    y = x.data.copy()
    np.multiply(y, slope, out=y, where=neg)
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            gx = g.copy()
            np.multiply(gx, slope, out=gx, where=neg)
            return (gx,)
        _append(tape, "leaky_relu", out, (x,), bwd)
    return out


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), with the identity branch for x > 30 to avoid overflow."""
    OP_COUNTS["softplus"] += 1
    x = _as_tensor(x)
    tape = _tape_for("softplus", x)
    big = x.data > 30.0
    out = Tensor(np.where(big, x.data, np.log1p(np.exp(np.where(big, 0.0, x.data)))))
    if tape is not None:
        deriv = _sigmoid_arr(x.data)
        _append(tape, "softplus", out, (x,), lambda g: (g * deriv,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    OP_COUNTS["sigmoid"] += 1
    x = _as_tensor(x)
    tape = _tape_for("sigmoid", x)
    y = _sigmoid_arr(x.data)
    out = Tensor(y)
    if tape is not None:
        _append(tape, "sigmoid", out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def exp(x: Tensor) -> Tensor:
    OP_COUNTS["exp"] += 1
    x = _as_tensor(x)
    tape = _tape_for("exp", x)
    y = np.exp(x.data)
    out = Tensor(y)
    if tape is not None:
        _append(tape, "exp", out, (x,), lambda g: (g * y,))
    return out


def absolute(x: Tensor) -> Tensor:
    OP_COUNTS["absolute"] += 1
    x = _as_tensor(x)
    tape = _tape_for("absolute", x)
    out = Tensor(np.abs(x.data))
    if tape is not None:
        sign = np.sign(x.data)
        _append(tape, "absolute", out, (x,), lambda g: (g * sign,))
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor) -> Tensor:
    OP_COUNTS["sum"] += 1
    x = _as_tensor(x)
    tape = _tape_for("sum", x)
    out = Tensor(np.asarray(x.data.sum()))
    if tape is not None:
        _append(tape, "sum", out, (x,), lambda g: (np.full(x.shape, float(g)),))
    return out


def tensor_mean(x: Tensor) -> Tensor:
    OP_COUNTS["mean"] += 1
    x = _as_tensor(x)
    tape = _tape_for("mean", x)
    out = Tensor(np.asarray(x.data.mean()))
    if tape is not None:
        inv = 1.0 / x.size
        _append(tape, "mean", out, (x,), lambda g: (np.full(x.shape, float(g) * inv),))
    return out


def sum_lastdim(x: Tensor) -> Tensor:
    OP_COUNTS["sum_lastdim"] += 1
    x = _as_tensor(x)
    tape = _tape_for("sum_lastdim", x)
    out = Tensor(x.data.sum(axis=-1))
    if tape is not None:
        S = x.shape[-1]
        def bwd(g):
            return (np.ascontiguousarray(np.broadcast_to(g[..., None], (*g.shape, S))),)
        _append(tape, "sum_lastdim", out, (x,), bwd)
    return out


def cumsum_exclusive_lastdim(x: Tensor) -> Tensor:
    """y_i = sum_{j<i} x_j along the last axis (y_0 = 0)."""
    OP_COUNTS["cumsum_exclusive_lastdim"] += 1
    x = _as_tensor(x)
    tape = _tape_for("cumsum_exclusive_lastdim", x)
    c = np.cumsum(x.data, axis=-1)
    y = np.empty_like(c)
    y[..., 0] = 0.0
    y[..., 1:] = c[..., :-1]
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            total = g.sum(axis=-1, keepdims=True)
            return (total - np.cumsum(g, axis=-1),)
        _append(tape, "cumsum_exclusive_lastdim", out, (x,), bwd)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    OP_COUNTS["reshape"] += 1
    x = _as_tensor(x)
    tape = _tape_for("reshape", x)
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        _append(tape, "reshape", out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    OP_COUNTS["permute"] += 1
    x = _as_tensor(x)
    axes = tuple(axes)
    tape = _tape_for("permute", x)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    if tape is not None:
        inv = np.argsort(axes)
        _append(tape, "permute", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    OP_COUNTS["narrow"] += 1
    x = _as_tensor(x)
    if not 0 <= start and start + length <= x.shape[axis]:
        raise ShapeError(
            f"narrow: range [{start}, {start + length}) exceeds axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    tape = _tape_for("narrow", x)
    out = Tensor(np.ascontiguousarray(x.data[idx]))
    if tape is not None:
        def bwd(g):
            gx = np.zeros(x.shape)
            gx[idx] = g
            return (gx,)
        _append(tape, "narrow", out, (x,), bwd)
    return out


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    OP_COUNTS["concat_lastdim"] += 1
    tensors = [_as_tensor(t) for t in tensors]
    tape = _tape_for("concat_lastdim", *tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    if tape is not None:
        widths = [t.shape[-1] for t in tensors]
        splits = np.cumsum(widths)[:-1]
        def bwd(g):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))
        _append(tape, "concat_lastdim", out, tuple(tensors), bwd)
    return out


def concat_firstdim(tensors: Sequence[Tensor]) -> Tensor:
    OP_COUNTS["concat_firstdim"] += 1
    tensors = [_as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    tape = _tape_for("concat_firstdim", *tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    if tape is not None:
        lengths = [t.shape[0] for t in tensors]
        splits = np.cumsum(lengths)[:-1]
        def bwd(g):
            return tuple(np.split(g, splits, axis=0))
        _append(tape, "concat_firstdim", out, tuple(tensors), bwd)
    return out


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    OP_COUNTS["softmax_lastdim"] += 1
    x = _as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last dimension")
    tape = _tape_for("softmax_lastdim", x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
        _append(tape, "softmax_lastdim", out, (x,), bwd)
    return out


def log_softmax_lastdim(x: Tensor) -> Tensor:
    OP_COUNTS["log_softmax_lastdim"] += 1
    x = _as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("log_softmax_lastdim: empty last dimension")
    tape = _tape_for("log_softmax_lastdim", x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(ls)
    if tape is not None:
        sm = np.exp(ls)
        def bwd(g):
            return (g - sm * g.sum(axis=-1, keepdims=True),)
        _append(tape, "log_softmax_lastdim", out, (x,), bwd)
    return out


def l2_normalize_lastdim(x: Tensor) -> Tensor:
    """Unit-normalize along the last axis; zero rows stay zero."""
    OP_COUNTS["l2_normalize_lastdim"] += 1
    x = _as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("l2_normalize_lastdim: empty last dimension")
    tape = _tape_for("l2_normalize_lastdim", x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = n > 0
    denom = np.where(safe, n, 1.0)
    y = np.where(safe, x.data / denom, 0.0)
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / denom
            return (np.where(safe, gx, 0.0),)
        _append(tape, "l2_normalize_lastdim", out, (x,), bwd)
    return out


class BatchNormStats:
    """Running mean/variance for one batchnorm2d layer."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                stats: BatchNormStats, mode: str) -> Tensor:
    """Per-channel batch normalization over batch and spatial axes.

    Train mode normalizes with batch statistics (biased variance) and
    updates the running stats with momentum 0.1; eval mode normalizes
    with the running stats. Input is (C, H, W) or (B, C, H, W).
    """
    OP_COUNTS["batchnorm2d"] += 1
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    C = xd.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape}, expected ({C},)")
    csh = (1, C, 1, 1)

    tape = _tape_for("batchnorm2d", x, gamma, beta)
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        stats.mean = (1.0 - BN_MOMENTUM) * stats.mean + BN_MOMENTUM * mu
        stats.var = (1.0 - BN_MOMENTUM) * stats.var + BN_MOMENTUM * var
    else:
        mu = stats.mean
        var = stats.var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mu.reshape(csh)) * inv.reshape(csh)
    y = gamma.data.reshape(csh) * xhat + beta.data.reshape(csh)
    out = Tensor(y[0] if squeeze else y)

    if tape is not None:
        N = xd.shape[0] * xd.shape[2] * xd.shape[3]
        def bwd(g):
            gd = g[None] if squeeze else g
            dbeta = gd.sum(axis=(0, 2, 3))
            dgamma = (gd * xhat).sum(axis=(0, 2, 3))
            if mode == "train":
                gx = (gamma.data * inv).reshape(csh) / N * (
                    N * gd - dbeta.reshape(csh) - xhat * dgamma.reshape(csh))
            else:
                gx = gd * (gamma.data * inv).reshape(csh)
            return (gx[0] if squeeze else gx), dgamma, dbeta
        _append(tape, "batchnorm2d", out, (x, gamma, beta), bwd)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, mode: str) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    OP_COUNTS["dropout"] += 1
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    x = _as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    tape = _tape_for("dropout", x)
    out = Tensor(x.data * keep)
    if tape is not None:
        _append(tape, "dropout", out, (x,), lambda g: (g * keep,))
    return out


# ---------------------------------------------------------------------------
# grid sampling
# ---------------------------------------------------------------------------

class _BilinearGeometry:
    """Corner indices and weights of N queries against one (R, R, C) plane."""

    __slots__ = ("i00", "fu", "fv", "inside_u", "inside_v", "cols", "weights", "r")

    def __init__(self, r: int, uv_arr: np.ndarray):
        half = 0.5 * (r - 1)
        pu = (uv_arr[:, 0] + 1.0) * half
        pv = (uv_arr[:, 1] + 1.0) * half
        self.r = r
        self.inside_u = (pu > 0.0) & (pu < r - 1)  # uv gradient vanishes on the clamp
        self.inside_v = (pv > 0.0) & (pv < r - 1)
        pu = np.clip(pu, 0.0, r - 1)
        pv = np.clip(pv, 0.0, r - 1)
        u0 = np.minimum(np.floor(pu), r - 2).astype(np.int32)
        v0 = np.minimum(np.floor(pv), r - 2).astype(np.int32)
        self.fu = pu - u0
        self.fv = pv - v0
        self.i00 = v0 * r + u0
        self.cols = np.stack([self.i00, self.i00 + 1, self.i00 + r, self.i00 + 1 + r],
                             axis=1).reshape(-1)
        self.weights = np.stack(
            [(1 - self.fv) * (1 - self.fu), (1 - self.fv) * self.fu,
             self.fv * (1 - self.fu), self.fv * self.fu], axis=1).reshape(-1)

    def uv_gradient(self, g: np.ndarray, flat_plane: np.ndarray) -> np.ndarray:
        i00, r = self.i00, self.r
        v00 = flat_plane[i00]
        v01 = flat_plane[i00 + 1]
        v10 = flat_plane[i00 + r]
        v11 = flat_plane[i00 + 1 + r]
        fu, fv = self.fu, self.fv
        du = (1 - fv)[:, None] * (v01 - v00) + fv[:, None] * (v11 - v10)
        dv = (1 - fu)[:, None] * (v10 - v00) + fu[:, None] * (v11 - v01)
        half = 0.5 * (r - 1)
        gu = (g * du).sum(axis=1) * half * self.inside_u
        gv = (g * dv).sum(axis=1) * half * self.inside_v
        return np.stack([gu, gv], axis=1)


def _check_plane_uv(op: str, plane: Tensor, uv: Tensor) -> None:
    if plane.ndim != 3 or plane.shape[0] != plane.shape[1]:
        raise ShapeError(f"{op}: plane must be (R, R, C), got {plane.shape}")
    if plane.shape[0] < 2:
        raise ShapeError(f"{op}: plane resolution must be >= 2")
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError(f"{op}: uv must be (N, 2), got {uv.shape}")


def bilinear_sample_2d(plane: Tensor, uv: Tensor) -> Tensor:
    """Bilinear lookup of a (R, R, C) plane at N points uv in [-1, 1]^2.

    Align-corners convention: u = -1 maps to column 0, u = +1 to column
    R-1 (likewise v to rows). Out-of-range queries clamp to the border,
    where the gradient with respect to uv is zero. Returns (N, C).
    """
    OP_COUNTS["bilinear_sample_2d"] += 1
    plane, uv = _as_tensor(plane), _as_tensor(uv)
    _check_plane_uv("bilinear_sample_2d", plane, uv)
    R, _, C = plane.shape
    n = uv.shape[0]

    # the interpolation is a sparse linear map of the flattened plane:
    # one CSR row per query holding the four corner weights
    geo = _BilinearGeometry(R, uv.data)
    interp = sp.csr_matrix((geo.weights, geo.cols, np.arange(0, 4 * n + 4, 4)),
                           shape=(n, R * R))
    flat = plane.data.reshape(R * R, C)
    out = Tensor(interp @ flat)

    tape = _tape_for("bilinear_sample_2d", plane, uv)
    if tape is not None:
        def bwd(g):
            gplane = None
            if plane.requires_grad or plane.tape is not None:
                gplane = (interp.T @ g).reshape(plane.shape)
            guv = None
            if uv.requires_grad or uv.tape is not None:
                guv = geo.uv_gradient(g, flat)
            return gplane, guv
        _append(tape, "bilinear_sample_2d", out, (plane, uv), bwd)
    return out


# content-addressed cache of interpolation matrices: repeated render passes
# over fixed sample positions (midpoint sampling, fixed poses) rebuild the
# same CSR every iteration otherwise
_INTERP_CACHE: dict = {}
_INTERP_CACHE_MAX = 128


def _build_multi_interp(r: int, uv_datas: list):
    digest = hashlib.blake2b(digest_size=16)
    for u in uv_datas:
        digest.update(u.tobytes())
    key = (r, len(uv_datas), digest.digest())
    hit = _INTERP_CACHE.get(key)
    if hit is not None:
        return hit
    k = len(uv_datas)
    n = uv_datas[0].shape[0]
    geo = _BilinearGeometry(r, np.concatenate(uv_datas) if k > 1 else uv_datas[0])
    offsets = (np.arange(k, dtype=np.int32) * (r * r)).repeat(n)[:, None]
    cols = (geo.cols.reshape(k * n, 4) + offsets).reshape(k, n, 4)
    cols = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(-1)
    weights = np.ascontiguousarray(
        geo.weights.reshape(k, n, 4).transpose(1, 0, 2)).reshape(-1)
    interp = sp.csr_matrix((weights, cols, np.arange(0, 4 * k * n + 4 * k, 4 * k)),
                           shape=(n, k * r * r))
    if len(_INTERP_CACHE) >= _INTERP_CACHE_MAX:
        _INTERP_CACHE.clear()
    _INTERP_CACHE[key] = interp
    return interp


def bilinear_sample_sum(pairs: Sequence) -> Tensor:
    """Sum of bilinear lookups over (plane, uv) pairs sharing a query count.

    Equivalent to adding bilinear_sample_2d results pairwise, but fused
    into a single sparse product so only one (N, C) buffer materializes.
    """
    OP_COUNTS["bilinear_sample_sum"] += 1
    planes = [_as_tensor(p) for p, _ in pairs]
    uvs = [_as_tensor(u) for _, u in pairs]
    if not planes:
        raise ShapeError("bilinear_sample_sum: needs at least one (plane, uv) pair")
    for p, u in zip(planes, uvs):
        _check_plane_uv("bilinear_sample_sum", p, u)
    R, _, C = planes[0].shape
    n = uvs[0].shape[0]
    for p, u in zip(planes, uvs):
        if p.shape != planes[0].shape or u.shape[0] != n:
            raise ShapeError("bilinear_sample_sum: planes/uv sets must share shapes")

    k = len(pairs)
    interp = _build_multi_interp(R, [u.data for u in uvs])
    stacked = np.concatenate([p.data.reshape(R * R, C) for p in planes])
    out = Tensor(interp @ stacked)

    inputs = tuple(planes) + tuple(uvs)
    tape = _tape_for("bilinear_sample_sum", *inputs)
    if tape is not None:
        def bwd(g):
            grads: list = [None] * (2 * k)
            if any(p.requires_grad or p.tape is not None for p in planes):
                gstacked = interp.T @ g
                for i, p in enumerate(planes):
                    if p.requires_grad or p.tape is not None:
                        grads[i] = gstacked[i * R * R:(i + 1) * R * R].reshape(p.shape)
            for i, u in enumerate(uvs):
                if u.requires_grad or u.tape is not None:
                    geo_i = _BilinearGeometry(R, u.data)
                    grads[k + i] = geo_i.uv_gradient(g, planes[i].data.reshape(R * R, C))
            return tuple(grads)
        _append(tape, "bilinear_sample_sum", out, inputs, bwd)
    return out


def ray_accumulate(w: Tensor, v: Tensor) -> Tensor:
    """Per-ray weighted sum: (P, S) weights x (P, S, D) values -> (P, D)."""
    OP_COUNTS["ray_accumulate"] += 1
    w, v = _as_tensor(w), _as_tensor(v)
    if w.ndim != 2 or v.ndim != 3 or w.shape != v.shape[:2]:
        raise ShapeError(f"ray_accumulate: shapes {w.shape} and {v.shape} do not align")
    tape = _tape_for("ray_accumulate", w, v)
    out = Tensor(np.einsum("ps,psd->pd", w.data, v.data))
    if tape is not None:
        def bwd(g):
            gw = np.einsum("pd,psd->ps", g, v.data)
            gv = w.data[:, :, None] * g[:, None, :]
            return gw, gv
        _append(tape, "ray_accumulate", out, (w, v), bwd)
    return out


# aliases matching the spec's operation names
sum = tensor_sum  # noqa: A001 - deliberate shadow inside this namespace
mean = tensor_mean
