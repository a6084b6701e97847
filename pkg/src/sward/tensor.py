"""Dense float tensors with tape-based reverse-mode differentiation.

Conventions: image batches are NCHW, conv kernels OIHW, dense weights are
(in_features, out_features), row-wise ops act along axis 1.  Convolution is
cross-correlation (no kernel flip).  Every op takes an optional `tape`; with
`tape=None` it runs pure inference and records nothing.

Arrays default to float32; float64 inputs are kept as-is so the same graph
can be replayed at higher precision when checking gradients numerically.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "matmul",
    "transpose",
    "dense",
    "conv2d",
    "channel_bias",
    "max_pool2d",
    "global_avg_pool",
    "reduce_mean",
    "reduce_sum",
    "sqrt",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "slice_cols",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# When enabled, every op output is scanned for NaN/Inf and raises instead of
# letting bad values propagate silently.  Off by default (costs a full pass).
_DEBUG_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output."""
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = bool(enabled)


class Tensor:
    """N-d float array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # Keep f32/f64 inputs (ufuncs hand back scalars for 0-d arrays,
            # so accept those too); everything else becomes f32.
            if isinstance(data, (np.ndarray, np.floating)) and data.dtype in _FLOAT_DTYPES:
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Execution-ordered op record for reverse-mode differentiation.

    Ops append themselves during the forward pass, so the node list is
    topologically sorted by construction and `backward` can simply walk it
    in reverse.
    """

    __slots__ = ("_nodes", "_produced")

    def __init__(self):
        self._nodes: list[tuple[str, tuple[Tensor, ...], Tensor, Callable[[np.ndarray], None]]] = []
        self._produced: set[int] = set()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((op, inputs, output, backward_fn))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self._nodes)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(x) into `.grad` of every tensor on the tape.

    `loss` must be a scalar produced by an op recorded on `tape`; gradients
    add into existing `.grad` buffers, so zero them between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape (detached graph)")
    loss.grad = np.ones_like(loss.data)
    for _op, _inputs, out, fn in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        fn(g)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Rebinds rather than mutates so upstream grads are never aliased.
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _result(op: str, inputs: tuple[Tensor, ...], data: np.ndarray,
            tape: Tape | None, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if _DEBUG_CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values in output of {op}")
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_binary("add", a, b)
    data = a.data + b.data

    def bw(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _result("add", (a, b), data, tape, bw)


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_binary("sub", a, b)
    data = a.data - b.data

    def bw(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return _result("sub", (a, b), data, tape, bw)


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_binary("mul", a, b)
    data = a.data * b.data

    def bw(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result("mul", (a, b), data, tape, bw)


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c = float(c)
    data = a.data * c

    def bw(g: np.ndarray) -> None:
        _accum(a, g * c)

    return _result("scale", (a,), data, tape, bw)


def relu(a: Tensor, tape: Tape | None = None) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g: np.ndarray) -> None:
        _accum(a, g * (a.data > 0))

    return _result("relu", (a,), data, tape, bw)


def sigmoid(a: Tensor, tape: Tape | None = None) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)

    def bw(g: np.ndarray) -> None:
        _accum(a, g * (y * (1.0 - y)))

    return _result("sigmoid", (a,), y, tape, bw)


def sqrt(a: Tensor, tape: Tape | None = None) -> Tensor:
    y = np.sqrt(a.data)

    def bw(g: np.ndarray) -> None:
        # Guarded at zero so an exact-fit RMSE still yields a finite step.
        _accum(a, g * 0.5 / np.maximum(y, 1e-12))

    return _result("sqrt", (a,), y, tape, bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expected 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    data = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _result("matmul", (a, b), data, tape, bw)


def transpose(a: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-d input, got {a.data.shape}")
    data = np.ascontiguousarray(a.data.T)

    def bw(g: np.ndarray) -> None:
        _accum(a, g.T)

    return _result("transpose", (a,), data, tape, bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"dense: expected 2-d input, got {x.data.shape}")
    if weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(f"dense: input {x.data.shape} incompatible with weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ValueError(f"dense: bias shape {bias.data.shape} != ({weight.data.shape[1]},)")
    data = x.data @ weight.data + bias.data

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g @ weight.data.T)
        if weight.requires_grad:
            _accum(weight, x.data.T @ g)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _result("dense", (x, weight, bias), data, tape, bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           tape: Tape | None = None) -> Tensor:
    """Cross-correlate an NCHW batch with an OIHW kernel (floor semantics)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: expected NCHW input and OIHW kernel, got {x.data.shape} and {kernel.data.shape}")
    n, c, h, w = x.data.shape
    o, i, kh, kw = kernel.data.shape
    if i != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {i}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} or padding={padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # im2col: one big GEMM beats nested spatial loops by orders of magnitude.
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.data.dtype)
    for a in range(kh):
        ah = a + (oh - 1) * stride + 1
        for b in range(kw):
            bw_ = b + (ow - 1) * stride + 1
            cols[:, :, a, b] = xp[:, :, a:ah:stride, b:bw_:stride]
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = np.ascontiguousarray((cols2 @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def bw(g: np.ndarray) -> None:
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        if kernel.requires_grad:
            _accum(kernel, (g2.T @ cols2).reshape(o, c, kh, kw))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                ah = a + (oh - 1) * stride + 1
                for b in range(kw):
                    bw_ = b + (ow - 1) * stride + 1
                    dxp[:, :, a:ah:stride, b:bw_:stride] += dcols[:, :, a, b]
            _accum(x, dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp)

    return _result("conv2d", (x, kernel), out, tape, bw)


def channel_bias(x: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Add a per-channel bias to an NCHW batch."""
    if x.data.ndim != 4:
        raise ValueError(f"channel_bias: expected NCHW input, got {x.data.shape}")
    if bias.data.shape != (x.data.shape[1],):
        raise ValueError(f"channel_bias: bias shape {bias.data.shape} != ({x.data.shape[1]},)")
    data = x.data + bias.data[None, :, None, None]

    def bw(g: np.ndarray) -> None:
        _accum(x, g)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _result("channel_bias", (x, bias), data, tape, bw)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2, tape: Tape | None = None) -> Tensor:
    """Max pool an NCHW batch; ties route to the first window position."""
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d: expected NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if window < 1 or stride < 1:
        raise ValueError(f"max_pool2d: invalid window={window} or stride={stride}")
    if window > h or window > w:
        raise ValueError(f"max_pool2d: window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    slabs = np.empty((window * window, n, c, oh, ow), dtype=x.data.dtype)
    for a in range(window):
        ah = a + (oh - 1) * stride + 1
        for b in range(window):
            bw_ = b + (ow - 1) * stride + 1
            slabs[a * window + b] = x.data[:, :, a:ah:stride, b:bw_:stride]
    arg = slabs.argmax(axis=0)
    out = np.take_along_axis(slabs, arg[None], axis=0)[0]

    def bw(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        for k in range(window * window):
            mask = arg == k
            if not mask.any():
                continue
            a, b = divmod(k, window)
            ah = a + (oh - 1) * stride + 1
            bw_ = b + (ow - 1) * stride + 1
            dx[:, :, a:ah:stride, b:bw_:stride][mask] += g[mask]
        _accum(x, dx)

    return _result("max_pool2d", (x,), out, tape, bw)


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Average an NCHW batch over its spatial dims, yielding N x C."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: expected NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, np.broadcast_to((g / (h * w))[:, :, None, None], x.data.shape))

    return _result("global_avg_pool", (x,), data, tape, bw)


# ---------------------------------------------------------------------------
# reductions


def reduce_mean(x: Tensor, tape: Tape | None = None) -> Tensor:
    size = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, np.broadcast_to(g / size, x.data.shape))

    return _result("reduce_mean", (x,), data, tape, bw)


def reduce_sum(x: Tensor, tape: Tape | None = None) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, np.broadcast_to(g, x.data.shape))

    return _result("reduce_sum", (x,), data, tape, bw)


# ---------------------------------------------------------------------------
# row-wise ops


def l2_normalize(x: Tensor, eps: float = 1e-12, tape: Tape | None = None) -> Tensor:
    """Scale each row to unit L2 norm; rows below `eps` divide by `eps`."""
    if x.data.ndim != 2:
        raise ValueError(f"l2_normalize: expected 2-d input, got {x.data.shape}")
    if eps <= 0:
        raise ValueError(f"l2_normalize: eps must be positive, got {eps}")
    r = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    rc = np.maximum(r, eps)
    y = x.data / rc

    def bw(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gy = (g * y).sum(axis=1, keepdims=True)
        # Below eps the norm is treated as the constant eps, so no
        # direction-removal term applies there.
        _accum(x, (g - np.where(r > eps, y * gy, 0.0)) / rc)

    return _result("l2_normalize", (x,), y, tape, bw)


def softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"softmax: expected 2-d input, got {x.data.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _result("softmax", (x,), y, tape, bw)


def log_softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"log_softmax: expected 2-d input, got {x.data.shape}")
    m = x.data.max(axis=1, keepdims=True)
    z = x.data - m
    y = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sm = np.exp(y)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g - sm * g.sum(axis=1, keepdims=True))

    return _result("log_softmax", (x,), y, tape, bw)


def slice_cols(x: Tensor, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    """Take columns [start, stop) of a 2-d tensor."""
    if x.data.ndim != 2:
        raise ValueError(f"slice_cols: expected 2-d input, got {x.data.shape}")
    if not (0 <= start < stop <= x.data.shape[1]):
        raise ValueError(f"slice_cols: bad range [{start}, {stop}) for {x.data.shape[1]} columns")
    data = x.data[:, start:stop].copy()

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, start:stop] = g
            _accum(x, dx)

    return _result("slice_cols", (x,), data, tape, bw)
