"""Shared oracles for the test suite.

Everything here is written independently of the library internals: loop
convolutions, a central-difference gradient, and small wrappers that replay
a tensor graph at a chosen precision.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from sward.tensor import Tape, Tensor, backward

LossFn = Callable[[dict[str, Tensor], Tape | None], Tensor]


def run_autodiff(loss_fn: LossFn, arrays: dict[str, np.ndarray],
                 dtype=np.float64) -> tuple[float, dict[str, np.ndarray]]:
    """Build tensors at `dtype`, run the graph, and return (loss, grads)."""
    params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in arrays.items()}
    tape = Tape()
    loss = loss_fn(params, tape)
    backward(loss, tape)
    return loss.item(), {k: p.grad for k, p in params.items()}


def numeric_gradients(loss_fn: LossFn, arrays: dict[str, np.ndarray],
                      h: float = 1e-3, only: list[str] | None = None) -> dict[str, np.ndarray]:
    """Central finite differences in float64, elementwise."""
    base = {k: v.astype(np.float64).copy() for k, v in arrays.items()}

    def value() -> float:
        params = {k: Tensor(v) for k, v in base.items()}
        return loss_fn(params, None).item()

    grads = {}
    for name in (only if only is not None else list(arrays)):
        target = base[name]
        grad = np.zeros_like(target)
        flat, gflat = target.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = value()
            flat[i] = orig - h
            lm = value()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads[name] = grad
    return grads


def relative_gradient_error(auto: np.ndarray, numeric: np.ndarray,
                            floor: float = 1e-3) -> float:
    """Max elementwise |auto - numeric| / max(|numeric|, floor)."""
    auto = np.asarray(auto, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(numeric), floor)
    return float((np.abs(auto - numeric) / denom).max())


# ---------------------------------------------------------------------------
# loop oracles


def conv2d_loops(x: np.ndarray, k: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for b in range(n):
        for f in range(o):
            for y in range(oh):
                for z in range(ow):
                    patch = xp[b, :, y * stride:y * stride + kh, z * stride:z * stride + kw]
                    out[b, f, y, z] = (patch * k[f]).sum()
    return out


def max_pool2d_loops(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for z in range(ow):
                    out[b, ch, y, z] = x[b, ch, y * stride:y * stride + window,
                                         z * stride:z * stride + window].max()
    return out
