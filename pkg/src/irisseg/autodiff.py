"""Minimal dense-tensor engine with exact reverse-mode gradients.

Everything runs in 32-bit floats with a fixed summation order, so forward and
backward passes are bit-deterministic for identical inputs.  The op set is
exactly what the encoder-decoder segmenter needs: same-padded convolution,
ReLU, per-channel batch normalization, 2x2 max pooling with stored argmax
indices, index-driven unpooling, a two-class per-pixel softmax, weighted
cross-entropy, and SGD with momentum and L2 weight decay.

Tensors hold single images (channel-first, no batch axis); batching is done
by accumulating gradients across independent graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericsError, ShapeError, StateError

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1
LOG_FLOOR = 1e-12


def _as_f32(data) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=np.float32)


def _require_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional float32 array with an optional gradient buffer.

    A Tensor is either a leaf (parameter or input) or the output of an op,
    in which case it remembers its parents and a closure that propagates
    gradients to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        _require_finite(self.data, "Tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward, op_name: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        _require_finite(out.data, op_name)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(np.float32, copy=True)
        else:
            self.grad += grad

    def backward(self, seed: float | np.ndarray = 1.0) -> None:
        """Reverse-mode pass from this node; `seed` is the output gradient."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        seed_arr = _as_f32(seed)
        if seed_arr.shape == self.data.shape:
            self.grad = seed_arr.copy()
        elif seed_arr.size == 1:
            self.grad = np.full(self.data.shape, seed_arr.reshape(-1)[0], np.float32)
        else:
            raise ShapeError(f"backward seed shape {seed_arr.shape} does not match output {self.data.shape}")
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                _require_finite(node.grad, "backward pass")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class PoolIndices:
    """Per-output-pixel argmax position (0..3, row-major) of each 2x2 window."""

    indices: np.ndarray
    input_shape: tuple[int, int, int]


@dataclass
class RunningStats:
    """Exponential-moving-average channel statistics for batchnorm inference."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def zeros(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Same-padded 2D convolution: (C_in,H,W) x (C_out,C_in,k,k) -> (C_out,H,W)."""
    if padding != "same":
        raise ShapeError(f"only 'same' padding is supported, got {padding!r}")
    if x.data.ndim != 3 or kernels.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError("conv2d expects input (C,H,W), kernels (O,C,k,k), bias (O,)")
    c_in, h, w = x.data.shape
    c_out, kc, kh, kw = kernels.data.shape
    if kc != c_in:
        raise ShapeError(f"kernel input channels {kc} != input channels {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d kernels must be square with odd size")
    if bias.data.shape[0] != c_out:
        raise ShapeError(f"bias length {bias.data.shape[0]} != output channels {c_out}")

    k = kh
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    # (C_in, H, W, k, k) view -> (H*W, C_in*k*k) patch matrix
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(h * w, c_in * k * k)
    wmat = kernels.data.reshape(c_out, c_in * k * k)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.T.reshape(c_out, h, w))

    def backward(grad: np.ndarray) -> None:
        g = grad.reshape(c_out, h * w).T  # (H*W, C_out)
        if bias.requires_grad:
            bias._accumulate(grad.sum(axis=(1, 2)))
        if kernels.requires_grad:
            kernels._accumulate((g.T @ cols).reshape(c_out, c_in, k, k))
        if x.requires_grad:
            gcols = (g @ wmat).reshape(h, w, c_in, k, k).transpose(2, 3, 4, 0, 1)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di:di + h, dj:dj + w] += gcols[:, di, dj]
            x._accumulate(gxp[:, p:p + h, p:p + w])

    return Tensor._from_op(out, (x, kernels, bias), backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad * (x.data > 0))

    return Tensor._from_op(out, (x,), backward, "relu")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str, stats: RunningStats) -> Tensor:
    """Per-channel normalization over the spatial axes of a (C,H,W) tensor.

    Train mode normalizes with the tensor's own statistics and updates the
    running buffers in place (momentum 0.1, biased variance); infer mode
    normalizes with the stored statistics and leaves them untouched.
    """
    if x.data.ndim != 3:
        raise ShapeError("batchnorm expects a (C,H,W) tensor")
    c = x.data.shape[0]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("gamma/beta must be per-channel vectors")
    if mode not in ("train", "infer"):
        raise ShapeError(f"unknown batchnorm mode {mode!r}")

    if mode == "train":
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        stats.mean[:] = (1.0 - BATCHNORM_MOMENTUM) * stats.mean + BATCHNORM_MOMENTUM * mu
        stats.var[:] = (1.0 - BATCHNORM_MOMENTUM) * stats.var + BATCHNORM_MOMENTUM * var
    else:
        mu = stats.mean.copy()
        var = stats.var.copy()

    std = np.sqrt(var + np.float32(BATCHNORM_EPS))
    xhat = (x.data - mu[:, None, None]) / std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward(grad: np.ndarray) -> None:
        if beta.requires_grad:
            beta._accumulate(grad.sum(axis=(1, 2)))
        if gamma.requires_grad:
            gamma._accumulate((grad * xhat).sum(axis=(1, 2)))
        if x.requires_grad:
            gxhat = grad * gamma.data[:, None, None]
            if mode == "infer":
                x._accumulate(gxhat / std[:, None, None])
            else:
                n = np.float32(x.data.shape[1] * x.data.shape[2])
                sum_g = gxhat.sum(axis=(1, 2), keepdims=True)
                sum_gx = (gxhat * xhat).sum(axis=(1, 2), keepdims=True)
                x._accumulate((gxhat - sum_g / n - xhat * sum_gx / n) / std[:, None, None])

    return Tensor._from_op(out.astype(np.float32), (x, gamma, beta), backward, "batchnorm")


def _windows4(data: np.ndarray) -> np.ndarray:
    """(C,H,W) -> (C,H/2,W/2,4) with the 2x2 window flattened row-major."""
    c, h, w = data.shape
    return np.ascontiguousarray(
        data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    ).reshape(c, h // 2, w // 2, 4)


def _unwindow4(win: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    return np.ascontiguousarray(
        win.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
    ).reshape(c, h, w)


def maxpool2(x: Tensor) -> tuple[Tensor, PoolIndices]:
    """2x2 max pooling; ties go to the lowest row-major index in the window."""
    if x.data.ndim != 3:
        raise ShapeError("maxpool2 expects a (C,H,W) tensor")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = _windows4(x.data)
    idx = win.argmax(axis=-1).astype(np.uint8)  # argmax picks the first (lowest) max
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            gwin = np.zeros_like(win)
            np.put_along_axis(gwin, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
            x._accumulate(_unwindow4(gwin, (c, h, w)))

    out_t = Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool2")
    return out_t, PoolIndices(idx, (c, h, w))


def maxunpool2(values: Tensor, indices: PoolIndices, out_shape: tuple[int, int, int]) -> Tensor:
    """Place each value at its stored 2x2-window position; zeros elsewhere."""
    if values.data.ndim != 3:
        raise ShapeError("maxunpool2 expects a (C,h,w) tensor")
    if tuple(out_shape) != tuple(indices.input_shape):
        raise ShapeError(f"out_shape {tuple(out_shape)} does not match pooled geometry {indices.input_shape}")
    c, h, w = out_shape
    if values.data.shape != (c, h // 2, w // 2) or indices.indices.shape != (c, h // 2, w // 2):
        raise ShapeError("values/indices geometry does not match out_shape")
    if indices.indices.max(initial=0) > 3:
        raise ShapeError("pool indices must address positions inside a 2x2 window")

    win = np.zeros((c, h // 2, w // 2, 4), np.float32)
    sel = indices.indices[..., None].astype(np.intp)
    np.put_along_axis(win, sel, values.data[..., None], axis=-1)
    out = _unwindow4(win, (c, h, w))

    def backward(grad: np.ndarray) -> None:
        if values.requires_grad:
            gwin = _windows4(grad)
            values._accumulate(np.take_along_axis(gwin, sel, axis=-1)[..., 0])

    return Tensor._from_op(out, (values,), backward, "maxunpool2")


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left (height, width) window of a (C,H,W) tensor."""
    if x.data.ndim != 3:
        raise ShapeError("crop2d expects a (C,H,W) tensor")
    c, h, w = x.data.shape
    if height > h or width > w or height < 1 or width < 1:
        raise ShapeError(f"cannot crop {h}x{w} to {height}x{width}")
    out = np.ascontiguousarray(x.data[:, :height, :width])

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, :height, :width] = grad
            x._accumulate(gx)

    return Tensor._from_op(out, (x,), backward, "crop2d")


def pixel_softmax(x: Tensor) -> Tensor:
    """Two-class per-pixel softmax over the channel axis, max-subtracted."""
    if x.data.ndim != 3 or x.data.shape[0] != 2:
        raise ShapeError(f"pixel_softmax expects (2,H,W), got {x.data.shape}")
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            inner = (grad * p).sum(axis=0, keepdims=True)
            x._accumulate(p * (grad - inner))

    return Tensor._from_op(p.astype(np.float32), (x,), backward, "pixel_softmax")


def cross_entropy_loss(probs: Tensor, target: np.ndarray,
                       class_weights: tuple[float, float] | None = None) -> Tensor:
    """Mean over pixels of -w_c * log(p_target), with a 1e-12 floor inside the log.

    `target` is a binary (H,W) map: 1 selects channel 1 (foreground).
    """
    if probs.data.ndim != 3 or probs.data.shape[0] != 2:
        raise ShapeError(f"cross_entropy_loss expects probs (2,H,W), got {probs.data.shape}")
    t = np.asarray(target)
    if t.shape != probs.data.shape[1:]:
        raise ShapeError(f"target shape {t.shape} != spatial shape {probs.data.shape[1:]}")
    t_idx = t.astype(np.intp)
    if class_weights is None:
        w = np.ones_like(probs.data[0])
    else:
        w = np.where(t_idx == 1, np.float32(class_weights[1]), np.float32(class_weights[0]))

    pt = np.take_along_axis(probs.data, t_idx[None], axis=0)[0]
    pt_clamped = np.maximum(pt, np.float32(LOG_FLOOR))
    n = np.float32(pt.size)
    loss = np.float32((w * -np.log(pt_clamped)).sum() / n)

    def backward(grad: np.ndarray) -> None:
        if probs.requires_grad:
            gpt = np.where(pt > LOG_FLOOR, -w / (n * pt_clamped), np.float32(0.0)) * grad
            gprobs = np.zeros_like(probs.data)
            np.put_along_axis(gprobs, t_idx[None], gpt[None], axis=0)
            probs._accumulate(gprobs)

    return Tensor._from_op(np.asarray(loss), (probs,), backward, "cross_entropy_loss")


@dataclass
class OptimizerState:
    """Velocity buffers plus the scalar hyperparameters of momentum SGD."""

    learning_rate: float
    momentum: float
    weight_decay: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], learning_rate: float,
                   momentum: float, weight_decay: float) -> "OptimizerState":
        vel = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(learning_rate, momentum, weight_decay, vel)


def sgd_momentum_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                      state: OptimizerState) -> None:
    """v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.

    Updates parameters and velocity in place.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise StateError(f"missing gradient for parameter {name!r}")
        v = state.velocity.get(name)
        if v is None or v.shape != p.data.shape:
            raise StateError(f"missing or mismatched velocity buffer for {name!r}")
        v *= np.float32(state.momentum)
        v += g
        if state.weight_decay:
            v += np.float32(state.weight_decay) * p.data
        p.data -= np.float32(state.learning_rate) * v
        _require_finite(p.data, "sgd_momentum_step")
