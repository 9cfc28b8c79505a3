"""Differentiable operations on 5-D (N, C, D, H, W) volumes and friends.

Each op computes its forward result with numpy and registers a backward
closure through :func:`record`. Saved values live in the closure.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, _as_tensor, _grad_enabled, record

PROB_FLOOR = 1e-7


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, bw)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def bw(g):
        return (np.broadcast_to(g, x.shape),)

    return record("sum", (x,), out, bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def bw(g):
        return (np.broadcast_to(g / n, x.shape),)

    return record("mean", (x,), out, bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def bw(g):
        return (g * mask,)

    return record("relu", (x,), out, bw)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def bw(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (x,), out, bw)


# ---------------------------------------------------------------- convolution

def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _windows(xp: np.ndarray, kernel, stride, out_sp) -> np.ndarray:
    win = sliding_window_view(xp, tuple(kernel), axis=(2, 3, 4))
    (sd, sh, sw), (od, oh, ow) = stride, out_sp
    return win[:, :, : (od - 1) * sd + 1 : sd, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]


def _correlate(win: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (N, D', H', W', Cout) -> (N, Cout, D', H', W')
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.moveaxis(out, 4, 1)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation. ``x``: (N,Cin,D,H,W), ``weight``: (Cout,Cin,kd,kh,kw)."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, *spatial = x.shape
    cout, wcin, *kernel = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv3d: input has {cin} channels but weight expects {wcin}")
    if min(stride) < 1:
        raise ValueError(f"conv3d: stride must be >= 1, got {stride}")
    out_sp = [_conv_out(sz, k, s, p) for sz, k, s, p in zip(spatial, kernel, stride, padding)]
    if min(out_sp) < 1 or any(k > sz + 2 * p for sz, k, p in zip(spatial, kernel, padding)):
        raise DimensionError(
            f"conv3d: kernel {tuple(kernel)} does not fit input {tuple(spatial)} with padding {padding}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} != ({cout},)")

    pd, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(padding) else x.data
    od, oh, ow = out_sp
    sd, sh, sw = stride
    kd, kh, kw = kernel
    win = _windows(xp, kernel, stride, out_sp)
    out = _correlate(win, weight.data)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad and stride == (1, 1, 1) and all(p < k for p, k in zip(padding, kernel)):
            # stride 1: correlate the (few-channel) output gradient with the flipped kernel
            q = [k - 1 - p for k, p in zip(kernel, padding)]
            gp = np.pad(g, ((0, 0), (0, 0), (q[0], q[0]), (q[1], q[1]), (q[2], q[2])))
            wf = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))
            gx = _correlate(_windows(gp, kernel, (1, 1, 1), spatial), wf)
        elif x.requires_grad:
            # cols: (N, D', H', W', Cin, kd, kh, kw)
            cols = np.tensordot(g, weight.data, axes=([1], [0]))
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, :, i : i + sd * od : sd, j : j + sh * oh : sh, k : k + sw * ow : sw] += np.moveaxis(
                            cols[..., i, j, k], 4, 1
                        )
            gx = gxp[:, :, pd : pd + spatial[0], ph : ph + spatial[1], pw : pw + spatial[2]]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record("conv3d", inputs, out, bw)


# ---------------------------------------------------------------- normalization

@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            shift=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


def batchnorm3d(x: Tensor, state: BatchNormState, train: bool = True, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N, D, H, W) per channel.

    In train mode batch statistics are used and the running estimates are
    updated in place (unbiased variance, exponential moving average).
    """
    if eps <= 0:
        raise ValueError("batchnorm3d: epsilon must be positive")
    if x.ndim != 5:
        raise DimensionError(f"batchnorm3d expects a 5-D input, got {x.shape}")
    c = x.shape[1]
    if c != state.channels:
        raise DimensionError(f"batchnorm3d: input has {c} channels, state has {state.channels}")
    bshape = (1, c, 1, 1, 1)
    gamma = state.scale.data.reshape(bshape)
    beta = state.shift.data.reshape(bshape)
    axes = (0, 2, 3, 4)
    m = x.data.size // c

    if not train:
        inv = 1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv
        out = (gamma * xhat + beta).astype(x.dtype)

        def bw_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return record("batchnorm3d_eval", (x, state.scale, state.shift), out, bw_eval)

    if m == 1:
        raise DimensionError("batchnorm3d: train mode needs more than one value per channel")
    mean = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (gamma * xhat + beta).astype(x.dtype)

    if _grad_enabled():
        mom = state.momentum
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean.reshape(c)
        state.running_var[:] = (1 - mom) * state.running_var + mom * var.reshape(c) * (m / (m - 1))

    def bw(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batchnorm3d", (x, state.scale, state.shift), out, bw)


# ---------------------------------------------------------------- pooling

def _pool_windows(x: Tensor, window, stride, name: str):
    window = _triple(window)
    stride = _triple(stride if stride is not None else window)
    if x.ndim != 5:
        raise DimensionError(f"{name} expects a 5-D input, got {x.shape}")
    spatial = x.shape[2:]
    if any(w > s for w, s in zip(window, spatial)):
        raise DimensionError(f"{name}: window {window} larger than input {tuple(spatial)}")
    out_sp = tuple(_conv_out(s, w, st, 0) for s, w, st in zip(spatial, window, stride))
    win = sliding_window_view(x.data, window, axis=(2, 3, 4))
    win = win[
        :, :,
        : (out_sp[0] - 1) * stride[0] + 1 : stride[0],
        : (out_sp[1] - 1) * stride[1] + 1 : stride[1],
        : (out_sp[2] - 1) * stride[2] + 1 : stride[2],
    ]
    return win, window, stride, out_sp


def _scatter_windows(gwin: np.ndarray, shape, window, stride, out_sp) -> np.ndarray:
    """Adjoint of the strided window view: add (N,C,D',H',W',kd,kh,kw) back onto ``shape``."""
    gx = np.zeros(shape, dtype=gwin.dtype)
    (od, oh, ow), (sd, sh, sw) = out_sp, stride
    for i in range(window[0]):
        for j in range(window[1]):
            for k in range(window[2]):
                gx[:, :, i : i + sd * od : sd, j : j + sh * oh : sh, k : k + sw * ow : sw] += gwin[..., i, j, k]
    return gx


def maxpool3d(x: Tensor, window=2, stride=None) -> Tensor:
    win, window, stride, out_sp = _pool_windows(x, window, stride, "maxpool3d")
    flat = win.reshape(*win.shape[:5], -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gwin = onehot.reshape(win.shape)
        return (_scatter_windows(gwin, x.shape, window, stride, out_sp),)

    return record("maxpool3d", (x,), np.ascontiguousarray(out), bw)


def avgpool3d(x: Tensor, window=2, stride=None) -> Tensor:
    win, window, stride, out_sp = _pool_windows(x, window, stride, "avgpool3d")
    size = window[0] * window[1] * window[2]
    out = win.mean(axis=(5, 6, 7)).astype(x.dtype)

    def bw(g):
        gwin = np.broadcast_to((g / size)[..., None, None, None], win.shape)
        return (_scatter_windows(gwin, x.shape, window, stride, out_sp),)

    return record("avgpool3d", (x,), out, bw)


def globalavgpool3d(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise DimensionError(f"globalavgpool3d expects a 5-D input, got {x.shape}")
    size = x.shape[2] * x.shape[3] * x.shape[4]
    out = x.data.mean(axis=(2, 3, 4)).astype(x.dtype)

    def bw(g):
        return (np.broadcast_to((g / size)[:, :, None, None, None], x.shape),)

    return record("globalavgpool3d", (x,), out, bw)


# ---------------------------------------------------------------- channel plumbing

def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise DimensionError("concat_channels needs at least one input")
    inputs = tuple(inputs)
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    if len(inputs) == 1:
        return inputs[0]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def bw(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(inputs))]

    return record("concat", tuple(inputs), out, bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop].copy()

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice", (x,), out, bw)


# ---------------------------------------------------------------- head and loss

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record("linear", inputs, out.astype(x.dtype), bw)


def bce_loss(prob: Tensor, label) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    y = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=prob.dtype)
    y = y.reshape(prob.shape).astype(prob.dtype)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss: labels must be 0 or 1")
    p = np.clip(prob.data, PROB_FLOOR, 1.0 - PROB_FLOOR)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))

    def bw(g):
        # derivative evaluated at the clamped value, passed through the clamp
        return (g * (p - y) / (p * (1 - p)) / n,)

    return record("bce", (prob,), np.asarray(loss, dtype=prob.dtype), bw)
