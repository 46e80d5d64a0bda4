"""Convolutional-network operations on NCHW tensors, each with its backward rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, Tensor

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels but weight {weight.shape} expects {wcin}")
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid kernel {kh}x{kw}, stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: non-positive output extent {ho}x{wo} for input {x.shape}, weight {weight.shape}, "
            f"stride {stride}, padding {padding}"
        )

    xd, wd = x.data, weight.data
    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        xs = np.ascontiguousarray(xs)
        hs, ws = xs.shape[2], xs.shape[3]
        xs3 = xs.reshape(n, cin, hs * ws)
        w2 = wd.reshape(cout, cin)
        out = (w2 @ xs3).reshape(n, cout, hs, ws)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(g):
            g3 = g.reshape(n, cout, hs * ws)
            gx = None
            if x.requires_grad:
                gs = (w2.T @ g3).reshape(n, cin, hs, ws)
                if stride > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gs
                else:
                    gx = gs
            gw = (g3 @ xs3.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape) if weight.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return gx, gw, gb

    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # (N, Ho, Wo, Cin*kh*kw) column matrix
        cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
        w2 = wd.reshape(cout, -1)
        out = (cols @ w2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gw = (g2.T @ cols).reshape(wd.shape) if weight.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            gx = None
            if x.requires_grad:
                gcols = (g2 @ w2).reshape(n, ho, wo, cin, kh, kw)
                gxp = np.zeros(xp.shape, dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out.astype(xd.dtype, copy=False), parents, backward, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max over sliding windows; gradient goes to the first maximum in row-major order."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: window and stride must be >= 1, got {window}, {stride}")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} larger than spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = windows.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for k in range(window * window):
            i, j = divmod(k, window)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == k, g, 0)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if factor == 1:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "upsample")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, factor, w, factor)).reshape(
        n, c, h * factor, w * factor
    )

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "upsample")


@dataclass
class RunningMoments:
    mean: Parameter
    var: Parameter


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: RunningMoments | None = None,
    train: bool = True,
    eps: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalisation. Train mode uses population batch moments.

    Train mode updates ``state`` in place with ``momentum``; eval mode reads it.
    The running variance is updated with the unbiased batch variance.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n, c, h, w = x.shape
    count = n * h * w
    if count < 1:
        raise ShapeError("batchnorm2d: empty batch")
    xd = x.data
    if train:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if state is not None:
            unbiased = var * count / (count - 1) if count > 1 else var
            state.mean.data[...] = (1 - momentum) * state.mean.data + momentum * mean
            state.var.data[...] = (1 - momentum) * state.var.data + momentum * unbiased
    else:
        if state is None:
            raise ValueError("batchnorm2d: eval mode needs running moments")
        mean = state.mean.data
        var = state.var.data
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if train:
                gx = (
                    inv_std[None, :, None, None]
                    / count
                    * (
                        count * gxhat
                        - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    )
                )
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x (N,F), weight (O,F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return Tensor._from_op(out, (x,), backward, "global_avg_pool")
