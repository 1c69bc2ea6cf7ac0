"""Differentiable layer primitives on NCHW tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, make_result


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*k*k, H*W) patches for a same-size stride-1 conv."""
    b, c, h, w = x.shape
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,H,W,k,k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, h * w)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, _, h, wd = x.shape
    kout, _, k, _ = w.shape
    cols = _im2col(x, k)
    return np.matmul(w.reshape(kout, -1), cols).reshape(b, kout, h, wd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    ``weight`` is (K, C, k, k) with odd ``k`` (3 for the network body, 1 for
    the output head).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    kout, kin, kh, kw = weight.shape
    if kin != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {kin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {kh}x{kw}")

    cols = _im2col(x.data, kh)
    out = np.matmul(weight.data.reshape(kout, -1), cols).reshape(b, kout, h, w)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kout,):
            raise ShapeError(f"conv2d bias must be ({kout},), got {bias.shape}")
        out = out + bias.data.reshape(1, kout, 1, 1)
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(b, kout, h * w)
        gw = gx = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            # input gradient = same-size conv of g with the flipped, channel-swapped kernel
            wt = np.ascontiguousarray(weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = _conv_same(g, wt)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return make_result(out, parents, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first
    maximal element in row-major window order."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects NCHW, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return make_result(out, (x,), backward)


def upconv2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with a 2x2 kernel and stride 2.

    ``weight`` is (C_in, C_out, 2, 2); output is (B, C_out, 2H, 2W) with
    ``out[b, k, 2h+i, 2w+j] = sum_c x[b, c, h, w] * weight[c, k, i, j] + bias[k]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"upconv2 expects NCHW input and (C,K,2,2) weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    if weight.shape[0] != c:
        raise ShapeError(f"upconv2 channel mismatch: input has {c}, weight expects {weight.shape[0]}")
    k = weight.shape[1]
    # (B,H,W,C) @ (C, K*4) -> (B,H,W,K,2,2)
    xm = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    y = (xm @ weight.data.reshape(c, k * 4)).reshape(b, h, w, k, 2, 2)
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5)).reshape(b, k, 2 * h, 2 * w)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k,):
            raise ShapeError(f"upconv2 bias must be ({k},), got {bias.shape}")
        out = out + bias.data.reshape(1, k, 1, 1)
        parents.append(bias)

    def backward(g):
        gm = g.reshape(b, k, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(b * h * w, k * 4)
        gx = gw = None
        if x.requires_grad:
            gx = (gm @ weight.data.reshape(c, k * 4).T).reshape(b, h, w, c).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (xm.T @ gm).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return make_result(out, parents, backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def global_avg_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C) spatial mean."""
    return as_tensor(x).mean(axis=(2, 3))



def group_norm(x: Tensor, groups: int, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over channel groups of a (B,C,H,W) map.

    Statistics come from each sample alone, so training and inference
    behave identically and batch members never see each other.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects a 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels cannot be split into {groups} groups")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"group_norm scale/shift must be ({c},), got {scale.shape}, {shift.shape}")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(b, c, h, w).astype(x.dtype, copy=False)
    out = xhat * scale.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1)

    def backward(g):
        gs = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            d = (g * scale.data.reshape(1, c, 1, 1)).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            gx = inv * (d - d.mean(axis=2, keepdims=True) - xh * (d * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape).astype(x.dtype, copy=False)
        return gx, gs, gb

    return make_result(out, (x, scale, shift), backward)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalisation of a (B,C,H,W) map.

    Training mode normalises with the batch statistics over (B,H,W) and,
    when ``update_stats`` is set, updates ``running_mean``/``running_var``
    in place (unbiased variance).  Evaluation mode uses the running
    statistics, so the layer is a fixed affine map and keeps absolute
    intensity differences between inputs.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-D input, got {x.shape}")
    c = x.shape[1]
    for name, arr in (("scale", scale), ("shift", shift), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm {name} must be ({c},), got {arr.shape}")
    axes = (0, 2, 3)
    if training:
        n = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (n / (n - 1) if n > 1 else 1.0)
    else:
        mu, var = running_mean, running_var
    shape = (1, c, 1, 1)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(shape)
    xhat = (x.data - mu.astype(x.dtype).reshape(shape)) * inv
    out = xhat * scale.data.reshape(shape) + shift.data.reshape(shape)

    def backward(g):
        gs = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gb = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            d = g * scale.data.reshape(shape)
            if training:
                d = d - d.mean(axis=axes, keepdims=True) - xhat * (d * xhat).mean(axis=axes, keepdims=True)
            gx = (d * inv).astype(x.dtype, copy=False)
        return gx, gs, gb

    return make_result(out, (x, scale, shift), backward)
