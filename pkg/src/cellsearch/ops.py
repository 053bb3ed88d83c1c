"""Differentiable neural operators on 4-d image tensors (batch, channel, height, width).

Convolution uses a patch-matrix reformulation: windows are gathered with
stride tricks into a column matrix and contracted with the kernel by batched
matmul.  All reductions run in a fixed order, so forward passes are
bit-reproducible for identical inputs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_4d(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a (batch, channel, height, width) tensor, got shape {x.shape}")


def same_padding(k: int, dilation: int = 1) -> int:
    """Per-side zero padding that preserves spatial size at stride 1."""
    return dilation * (k - 1) // 2


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window_view(padded: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
                 out_h: int, out_w: int) -> np.ndarray:
    b, c, _, _ = padded.shape
    sb, sc, sh, sw = padded.strides
    return as_strided(
        padded,
        shape=(b, c, kh, kw, out_h, out_w),
        strides=(sb, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
        writeable=False,
    )


def _scatter_windows(grad_patches: np.ndarray, padded_shape: tuple, stride: int,
                     dilation: int) -> np.ndarray:
    """Accumulate per-window gradients back onto the padded input grid."""
    b, c, kh, kw, out_h, out_w = grad_patches.shape
    out = np.zeros(padded_shape, dtype=grad_patches.dtype)
    for i in range(kh):
        hi = i * dilation
        rows = slice(hi, hi + stride * (out_h - 1) + 1, stride)
        for j in range(kw):
            wj = j * dilation
            cols = slice(wj, wj + stride * (out_w - 1) + 1, stride)
            out[:, :, rows, cols] += grad_patches[:, :, i, j]
    return out


def _crop_padding(arr: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return arr
    h, w = arr.shape[2], arr.shape[3]
    return np.ascontiguousarray(arr[:, :, ph:h - ph, pw:w - pw])


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, groups: int = 1, padding="same") -> Tensor:
    """2-d convolution with optional dilation and channel groups.

    ``weight`` has shape (c_out, c_in / groups, k, k).  ``padding`` is either
    the string ``"same"`` (stride-1 size preserving) or an explicit per-side
    count.
    """
    _check_4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d, got shape {weight.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if dilation not in (1, 2):
        raise ValueError(f"conv2d dilation must be 1 or 2, got {dilation}")
    batch, c_in, h, w = x.data.shape
    c_out, c_group, kh, kw = weight.data.shape
    if groups < 1 or c_in % groups != 0:
        raise ValueError(f"input channels {c_in} not divisible by groups {groups}")
    if c_out % groups != 0:
        raise ValueError(f"output channels {c_out} not divisible by groups {groups}")
    if c_group != c_in // groups:
        raise ShapeError(
            f"kernel expects {c_group} channels per group but input provides {c_in // groups}"
        )
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")

    if padding == "same":
        ph, pw = same_padding(kh, dilation), same_padding(kw, dilation)
    else:
        ph = pw = int(padding)
    out_h = conv_output_size(h, kh, stride, ph, dilation)
    out_w = conv_output_size(w, kw, stride, pw, dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {weight.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    patches = _window_view(padded, kh, kw, stride, dilation, out_h, out_w)
    n_windows = out_h * out_w
    k_size = c_group * kh * kw
    # (batch, groups, c_group * kh * kw, windows)
    cols = np.ascontiguousarray(patches).reshape(batch, groups, k_size, n_windows)
    w_mat = weight.data.reshape(groups, c_out // groups, k_size)
    out = np.matmul(w_mat[None], cols).reshape(batch, c_out, out_h, out_w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    if not any(p.requires_grad for p in parents):
        return Tensor(out)

    padded_shape = padded.shape

    def bwd(g):
        g_mat = g.reshape(batch, groups, c_out // groups, n_windows)
        grad_w = None
        if weight.requires_grad:
            grad_w = np.matmul(g_mat, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            grad_w = grad_w.reshape(weight.data.shape)
        grad_x = None
        if x.requires_grad:
            grad_cols = np.matmul(w_mat.transpose(0, 2, 1)[None], g_mat)
            grad_patches = grad_cols.reshape(batch, c_in, kh, kw, out_h, out_w)
            grad_x = _crop_padding(
                _scatter_windows(grad_patches, padded_shape, stride, dilation), ph, pw
            )
        if bias is None:
            return grad_x, grad_w
        grad_b = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return grad_x, grad_w, grad_b

    return Tensor(out, True, _parents=parents, _backward=bwd)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 1) -> Tensor:
    """Window maximum; ties route the gradient to the first maximal element
    in row-major window scan order."""
    _check_4d(x, "max_pool2d")
    if stride not in (1, 2):
        raise ValueError(f"pool stride must be 1 or 2, got {stride}")
    batch, c, h, w = x.data.shape
    p = same_padding(k)
    out_h = conv_output_size(h, k, stride, p, 1)
    out_w = conv_output_size(w, k, stride, p, 1)
    lowest = np.array(-np.inf, dtype=x.data.dtype)
    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=lowest)
    windows = np.ascontiguousarray(
        _window_view(padded, k, k, stride, 1, out_h, out_w)
    ).reshape(batch, c, k * k, out_h * out_w)
    argmax = windows.argmax(axis=2)
    out = np.take_along_axis(windows, argmax[:, :, None, :], axis=2)[:, :, 0, :]
    out = out.reshape(batch, c, out_h, out_w)
    if not x.requires_grad:
        return Tensor(out)

    padded_shape = padded.shape

    def bwd(g):
        grad_windows = np.zeros((batch, c, k * k, out_h * out_w), dtype=g.dtype)
        np.put_along_axis(grad_windows, argmax[:, :, None, :],
                          g.reshape(batch, c, 1, out_h * out_w), axis=2)
        grad_patches = grad_windows.reshape(batch, c, k, k, out_h, out_w)
        return (_crop_padding(_scatter_windows(grad_patches, padded_shape, stride, 1), p, p),)

    return Tensor(out, True, _parents=(x,), _backward=bwd)


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 1) -> Tensor:
    """Window mean whose divisor counts only in-bounds cells, so constant
    inputs are fixed points."""
    _check_4d(x, "avg_pool2d")
    if stride not in (1, 2):
        raise ValueError(f"pool stride must be 1 or 2, got {stride}")
    batch, c, h, w = x.data.shape
    p = same_padding(k)
    out_h = conv_output_size(h, k, stride, p, 1)
    out_w = conv_output_size(w, k, stride, p, 1)
    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    sums = np.ascontiguousarray(_window_view(padded, k, k, stride, 1, out_h, out_w)).sum(axis=(2, 3))
    ones = np.ones((1, 1, h, w), dtype=x.data.dtype)
    ones_padded = np.pad(ones, ((0, 0), (0, 0), (p, p), (p, p)))
    counts = np.ascontiguousarray(_window_view(ones_padded, k, k, stride, 1, out_h, out_w)).sum(axis=(2, 3))
    out = sums / counts
    if not x.requires_grad:
        return Tensor(out)

    padded_shape = padded.shape

    def bwd(g):
        share = g / counts
        grad_patches = np.broadcast_to(
            share[:, :, None, None, :, :], (batch, c, k, k, out_h, out_w)
        )
        return (_crop_padding(_scatter_windows(np.ascontiguousarray(grad_patches),
                                               padded_shape, stride, 1), p, p),)

    return Tensor(out, True, _parents=(x,), _backward=bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, _parents=(x,), _backward=lambda g: (g * (x.data > 0),))


def batch_norm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor],
               running_mean: np.ndarray, running_var: np.ndarray, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over (batch, height, width).

    Training mode normalizes with batch statistics and folds them into the
    running averages in place; eval mode reads the running averages.
    ``gamma``/``beta`` are optional affine parameters.
    """
    _check_4d(x, "batch_norm")
    batch, c, h, w = x.data.shape
    n = batch * h * w
    if n == 0:
        raise ValueError("batch_norm got an empty batch")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)

    inv = 1.0 / np.sqrt(var + eps)
    centered = x.data - mean[None, :, None, None]
    xhat = centered * inv[None, :, None, None]
    if gamma is not None:
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        parents = (x, gamma, beta)
    else:
        out = xhat
        parents = (x,)
    if not any(p.requires_grad for p in parents):
        return Tensor(out)

    def bwd(g):
        g_xhat = g * gamma.data[None, :, None, None] if gamma is not None else g
        if x.requires_grad:
            if training:
                inv_b = inv[None, :, None, None]
                d_var = (g_xhat * centered).sum(axis=(0, 2, 3)) * (-0.5) * inv ** 3
                d_mean = (-(g_xhat).sum(axis=(0, 2, 3)) * inv
                          + d_var * (-2.0 / n) * centered.sum(axis=(0, 2, 3)))
                grad_x = (g_xhat * inv_b
                          + d_var[None, :, None, None] * 2.0 * centered / n
                          + d_mean[None, :, None, None] / n)
            else:
                grad_x = g_xhat * inv[None, :, None, None]
        else:
            grad_x = None
        if gamma is None:
            return (grad_x,)
        grad_gamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        grad_beta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return grad_x, grad_gamma, grad_beta

    return Tensor(out, True, _parents=parents, _backward=bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Collapse spatial dimensions to a (batch, channel) mean."""
    _check_4d(x, "global_avg_pool")
    batch, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))
    if not x.requires_grad:
        return Tensor(out)

    def bwd(g):
        grad = np.empty_like(x.data)
        grad[...] = (g / (h * w))[:, :, None, None]
        return (grad,)

    return Tensor(out, True, _parents=(x,), _backward=bwd)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    for t in inputs:
        _check_4d(t, "concat_channels")
    ref = inputs[0].data.shape
    for t in inputs[1:]:
        if t.data.shape[0] != ref[0] or t.data.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels inputs disagree: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    if not any(t.requires_grad for t in inputs):
        return Tensor(out)

    sizes = [t.data.shape[1] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]) if t.requires_grad else None
            for i, t in enumerate(inputs)
        )

    return Tensor(out, True, _parents=tuple(inputs), _backward=bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Overflow-safe softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not x.requires_grad:
        return Tensor(out)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, True, _parents=(x,), _backward=bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    batch, classes = logits.data.shape
    if batch == 0:
        raise ValueError("cross_entropy got an empty batch")
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"labels must have shape ({batch},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    out = -log_probs[rows, labels].mean()
    if not logits.requires_grad:
        return Tensor(out)

    def bwd(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return Tensor(out, True, _parents=(logits,), _backward=bwd)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: x @ weight (+ bias)."""
    from .tensor import matmul

    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def row(x: Tensor, index: int) -> Tensor:
    """Extract row ``index`` of a 2-d tensor as a differentiable 1-d slice."""
    if x.data.ndim != 2:
        raise ShapeError(f"row() expects a 2-d tensor, got shape {x.shape}")
    out = x.data[index].copy()
    if not x.requires_grad:
        return Tensor(out)

    def bwd(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return Tensor(out, True, _parents=(x,), _backward=bwd)


def weighted_sum(coeffs: Tensor, branches: Sequence[Tensor]) -> Tensor:
    """Mix equally shaped branch outputs with a 1-d coefficient vector."""
    if coeffs.data.ndim != 1 or coeffs.data.shape[0] != len(branches):
        raise ShapeError(
            f"need one coefficient per branch: {coeffs.shape} vs {len(branches)} branches"
        )
    ref = branches[0].data.shape
    for b in branches[1:]:
        if b.data.shape != ref:
            raise ShapeError(f"candidate outputs must share a shape: {ref} vs {b.shape}")
    out = coeffs.data[0] * branches[0].data
    for o in range(1, len(branches)):
        out = out + coeffs.data[o] * branches[o].data
    parents = (coeffs, *branches)
    if not any(p.requires_grad for p in parents):
        return Tensor(out)

    def bwd(g):
        grad_c = None
        if coeffs.requires_grad:
            grad_c = np.array([np.sum(b.data * g) for b in branches], dtype=coeffs.data.dtype)
        return (grad_c, *[
            coeffs.data[o] * g if branches[o].requires_grad else None
            for o in range(len(branches))
        ])

    return Tensor(out, True, _parents=parents, _backward=bwd)
