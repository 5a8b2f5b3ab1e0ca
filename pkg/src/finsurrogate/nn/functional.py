"""Forward/backward kernels on float64 NCHW arrays.

Convolutions are cross-correlations computed through an im2col view.
Max pooling breaks ties toward the first element of each window in
row-major order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, padding: int = 0):
    """Returns ``(out, cache)``; ``w`` has shape (F, C, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ValueError(f"incompatible shapes: input {x.shape}, weights {w.shape}")
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(f, -1).T
    if b is not None:
        out += b
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, stride, padding, b is not None)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Gradients ``(dx, dw, db)`` for :func:`conv2d_forward`; ``dx`` is None unless needed."""
    xshape, cols, w, stride, padding, has_bias = cache
    n, c, h, wd = xshape
    f, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    if dout.shape != (n, f, ho, wo):
        raise ValueError(f"upstream gradient shape {dout.shape} does not match forward output")
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0) if has_bias else None
    if not need_dx:
        return None, dw, db
    if stride == 1 and 2 * padding <= 2 * (k - 1):
        # stride-1 input gradient is a full correlation with the flipped, transposed kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        full, _ = conv2d_forward(dout, wf, None, 1, k - 1 - padding)
        return full[:, :, :h, :wd], dw, db
    dcols = (d2 @ w.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
    return np.ascontiguousarray(dx), dw, db


def _depthwise_correlate(xp: np.ndarray, w: np.ndarray, ho: int, wo: int) -> np.ndarray:
    k = w.shape[1]
    out = np.multiply(xp[:, :, :ho, :wo], w[None, :, 0, 0, None, None])
    tmp = np.empty_like(out)
    for i in range(k):
        for j in range(k):
            if i or j:
                np.multiply(xp[:, :, i : i + ho, j : j + wo], w[None, :, i, j, None, None], out=tmp)
                out += tmp
    return out


def depthwise_forward(x: np.ndarray, w: np.ndarray, padding: int = 1):
    """Per-channel k x k correlation, stride 1; ``w`` has shape (C, k, k)."""
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input {x.shape}, depthwise weights {w.shape}")
    n, c, h, wd = x.shape
    k = w.shape[1]
    ho, wo = conv_output_size(h, k, 1, padding), conv_output_size(wd, k, 1, padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    xp = _pad(x, padding)
    return _depthwise_correlate(xp, w, ho, wo), (xp, w, padding, (h, wd))


def depthwise_backward(dout: np.ndarray, cache):
    xp, w, padding, (h, wd) = cache
    k = w.shape[1]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.einsum("nchw,nchwij->cij", dout, win)
    if padding <= k - 1:
        full = _pad(dout, k - 1 - padding)
        dx = _depthwise_correlate(full, np.ascontiguousarray(w[:, ::-1, ::-1]), h, wd)
        return dx, dw
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + ho, j : j + wo] += dout * w[None, :, i, j, None, None]
    return np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + wd]), dw


def pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    """1 x 1 convolution; ``w`` has shape (F, C)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape}, pointwise weights {w.shape}")
    out = np.einsum("fc,nchw->nfhw", w, x, optimize=True)
    if b is not None:
        out += b[None, :, None, None]
    return out, (x, w, b is not None)


def pointwise_backward(dout: np.ndarray, cache):
    x, w, has_bias = cache
    dw = np.einsum("nfhw,nchw->fc", dout, x, optimize=True)
    dx = np.einsum("fc,nfhw->nchw", w, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


def maxpool2d_forward(x: np.ndarray, size: int = 2):
    """Non-overlapping ``size`` x ``size`` max pooling; ragged edges are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for {size}x{size} pooling")
    xt = x[:, :, : ho * size, : wo * size].reshape(n, c, ho, size, wo, size)
    flat = xt.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, size)


def maxpool2d_backward(dout: np.ndarray, cache):
    shape, arg, size = cache
    n, c, h, w = shape
    ho, wo = arg.shape[2], arg.shape[3]
    flat = np.zeros((n, c, ho, wo, size * size))
    np.put_along_axis(flat, arg[..., None], dout[..., None], axis=-1)
    blocks = flat.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
    dx = np.zeros(shape)
    dx[:, :, : ho * size, : wo * size] = blocks
    return dx


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """``w`` has shape (in, out)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"incompatible shapes: input {x.shape}, weights {w.shape}")
    return x @ w + b, x


def dense_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def mse_loss(y: np.ndarray, y_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all N entries and its gradient w.r.t. ``y_hat``."""
    y, y_hat = np.asarray(y, float), np.asarray(y_hat, float)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty batch")
    diff = y_hat - y
    return float(np.sum(diff * diff) / y.size), 2.0 * diff / y.size
