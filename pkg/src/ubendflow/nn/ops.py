"""Layer primitives: strided cross-correlation, its exact adjoint
(transposed convolution), dense layers and ReLU, each with a matching
backward pass.

Tensors are float arrays shaped (batch, channels, height, width).
Convolution filters are (out_channels, in_channels, kh, kw); transposed
convolution filters are (in_channels, out_channels, kh, kw), so a filter
tensor can be handed from conv2d to deconv2d unchanged and the two maps
are adjoint by construction.
"""
from __future__ import annotations

import numpy as np


class OpError(ValueError):
    pass


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise OpError(
            f"non-integral conv output: size={size} kernel={kernel} "
            f"stride={stride} padding={padding}")
    return span // stride + 1


def deconv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size - 1) * stride - 2 * padding + kernel
    if out < 1:
        raise OpError(
            f"transposed conv output collapses: size={size} kernel={kernel} "
            f"stride={stride} padding={padding}")
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride,
                                    kj:kj + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto a (N,C,Hp,Wp) grid."""
    out = np.zeros(shape, dtype=cols.dtype)
    n, c = shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * ho:stride,
                kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    return out


def conv2d(x: np.ndarray, filters: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Strided cross-correlation (no kernel flip) plus per-filter bias."""
    y, _ = conv2d_forward(x, filters, bias, stride, padding)
    return y


def conv2d_forward(x, filters, bias=None, stride=1, padding=0):
    n, cin, h, w = x.shape
    cout, cin_f, kh, kw = filters.shape
    if cin_f != cin:
        raise OpError(f"filter expects {cin_f} input channels, got {cin}")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    cols = _im2col(_pad(x, padding), kh, kw, stride, ho, wo)
    y = np.matmul(filters.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    if bias is not None:
        y += bias.reshape(1, cout, 1, 1)
    return y, cols


def conv2d_backward(dy, x_shape, filters, cols, stride=1, padding=0):
    n, cin, h, w = x_shape
    cout, _, kh, kw = filters.shape
    ho, wo = dy.shape[2:]
    dym = dy.reshape(n, cout, ho * wo)
    dw = np.matmul(dym, cols.transpose(0, 2, 1)).sum(axis=0).reshape(filters.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = np.matmul(filters.reshape(cout, -1).T, dym)
    dxp = _col2im(dcols, (n, cin, h + 2 * padding, w + 2 * padding),
                  kh, kw, stride, ho, wo)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


def deconv2d(x: np.ndarray, filters: np.ndarray, bias: np.ndarray | None = None,
             stride: int = 1, padding: int = 0) -> np.ndarray:
    """Transposed convolution: the exact adjoint of conv2d for the same
    filter/stride/padding."""
    y, _ = deconv2d_forward(x, filters, bias, stride, padding)
    return y


def deconv2d_forward(x, filters, bias=None, stride=1, padding=0):
    n, cin, h, w = x.shape
    cin_f, cout, kh, kw = filters.shape
    if cin_f != cin:
        raise OpError(f"filter expects {cin_f} input channels, got {cin}")
    ho = deconv_out_size(h, kh, stride, padding)
    wo = deconv_out_size(w, kw, stride, padding)
    xm = x.reshape(n, cin, h * w)
    cols = np.matmul(filters.reshape(cin, -1).T, xm)
    yp = _col2im(cols, (n, cout, ho + 2 * padding, wo + 2 * padding),
                 kh, kw, stride, h, w)
    y = yp[:, :, padding:-padding, padding:-padding] if padding else yp
    if bias is not None:
        y = y + bias.reshape(1, cout, 1, 1)
    return y, xm


def deconv2d_backward(dy, x_shape, filters, xm, stride=1, padding=0):
    n, cin, h, w = x_shape
    _, cout, kh, kw = filters.shape
    dcols = _im2col(_pad(dy, padding), kh, kw, stride, h, w)
    dx = np.matmul(filters.reshape(cin, -1), dcols).reshape(x_shape)
    dw = np.matmul(xm, dcols.transpose(0, 2, 1)).sum(axis=0).reshape(filters.shape)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map on flattened inputs: (N, D) @ (D, M) + (M,)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise OpError(f"dense shape mismatch: {x.shape} vs {weights.shape}")
    return x @ weights + bias


def dense_backward(dy, x, weights):
    return dy @ weights.T, x.T @ dy, dy.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy, y):
    return dy * (y > 0)
