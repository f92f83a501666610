"""Forward/backward primitives on (C, D, H, W) arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Arrays keep the dtype of their inputs, so the same
code runs in float32 for training and float64 for gradient checking.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

# (kd, kh, kw) order used to flatten 3x3x3 kernels
_TAPS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with a layer."""


def _check4(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must have shape (C, D, H, W), got {x.shape}")


# ---------------------------------------------------------------------------
# 3x3x3 convolution, stride 1, zero padding 1
# ---------------------------------------------------------------------------
#
# The input is zero padded and flattened per channel. A kernel tap then
# becomes a constant offset into the flat array, so the column matrix is
# built from 27 contiguous slices and the whole convolution is one GEMM.
# Outputs are computed on a contiguous window of the padded grid that
# covers every interior voxel; border positions are discarded.


def _pad_geometry(dims):
    d, h, w = dims
    s0 = (h + 2) * (w + 2)
    s1 = w + 2
    n_pad = (d + 2) * s0
    lo = s0 + s1 + 1
    m = n_pad - 2 * lo
    offsets = [(a - 1) * s0 + (b - 1) * s1 + (c - 1) for a, b, c in _TAPS]
    return n_pad, lo, m, offsets


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    _check4(x)
    if w.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ShapeError(f"conv weight must be (Cout, Cin, 3, 3, 3), got {w.shape}")
    cout, cin = w.shape[:2]
    if x.shape[0] != cin:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {b.shape}")
    dims = x.shape[1:]
    d, h, wd = dims
    n_pad, lo, m, offsets = _pad_geometry(dims)

    xp = np.zeros((cin, d + 2, h + 2, wd + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    xp = xp.reshape(cin, n_pad)
    cols = np.empty((27, cin, m), dtype=x.dtype)
    for k, off in enumerate(offsets):
        cols[k] = xp[:, lo + off : lo + off + m]
    cols = cols.reshape(27 * cin, m)

    wmat = w.transpose(0, 2, 3, 4, 1).reshape(cout, 27 * cin)
    out_p = np.zeros((cout, n_pad), dtype=x.dtype)
    out_p[:, lo : lo + m] = wmat @ cols
    out = out_p.reshape(cout, d + 2, h + 2, wd + 2)[:, 1:-1, 1:-1, 1:-1]
    out = out + b[:, None, None, None]
    return out, (cols, np.ascontiguousarray(wmat.T), w.shape, dims)


def conv3d_backward(dout: np.ndarray, cache):
    cols, wmat_t, wshape, dims = cache
    cout, cin = wshape[:2]
    d, h, wd = dims
    n_pad, lo, m, offsets = _pad_geometry(dims)

    gp = np.zeros((cout, d + 2, h + 2, wd + 2), dtype=dout.dtype)
    gp[:, 1:-1, 1:-1, 1:-1] = dout
    g = gp.reshape(cout, n_pad)[:, lo : lo + m]

    dwmat = g @ cols.T
    dw = dwmat.reshape(cout, 3, 3, 3, cin).transpose(0, 4, 1, 2, 3)
    db = dout.sum(axis=(1, 2, 3))

    dcols = (wmat_t @ g).reshape(27, cin, m)
    dxp = np.zeros((cin, n_pad), dtype=dout.dtype)
    for k, off in enumerate(offsets):
        dxp[:, lo + off : lo + off + m] += dcols[k]
    dx = dxp.reshape(cin, d + 2, h + 2, wd + 2)[:, 1:-1, 1:-1, 1:-1]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# 1x1x1 convolution (head)
# ---------------------------------------------------------------------------


def pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    _check4(x)
    if w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"pointwise weight {w.shape} / bias {b.shape} vs input {x.shape}")
    flat = x.reshape(x.shape[0], -1)
    out = w @ flat + b[:, None]
    return out.reshape((w.shape[0],) + x.shape[1:]), (flat, w, x.shape)


def pointwise_backward(dout: np.ndarray, cache):
    flat, w, xshape = cache
    g = dout.reshape(dout.shape[0], -1)
    dw = g @ flat.T
    db = g.sum(axis=1)
    dx = (w.T @ g).reshape(xshape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# Transposed convolution, kernel 2, stride 2
# ---------------------------------------------------------------------------


def tconv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Upsample by 2 along every spatial axis.

    ``out[co, 2d+i, 2h+j, 2w+k] = sum_ci x[ci, d, h, w] * w[ci, co, i, j, k] + b[co]``
    """
    _check4(x)
    if w.ndim != 5 or w.shape[2:] != (2, 2, 2) or w.shape[0] != x.shape[0]:
        raise ShapeError(f"transposed conv weight {w.shape} vs input {x.shape}")
    cin, cout = w.shape[:2]
    if b.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {b.shape}")
    d, h, wd = x.shape[1:]
    flat = x.reshape(cin, -1)
    # rows ordered (co, i, j, k)
    wmat = w.reshape(cin, cout * 8).T
    y = (wmat @ flat).reshape(cout, 2, 2, 2, d, h, wd)
    out = y.transpose(0, 4, 1, 5, 2, 6, 3).reshape(cout, 2 * d, 2 * h, 2 * wd)
    out = out + b[:, None, None, None]
    return out, (flat, wmat, w.shape, x.shape)


def tconv3d_backward(dout: np.ndarray, cache):
    flat, wmat, wshape, xshape = cache
    cin, cout = wshape[:2]
    d, h, wd = xshape[1:]
    g = dout.reshape(cout, d, 2, h, 2, wd, 2).transpose(0, 2, 4, 6, 1, 3, 5)
    g = g.reshape(cout * 8, d * h * wd)
    dwmat = g @ flat.T
    dw = dwmat.T.reshape(wshape)
    db = dout.sum(axis=(1, 2, 3))
    dx = (wmat.T @ g).reshape(xshape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# Max pooling, window 2, stride 2
# ---------------------------------------------------------------------------


def maxpool_forward(x: np.ndarray):
    _check4(x)
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {x.shape[1:]}")
    win = x.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4, 6)
    win = win.reshape(c, d // 2, h // 2, w // 2, 8)
    # argmax returns the first maximum; window order (i, j, k) follows the
    # global linear order, so ties go to the lowest linear index
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool_backward(dout: np.ndarray, cache):
    idx, xshape = cache
    c, d, h, w = xshape
    win = np.zeros(dout.shape + (8,), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    win = win.reshape(c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
    return win.reshape(xshape)


# ---------------------------------------------------------------------------
# Elementwise helpers
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
