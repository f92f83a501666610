"""Parallel channel/spatial attention block.

The channel path squeezes each feature map to its mean and passes the
vector through a small bottleneck MLP; the spatial path is a 3x3x3
convolution keeping the channel count. Both end in a sigmoid, their product
is the attention map, and the input is re-weighted by it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    ShapeError,
    conv3d_backward,
    conv3d_forward,
    relu_forward,
    sigmoid,
)


@dataclass
class AttentionParams:
    cam1_w: np.ndarray  # (hidden, C)
    cam1_b: np.ndarray  # (hidden,)
    cam2_w: np.ndarray  # (C, hidden)
    cam2_b: np.ndarray  # (C,)
    sam_w: np.ndarray  # (C, C, 3, 3, 3)
    sam_b: np.ndarray  # (C,)

    @property
    def channels(self) -> int:
        return self.cam2_w.shape[0]


def _check_params(x: np.ndarray, p: AttentionParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"x must have shape (C, D, H, W), got {x.shape}")
    c = x.shape[0]
    hidden = p.cam1_w.shape[0]
    ok = (
        p.cam1_w.shape == (hidden, c)
        and p.cam1_b.shape == (hidden,)
        and p.cam2_w.shape == (c, hidden)
        and p.cam2_b.shape == (c,)
        and p.sam_w.shape == (c, c, 3, 3, 3)
        and p.sam_b.shape == (c,)
    )
    if not ok:
        raise ShapeError(f"attention params do not fit a {c}-channel input")


def channel_attention(x: np.ndarray, p: AttentionParams):
    """Per-channel weights ``sigmoid(W2 relu(W1 gap(x) + b1) + b2)``.

    Returns:
        ``(ca, cache)`` with ``ca`` of shape ``(C,)``.
    """
    _check_params(x, p)
    gap = x.mean(axis=(1, 2, 3))
    h, hmask = relu_forward(p.cam1_w @ gap + p.cam1_b)
    ca = sigmoid(p.cam2_w @ h + p.cam2_b)
    return ca, (gap, h, hmask, ca, x.shape)


def channel_attention_backward(dca: np.ndarray, cache, p: AttentionParams):
    gap, h, hmask, ca, xshape = cache
    ds = dca * ca * (1.0 - ca)
    grads = {"cam2.weight": np.outer(ds, h), "cam2.bias": ds}
    dh = (p.cam2_w.T @ ds) * hmask
    grads["cam1.weight"] = np.outer(dh, gap)
    grads["cam1.bias"] = dh
    dgap = p.cam1_w.T @ dh
    n = xshape[1] * xshape[2] * xshape[3]
    dx = np.broadcast_to((dgap / n)[:, None, None, None], xshape)
    return dx, grads


def spatial_attention(x: np.ndarray, p: AttentionParams):
    """Voxelwise weights ``sigmoid(conv3d(x))``, one map per channel."""
    _check_params(x, p)
    pre, conv_cache = conv3d_forward(x, p.sam_w, p.sam_b)
    sa = sigmoid(pre)
    return sa, (sa, conv_cache)


def spatial_attention_backward(dsa: np.ndarray, cache):
    sa, conv_cache = cache
    dx, dw, db = conv3d_backward(dsa * sa * (1.0 - sa), conv_cache)
    return dx, {"sam.weight": dw, "sam.bias": db}


def apply_attention(x: np.ndarray, p: AttentionParams, ca=None, sa=None):
    """Re-weight ``x`` by the combined attention map ``A = ca[c] * sa[c, v]``.

    ``ca``/``sa`` may be supplied to override the learned paths (used in
    tests to pin the map); overridden paths receive no gradient.

    Returns:
        ``(x_reweighted, A, cache)``.
    """
    ca_cache = sa_cache = None
    if ca is None:
        ca, ca_cache = channel_attention(x, p)
    if sa is None:
        sa, sa_cache = spatial_attention(x, p)
    amap = ca[:, None, None, None] * sa
    return x * amap, amap, (x, ca, sa, amap, ca_cache, sa_cache)


def apply_attention_backward(dout: np.ndarray, cache, p: AttentionParams):
    x, ca, sa, amap, ca_cache, sa_cache = cache
    dx = dout * amap
    damap = dout * x
    grads = {}
    if ca_cache is not None:
        dca = (damap * sa).sum(axis=(1, 2, 3))
        dxc, g = channel_attention_backward(dca, ca_cache, p)
        dx = dx + dxc
        grads.update(g)
    if sa_cache is not None:
        dxs, g = spatial_attention_backward(damap * ca[:, None, None, None], sa_cache)
        dx = dx + dxs
        grads.update(g)
    return dx, grads
