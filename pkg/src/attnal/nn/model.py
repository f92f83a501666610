"""Attention-embedded 3D u-net, forward and backward passes, checkpoints.

Layout for ``depth`` levels with base width ``F``::

    enc_i:  conv3 -> relu -> conv3 -> relu -> attention      (skip_i)
            maxpool
    bott:   conv3 -> relu -> conv3 -> relu -> attention
    up_i:   transposed conv, concat with skip_i
    dec_i:  conv3 -> relu -> conv3 -> relu -> attention
    head:   1x1x1 conv -> Z, attention -> A, Zr = Z * A, P = softmax(Zr)

The head emits ``num_classes + 1`` channels; the last one is the
UNLABELED class, which carries no loss and is ignored at inference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .attention import AttentionParams, apply_attention, apply_attention_backward

CKPT_MAGIC = b"SMDL"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 2
    features: int = 8
    depth: int = 1
    reduction: int = 2
    attention: bool = True
    in_channels: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.features < 1 or self.reduction < 1 or self.in_channels < 1:
            raise ValueError("features, reduction and in_channels must be >= 1")
        if not 1 <= self.depth <= 4:
            raise ValueError("depth must be in 1..4")

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1

    def width(self, level: int) -> int:
        return self.features * 2**level


@dataclass
class Model:
    config: ArchConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def site(self, name: str) -> AttentionParams:
        p = self.params
        return AttentionParams(
            p[f"{name}.cam1.weight"], p[f"{name}.cam1.bias"],
            p[f"{name}.cam2.weight"], p[f"{name}.cam2.bias"],
            p[f"{name}.sam.weight"], p[f"{name}.sam.bias"],
        )


@dataclass
class ForwardOutput:
    """Head outputs, all shaped ``(C + 1, D, H, W)``.

    ``A`` is None for a model built without attention.
    """

    Z: np.ndarray
    A: np.ndarray | None
    Zr: np.ndarray
    P: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.Z.shape[0] - 1

    def sr1(self) -> np.ndarray:
        """Class prediction from the recalibrated logits (first C channels)."""
        return self.Zr[:-1].argmax(axis=0).astype(np.uint8)

    def sr2(self) -> np.ndarray:
        """Class prediction from the head attention map (first C channels)."""
        if self.A is None:
            raise ValueError("model has no attention map")
        return self.A[:-1].argmax(axis=0).astype(np.uint8)

    def sr_z(self) -> np.ndarray:
        """Prediction from the pre-recalibration feature maps."""
        return self.Z[:-1].argmax(axis=0).astype(np.uint8)


def layer_shapes(cfg: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in checkpoint order."""
    shapes = []

    def conv(name, cin, cout):
        shapes.append((f"{name}.weight", (cout, cin, 3, 3, 3)))
        shapes.append((f"{name}.bias", (cout,)))

    def site(name, c):
        if not cfg.attention:
            return
        hidden = -(-c // cfg.reduction)
        shapes.extend([
            (f"{name}.cam1.weight", (hidden, c)),
            (f"{name}.cam1.bias", (hidden,)),
            (f"{name}.cam2.weight", (c, hidden)),
            (f"{name}.cam2.bias", (c,)),
            (f"{name}.sam.weight", (c, c, 3, 3, 3)),
            (f"{name}.sam.bias", (c,)),
        ])

    cin = cfg.in_channels
    for i in range(cfg.depth):
        c = cfg.width(i)
        conv(f"enc{i}.conv1", cin, c)
        conv(f"enc{i}.conv2", c, c)
        site(f"enc{i}.att", c)
        cin = c
    cb = cfg.width(cfg.depth)
    conv("bott.conv1", cin, cb)
    conv("bott.conv2", cb, cb)
    site("bott.att", cb)
    for i in reversed(range(cfg.depth)):
        c = cfg.width(i)
        shapes.append((f"up{i}.weight", (2 * c, c, 2, 2, 2)))
        shapes.append((f"up{i}.bias", (c,)))
        conv(f"dec{i}.conv1", 2 * c, c)
        conv(f"dec{i}.conv2", c, c)
        site(f"dec{i}.att", c)
    shapes.append(("head.weight", (cfg.out_channels, cfg.features)))
    shapes.append(("head.bias", (cfg.out_channels,)))
    site("head.att", cfg.out_channels)
    return shapes


def init_params(cfg: ArchConfig, seed: int, dtype=np.float32) -> Model:
    """He-normal convolutions, ``N(0, 1/fan_in)`` attention weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(cfg):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if ".att." in name:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(1.0 / fan_in)
        elif name.startswith("up"):
            fan_in = shape[0] * 8
            std = np.sqrt(2.0 / fan_in)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
        params[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return Model(cfg, params)


def _as_input(model: Model, x) -> np.ndarray:
    arr = getattr(x, "data", x)
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != model.config.in_channels:
        raise L.ShapeError(f"input must be (D, H, W) or (Cin, D, H, W), got {arr.shape}")
    step = 2**model.config.depth
    if any(s % step for s in arr.shape[1:]):
        raise L.ShapeError(f"spatial dims {arr.shape[1:]} not divisible by {step}")
    return arr.astype(model.dtype, copy=False)


def forward(model: Model, x, keep_cache: bool = False):
    """Run the network on one volume.

    Args:
        model: parameters and architecture.
        x: a ``Volume`` or an array shaped ``(D, H, W)`` / ``(1, D, H, W)``.
        keep_cache: also return the activation cache needed by ``backward``.
    """
    cfg = model.config
    p = model.params
    h = _as_input(model, x)
    tape = []

    def conv_relu(name, t):
        t, c1 = L.conv3d_forward(t, p[f"{name}.weight"], p[f"{name}.bias"])
        t, m1 = L.relu_forward(t)
        tape.append(("conv_relu", name, (c1, m1)))
        return t

    def attend(name, t):
        if not cfg.attention:
            return t, None
        t, amap, c = apply_attention(t, model.site(name))
        tape.append(("att", name, c))
        return t, amap

    skips = []
    for i in range(cfg.depth):
        h = conv_relu(f"enc{i}.conv1", h)
        h = conv_relu(f"enc{i}.conv2", h)
        h, _ = attend(f"enc{i}.att", h)
        skips.append(h)
        h, c = L.maxpool_forward(h)
        tape.append(("pool", i, c))
    h = conv_relu("bott.conv1", h)
    h = conv_relu("bott.conv2", h)
    h, _ = attend("bott.att", h)
    for i in reversed(range(cfg.depth)):
        h, c = L.tconv3d_forward(h, p[f"up{i}.weight"], p[f"up{i}.bias"])
        tape.append(("up", f"up{i}", c))
        h = np.concatenate([h, skips[i]], axis=0)
        tape.append(("cat", i, cfg.width(i)))
        h = conv_relu(f"dec{i}.conv1", h)
        h = conv_relu(f"dec{i}.conv2", h)
        h, _ = attend(f"dec{i}.att", h)
    z, c = L.pointwise_forward(h, p["head.weight"], p["head.bias"])
    tape.append(("head", "head", c))
    zr, amap = attend("head.att", z)
    out = ForwardOutput(Z=z, A=amap, Zr=zr, P=L.softmax(zr, axis=0))
    if keep_cache:
        return out, tape
    return out


def backward(model: Model, tape, dzr: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every parameter given ``dL/dZr``."""
    grads: dict[str, np.ndarray] = {}
    g = dzr
    skip_grads: dict[int, np.ndarray] = {}
    for kind, name, c in reversed(tape):
        if kind == "att":
            g, sg = apply_attention_backward(g, c, model.site(name))
            for k, v in sg.items():
                grads[f"{name}.{k}"] = v
        elif kind == "conv_relu":
            conv_cache, mask = c
            g, dw, db = L.conv3d_backward(L.relu_backward(g, mask), conv_cache)
            grads[f"{name}.weight"], grads[f"{name}.bias"] = dw, db
        elif kind == "head":
            g, dw, db = L.pointwise_backward(g, c)
            grads["head.weight"], grads["head.bias"] = dw, db
        elif kind == "cat":
            skip_grads[name] = g[c:]
            g = g[:c]
        elif kind == "up":
            g, dw, db = L.tconv3d_backward(g, c)
            grads[f"{name}.weight"], grads[f"{name}.bias"] = dw, db
        elif kind == "pool":
            g = L.maxpool_backward(g, c) + skip_grads.pop(name)
    return {k: grads[k] for k in model.params}


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------
# magic "SMDL" | u16 version | u8 dtype (0 f32, 1 f64) | u8 flags (bit0 attention)
# | u32 in_channels, num_classes, features, depth, reduction | u32 n_arrays
# | arrays in layer_shapes() order, little-endian


def save_checkpoint(path, model: Model) -> None:
    cfg = model.config
    dtype_code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}[model.dtype]
    le = "<f4" if dtype_code == 0 else "<f8"
    header = CKPT_MAGIC + struct.pack(
        "<HBB5II", CKPT_VERSION, dtype_code, int(cfg.attention),
        cfg.in_channels, cfg.num_classes, cfg.features, cfg.depth, cfg.reduction,
        len(model.params),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name, _ in layer_shapes(cfg):
            fh.write(np.ascontiguousarray(model.params[name], dtype=le).tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<HBB5II")
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 4 + head:
        raise CheckpointError(f"{path}: truncated header")
    version, dtype_code, flags, cin, ncls, feat, depth, red, n = struct.unpack(
        "<HBB5II", raw[4 : 4 + head]
    )
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if dtype_code not in (0, 1):
        raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
    cfg = ArchConfig(num_classes=ncls, features=feat, depth=depth, reduction=red,
                     attention=bool(flags & 1), in_channels=cin)
    shapes = layer_shapes(cfg)
    if n != len(shapes):
        raise CheckpointError(f"{path}: {n} arrays, architecture needs {len(shapes)}")
    le = np.dtype("<f4") if dtype_code == 0 else np.dtype("<f8")
    expected = sum(int(np.prod(s)) for _, s in shapes) * le.itemsize
    body = raw[4 + head :]
    if len(body) != expected:
        raise CheckpointError(f"{path}: payload {len(body)} bytes, expected {expected}")
    params, off = {}, 0
    native = np.float32 if dtype_code == 0 else np.float64
    for name, shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype=le, count=count, offset=off)
        params[name] = arr.reshape(shape).astype(native)
        off += count * le.itemsize
    return Model(cfg, params)
