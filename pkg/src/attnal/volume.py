"""Volumes, label volumes, the SVOL file format and the synthetic phantom.

File layout (little-endian)::

    "SVOL" | u16 version=1 | u8 dtype | u8 flags=0 | u32 D | u32 H | u32 W | payload

dtype 0 is float32 intensities, dtype 1 is uint8 class IDs. The payload is
D-major, so axial slice ``d`` is the contiguous block ``data[d]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SVOL"
VERSION = 1
HEADER = struct.Struct("<4sHBBIII")
DTYPE_F32 = 0
DTYPE_U8 = 1
MAX_VOXELS = 2**31

# mean intensity per class: background, outer tissue/brain, inner tissue, ventricle
CLASS_MEANS = (0.1, 0.6, 0.8, 0.35)
NOISE_SIGMA = 0.05
JITTER = 0.15


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class BadMagicError(VolumeFormatError):
    pass


class DimsOverflowError(VolumeFormatError):
    pass


class PayloadLengthError(VolumeFormatError):
    pass


class UnknownDtypeError(VolumeFormatError):
    pass


@dataclass
class Volume:
    data: np.ndarray  # float32, (D, H, W), values in [0, 1]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """Class IDs in ``0..C-1`` plus the UNLABELED sentinel ``C``."""

    data: np.ndarray  # uint8, (D, H, W)
    num_classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"label volume must be a non-empty 3D grid, got {self.data.shape}")
        if self.num_classes < 2 or self.num_classes > 254:
            raise ValueError(f"num_classes must be in 2..254, got {self.num_classes}")
        if self.data.size and int(self.data.max()) > self.num_classes:
            raise ValueError(f"label id {int(self.data.max())} exceeds UNLABELED={self.num_classes}")
        if self.data.size and int(self.data.min()) < 0:
            raise ValueError("negative label id")
        self.data = self.data.astype(np.uint8)

    @property
    def unlabeled(self) -> int:
        return self.num_classes

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def is_fully_annotated(self) -> bool:
        return not np.any(self.data == self.unlabeled)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def write_volume(path, vol: Volume | LabelVolume) -> None:
    if isinstance(vol, Volume):
        code, payload = DTYPE_F32, vol.data.astype("<f4")
    elif isinstance(vol, LabelVolume):
        code, payload = DTYPE_U8, vol.data.astype(np.uint8)
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    d, h, w = vol.dims
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, code, 0, d, h, w))
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_volume(path, num_classes: int | None = None) -> Volume | LabelVolume:
    """Read an SVOL file.

    Label files do not store C, so ``num_classes`` must be given for them;
    if omitted, the largest ID present is taken as the UNLABELED sentinel
    bound (``C = max(max_id, 2)``).
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an SVOL file (magic {raw[:4]!r})")
    _, version, code, _flags, d, h, w = HEADER.unpack_from(raw)
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if code not in (DTYPE_F32, DTYPE_U8):
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    n = d * h * w
    if n == 0 or n >= MAX_VOXELS:
        raise DimsOverflowError(f"{path}: dims {d}x{h}x{w} out of range")
    itemsize = 4 if code == DTYPE_F32 else 1
    body = raw[HEADER.size :]
    if len(body) != n * itemsize:
        raise PayloadLengthError(
            f"{path}: payload is {len(body)} bytes, header implies {n * itemsize}"
        )
    if code == DTYPE_F32:
        return Volume(np.frombuffer(body, dtype="<f4").reshape(d, h, w).astype(np.float32))
    ids = np.frombuffer(body, dtype=np.uint8).reshape(d, h, w).copy()
    if num_classes is None:
        num_classes = max(int(ids.max()), 2)
    return LabelVolume(ids, num_classes)


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    task: str = "brain"
    size: tuple[int, int, int] = (32, 32, 32)
    noise_sigma: float = NOISE_SIGMA
    seed: int = 0
    divisor: int = 2  # 2**depth of the network that will consume the volume

    @property
    def num_classes(self) -> int:
        return 2 if self.task == "brain" else 4

    def validate(self) -> None:
        if self.task not in ("brain", "tissue"):
            raise ValueError(f"task must be 'brain' or 'tissue', got {self.task!r}")
        if len(self.size) != 3 or any(int(s) < 4 for s in self.size):
            raise ValueError(f"size must be three dims >= 4, got {self.size}")
        if any(int(s) % self.divisor for s in self.size):
            raise ValueError(f"size {self.size} not divisible by {self.divisor}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Nested random ellipsoids with per-class intensities plus Gaussian noise.

    Brain task: one ellipsoid (class 1). Tissue task: outer shell (1), inner
    core (2) and an off-center ventricle (3) inside the core, sized so the
    foreground splits roughly 50/38/12 like GM/WM/CSF. Centers
    and radii are jittered by up to +-15% of their canonical values.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims = np.array(spec.size, dtype=float)
    grid = np.meshgrid(*(np.arange(n) + 0.5 for n in spec.size), indexing="ij")

    def jitter(values):
        return np.asarray(values) * (1.0 + rng.uniform(-JITTER, JITTER, size=3))

    center = jitter(dims * 0.5)
    radii = jitter(dims * 0.38)
    labels = np.zeros(spec.size, dtype=np.uint8)
    labels[_ellipsoid(grid, center, radii)] = 1
    if spec.task == "tissue":
        labels[_ellipsoid(grid, center, radii * 0.8)] = 2
        offset = radii * 0.1 * np.array([0.0, 1.0, 1.0])
        v_center = jitter(center + offset)
        v_radii = np.maximum(jitter(radii * 0.5), 1.0)
        labels[_ellipsoid(grid, v_center, v_radii)] = 3
    for c in range(spec.num_classes):
        if not np.any(labels == c):
            raise RuntimeError(f"phantom {spec} has no voxel of class {c}")

    means = np.asarray(CLASS_MEANS[: spec.num_classes], dtype=np.float64)
    img = means[labels] + rng.normal(0.0, spec.noise_sigma, size=spec.size)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Volume(img), LabelVolume(labels, spec.num_classes)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    task: str
    num_classes: int
    part_a: list[tuple[str, str]]  # (image, label) paths relative to the manifest
    part_b: list[tuple[str, str]]
    seed: int
    root: Path | None = None

    def to_json(self) -> str:
        doc = {
            "task": self.task,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "part_a": [list(p) for p in self.part_a],
            "part_b": [list(p) for p in self.part_b],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        man = cls(
            task=doc["task"],
            num_classes=int(doc["num_classes"]),
            part_a=[tuple(p) for p in doc["part_a"]],
            part_b=[tuple(p) for p in doc["part_b"]],
            seed=int(doc["seed"]),
            root=path.parent,
        )
        if check_files:
            for img, lab in man.part_a + man.part_b:
                for rel in (img, lab):
                    if not (man.root / rel).exists():
                        raise FileNotFoundError(f"manifest references missing file {rel}")
        return man

    def load(self, part: str) -> list[tuple[Volume, LabelVolume]]:
        pairs = self.part_a if part == "A" else self.part_b
        out = []
        dims = None
        for img, lab in pairs:
            vol = read_volume(self.root / img)
            labels = read_volume(self.root / lab, num_classes=self.num_classes)
            if vol.dims != labels.dims or (dims is not None and vol.dims != dims):
                raise ValueError(f"inconsistent dims in dataset at {img}")
            dims = vol.dims
            out.append((vol, labels))
        return out
