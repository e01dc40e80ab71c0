"""Procedural toy segmentation datasets.

Each foreground class owns one geometry (rectangle, disc, triangle, cycling
for K > 4) and one base colour; class 0 is background. A sample is a pure
function of ``(seed, id)`` so labeled, unlabeled and validation splits can be
regenerated anywhere without storing them.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

GEOMETRIES = ("rectangle", "disc", "triangle")
MAGIC = b"CMDS"
VERSION = 1
# Background first; foreground colours are chosen to stay distinguishable under noise.
PALETTE = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.80, 0.25, 0.25],
        [0.25, 0.70, 0.30],
        [0.30, 0.35, 0.85],
        [0.85, 0.80, 0.25],
        [0.75, 0.30, 0.80],
        [0.25, 0.80, 0.80],
        [0.95, 0.55, 0.15],
    ]
)


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_labeled: int = 4
    n_unlabeled: int = 256
    H: int = 32
    W: int = 32
    Cin: int = 3
    K: int = 4
    noise_std: float = 0.08
    shapes_min: int = 1
    shapes_max: int = 3
    stride: int = 4

    def validate(self) -> None:
        if self.n_labeled < 1:
            raise ConfigError(f"n_labeled must be >= 1, got {self.n_labeled}")
        if self.n_unlabeled < 0:
            raise ConfigError(f"n_unlabeled must be >= 0, got {self.n_unlabeled}")
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.K > len(PALETTE):
            raise ConfigError(f"K must be <= {len(PALETTE)}, got {self.K}")
        if self.Cin < 1:
            raise ConfigError(f"Cin must be >= 1, got {self.Cin}")
        if self.H < self.stride or self.W < self.stride or self.H % self.stride or self.W % self.stride:
            raise ConfigError(f"H and W must be positive multiples of {self.stride}, got {self.H}x{self.W}")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ConfigError(f"need 1 <= shapes_min <= shapes_max, got {self.shapes_min}..{self.shapes_max}")
        if not (self.noise_std >= 0 and np.isfinite(self.noise_std)):
            raise ConfigError(f"noise_std must be a finite non-negative number, got {self.noise_std}")


@dataclass
class Sample:
    image: np.ndarray  # Cin x H x W in [0, 1]
    label: np.ndarray | None  # H x W, None for unlabeled samples
    id: int
    # Ground truth kept for unlabeled samples; read only by metrics, never by the trainer's losses.
    eval_label: np.ndarray | None = field(default=None, repr=False)


# Shape half-extent as a fraction of the shorter image side.
SIZE_RANGE = (0.12, 0.28)


def class_color(k: int, cin: int) -> np.ndarray:
    rgb = PALETTE[k]
    if cin == 3:
        return rgb
    # Grey-level or many-channel inputs: tile the palette and use luminance for one channel.
    if cin == 1:
        return np.array([rgb @ np.array([0.299, 0.587, 0.114])])
    return np.resize(rgb, cin)


def geometry_of(k: int) -> str:
    return GEOMETRIES[(k - 1) % len(GEOMETRIES)]


def rasterize(geometry: str, H: int, W: int, cy: float, cx: float, size: float, angle: float = 0.0) -> np.ndarray:
    """Boolean membership mask of one shape, tested at pixel centres."""
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    if geometry == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    if geometry == "rectangle":
        return (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= 0.7 * size)
    if geometry == "triangle":
        verts = [(cy + size * np.sin(angle + t), cx + size * np.cos(angle + t)) for t in (0, 2 * np.pi / 3, 4 * np.pi / 3)]
        signs = []
        for (y0, x0), (y1, x1) in zip(verts, verts[1:] + verts[:1]):
            signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
        pos = np.all([s >= 0 for s in signs], axis=0)
        neg = np.all([s <= 0 for s in signs], axis=0)
        return pos | neg
    raise ValueError(f"unknown geometry {geometry!r}")


def make_sample(spec: DatasetSpec, sample_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(image, label)`` for one id; later shapes occlude earlier ones."""
    rng = np.random.default_rng([spec.seed, sample_id])
    H, W = spec.H, spec.W
    label = np.zeros((H, W), dtype=np.int64)
    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    lo = SIZE_RANGE[0] * min(H, W)
    hi = SIZE_RANGE[1] * min(H, W)
    for _ in range(n_shapes):
        k = int(rng.integers(1, spec.K))
        size = rng.uniform(lo, hi)
        cy = rng.uniform(0.15 * H, 0.85 * H)
        cx = rng.uniform(0.15 * W, 0.85 * W)
        angle = rng.uniform(0, 2 * np.pi)
        m = rasterize(geometry_of(k), H, W, cy, cx, size, angle)
        if not m.any():
            # Guarantee visibility: force the centre pixel.
            m[min(int(cy), H - 1), min(int(cx), W - 1)] = True
        label[m] = k
    colors = np.stack([class_color(k, spec.Cin) for k in range(spec.K)])  # K x Cin
    image = colors[label].transpose(2, 0, 1)
    image = image + spec.noise_std * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0), label


def generate(spec: DatasetSpec) -> tuple[list[Sample], list[Sample]]:
    spec.validate()
    labeled = []
    for i in range(spec.n_labeled):
        img, lab = make_sample(spec, i)
        labeled.append(Sample(img, lab, i))
    unlabeled = []
    for j in range(spec.n_unlabeled):
        i = spec.n_labeled + j
        img, lab = make_sample(spec, i)
        unlabeled.append(Sample(img, None, i, eval_label=lab))
    return labeled, unlabeled


def generate_val(spec: DatasetSpec, n_val: int) -> list[Sample]:
    """Held-out labeled split with ids after the training pool."""
    spec.validate()
    start = spec.n_labeled + spec.n_unlabeled
    out = []
    for i in range(start, start + n_val):
        img, lab = make_sample(spec, i)
        out.append(Sample(img, lab, i))
    return out


# ---------------------------------------------------------------- CMDS files

_INT_FIELDS = ("seed", "n_labeled", "n_unlabeled", "H", "W", "Cin", "K", "shapes_min", "shapes_max", "stride")


def dumps(spec: DatasetSpec, labeled: list[Sample], unlabeled: list[Sample]) -> bytes:
    """Serialize to the CMDS layout.

    Header: ``b"CMDS"``, version, the integer spec fields (little-endian
    int32) and noise_std (float64). Then, per sample (labeled first), the
    row-major float64 image followed by the uint8 label map; unlabeled
    samples store their evaluation-only ground truth.
    """
    parts = [MAGIC, struct.pack("<i", VERSION)]
    parts.append(struct.pack("<" + "i" * len(_INT_FIELDS), *(int(getattr(spec, f)) for f in _INT_FIELDS)))
    parts.append(struct.pack("<d", float(spec.noise_std)))
    for s in list(labeled) + list(unlabeled):
        lab = s.label if s.label is not None else s.eval_label
        parts.append(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(lab, dtype=np.uint8).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[DatasetSpec, list[Sample], list[Sample]]:
    if buf[:4] != MAGIC:
        raise ConfigError("not a CMDS dataset file (bad magic)")
    (version,) = struct.unpack_from("<i", buf, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported CMDS version {version}")
    off = 8
    ints = struct.unpack_from("<" + "i" * len(_INT_FIELDS), buf, off)
    off += 4 * len(_INT_FIELDS)
    (noise,) = struct.unpack_from("<d", buf, off)
    off += 8
    spec = DatasetSpec(**dict(zip(_INT_FIELDS, ints)), noise_std=noise)
    n_img = spec.Cin * spec.H * spec.W
    n_lab = spec.H * spec.W
    labeled, unlabeled = [], []
    for i in range(spec.n_labeled + spec.n_unlabeled):
        img = np.frombuffer(buf, dtype="<f8", count=n_img, offset=off).reshape(spec.Cin, spec.H, spec.W).astype(np.float64)
        off += 8 * n_img
        lab = np.frombuffer(buf, dtype=np.uint8, count=n_lab, offset=off).reshape(spec.H, spec.W).astype(np.int64)
        off += n_lab
        if i < spec.n_labeled:
            labeled.append(Sample(img, lab, i))
        else:
            unlabeled.append(Sample(img, None, i, eval_label=lab))
    if off != len(buf):
        raise ConfigError(f"CMDS file has {len(buf) - off} trailing bytes")
    return spec, labeled, unlabeled


def save(path, spec: DatasetSpec, labeled, unlabeled) -> None:
    Path(path).write_bytes(dumps(spec, labeled, unlabeled))


def load(path):
    return loads(Path(path).read_bytes())
