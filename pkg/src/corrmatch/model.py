"""Tiny stride-4 segmentation network with a correlation feature extractor.

Encoder: two stride-2 3x3 convs (Cin -> hidden -> D) with ReLU. Decoder: a
1x1 classifier on the encoder output, bilinearly upsampled x4. Extractor:
3x3 conv, per-sample per-channel spatial normalization, affine, ReLU. The
correlation projections W1/W2 are D x D matrices applied to the flattened
extracted features.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

STRIDE = 4
CKPT_MAGIC = b"CMPT"
CKPT_VERSION = 1


@dataclass
class ModelParams:
    tensors: dict[str, Tensor]
    D: int
    K: int

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}, self.D, self.K)

    def frozen(self) -> "ModelParams":
        """View sharing storage but building no graph (evaluation-only forwards)."""
        return ModelParams({k: Tensor(v.data) for k, v in self.tensors.items()}, self.D, self.K)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class ForwardOutput:
    logits: Tensor  # [N x] K x H x W
    encoder_feature: Tensor  # [N x] D x H/4 x W/4
    extracted: Tensor  # [N x] D x (H/4 * W/4)


def init(seed: int, Cin: int, D: int, K: int, hidden: int = 16) -> ModelParams:
    if D < 1 or K < 1 or Cin < 1 or hidden < 1:
        raise ConfigError(f"model dimensions must be >= 1 (Cin={Cin}, D={D}, K={K}, hidden={hidden})")
    rng = np.random.default_rng(seed)

    def kaiming(cout, cin, k):
        return rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))

    arrays = {
        "enc1_w": kaiming(hidden, Cin, 3),
        "enc1_b": np.zeros(hidden),
        "enc2_w": kaiming(D, hidden, 3),
        "enc2_b": np.zeros(D),
        "ext_w": kaiming(D, D, 3),
        "ext_gamma": np.ones(D),
        "ext_beta": np.zeros(D),
        "W1": np.eye(D) + 0.01 * rng.standard_normal((D, D)),
        "W2": np.eye(D) + 0.01 * rng.standard_normal((D, D)),
        "cls_w": kaiming(K, D, 1),
        "cls_b": np.zeros(K),
    }
    return ModelParams({k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, D, K)


def encode(params: ModelParams, image: Tensor) -> Tensor:
    h, w = image.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ConfigError(f"spatial size {h}x{w} is not divisible by {STRIDE}")
    x = T.relu(T.conv2d(image, params["enc1_w"], params["enc1_b"], stride=2, padding=1))
    return T.relu(T.conv2d(x, params["enc2_w"], params["enc2_b"], stride=2, padding=1))


def decode(params: ModelParams, feature: Tensor, out_h: int, out_w: int) -> Tensor:
    coarse = T.conv2d(feature, params["cls_w"], params["cls_b"])
    return T.bilinear_resize(coarse, out_h, out_w)


def extract(params: ModelParams, feature: Tensor) -> Tensor:
    """Flattened extractor features ``[N x] D x (h*w)``."""
    x = T.conv2d(feature, params["ext_w"], None, stride=1, padding=1)
    x = T.relu(T.channel_affine(T.instance_norm(x), params["ext_gamma"], params["ext_beta"]))
    shape = x.shape
    return T.reshape(x, shape[:-2] + (shape[-2] * shape[-1],))


def dropout_mask(rng: np.random.Generator, n: int | None, D: int, p: float = 0.5) -> np.ndarray:
    """Inverted channel-dropout multipliers (0 or 1/(1-p)) shaped to broadcast over h x w."""
    shape = (D,) if n is None else (n, D)
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).reshape(shape + (1, 1))


def forward(params: ModelParams, image, perturb_features: bool = False, rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> ForwardOutput:
    """Run the network on ``Cin x H x W`` or ``N x Cin x H x W`` input.

    With ``perturb_features`` the encoder output is channel-dropped (each
    channel kept with probability 0.5 and scaled by 2) before both heads. An
    explicit ``mask`` overrides sampling from ``rng``.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    feat = encode(params, x)
    if perturb_features:
        if mask is None:
            if rng is None:
                raise ValueError("perturb_features needs an rng or an explicit mask")
            n = feat.shape[0] if feat.ndim == 4 else None
            mask = dropout_mask(rng, n, params.D)
        feat = T.mul_const(feat, mask)
    h, w = x.shape[-2:]
    return ForwardOutput(decode(params, feat, h, w), feat, extract(params, feat))


def predict(params: ModelParams, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Argmax label maps for ``N x Cin x H x W`` images."""
    out = []
    for i in range(0, len(images), batch):
        feat = encode(params, Tensor(images[i : i + batch]))
        logits = decode(params, feat, images.shape[-2], images.shape[-1])
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


# ---------------------------------------------------------------- checkpoints

def dumps(params: ModelParams) -> bytes:
    """CMPT: magic, version, count, then per tensor (name length, name, rank, dims, float64 data)."""
    parts = [CKPT_MAGIC, struct.pack("<ii", CKPT_VERSION, len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.data.ndim) + struct.pack("<" + "I" * t.data.ndim, *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> ModelParams:
    if buf[:4] != CKPT_MAGIC:
        raise ConfigError("not a CMPT checkpoint (bad magic)")
    version, count = struct.unpack_from("<ii", buf, 4)
    if version != CKPT_VERSION:
        raise ConfigError(f"unsupported CMPT version {version}")
    off = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from("<" + "I" * rank, buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 8 * size
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors, tensors["W1"].shape[0], tensors["cls_b"].shape[0])


def save_checkpoint(path, params: ModelParams) -> None:
    Path(path).write_bytes(dumps(params))


def load_checkpoint(path) -> ModelParams:
    return loads(Path(path).read_bytes())
