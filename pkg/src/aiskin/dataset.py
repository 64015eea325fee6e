"""Synthetic skin-image generator, stratified splitting and the "AISD" dataset file.

Images are rendered from a :class:`Scene` description (tone, noise seed and a
list of overlays in resolution-independent coordinates), so the same scene can
be re-rendered bit-identically or at a different resolution.

Dataset file layout (little-endian)::

    magic "AISD" | format u16 | count u32
    | per sample: sample_id u64, width u16, height u16, skin_color u8,
      has_label u8, disease_type u8, positive u8, pixels (w*h*3 bytes)
    | CRC32 of everything after the magic
"""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    DISEASE_TYPES,
    SKIN_COLORS,
    DiagnosisLabel,
    DiseaseType,
    ImageSample,
    SkinColorClass,
)
from .errors import ConfigurationError, CorruptionError, DatasetError

DEFAULT_PALETTE = {
    SkinColorClass.LIGHT: (232, 204, 184),
    SkinColorClass.YELLOWISH: (196, 152, 104),
    SkinColorClass.DARK: (112, 78, 58),
}

ACNE = "acne"
SPOT = "spot"
BLACKHEAD = "blackhead"
DARK_CIRCLE = "dark_circle"
OVERLAY_FOR = {
    DiseaseType.ACNES: ACNE,
    DiseaseType.SPOTS: SPOT,
    DiseaseType.BLACKHEADS: BLACKHEAD,
    DiseaseType.DARK_CIRCLES: DARK_CIRCLE,
}
SUPERSAMPLE = 4


@dataclass(frozen=True)
class OverlayParams:
    """Count and size ranges for one overlay kind; sizes are fractions of the image side."""

    count: tuple
    radius: tuple


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    samples_per_class: int = 100
    width: int = 32
    height: int = 32
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    tone_jitter: float = 6.0
    noise_sigma: float = 6.0
    acne: OverlayParams = OverlayParams((3, 8), (0.035, 0.055))
    spot: OverlayParams = OverlayParams((2, 5), (0.07, 0.11))
    blackhead: OverlayParams = OverlayParams((15, 40), (0.012, 0.02))
    dark_circle: OverlayParams = OverlayParams((2, 2), (0.10, 0.14))

    def __post_init__(self):
        if self.samples_per_class <= 0:
            raise ConfigurationError("samples_per_class must be positive")
        if self.width < 8 or self.height < 8:
            raise ConfigurationError("images must be at least 8x8")
        if set(self.palette) != set(SKIN_COLORS):
            raise ConfigurationError("palette needs exactly one tone per skin-color class")


@dataclass(frozen=True)
class Overlay:
    kind: str
    cx: float
    cy: float
    radius: float
    aspect: float = 1.0
    thickness: float = 0.0


@dataclass(frozen=True)
class Scene:
    sample_id: int
    skin_color: SkinColorClass
    tone: tuple
    noise_seed: int
    overlays: tuple = ()
    label: Optional[DiagnosisLabel] = None


# -- rendering -------------------------------------------------------------------


def _overlay_color(kind: str, tone: np.ndarray) -> np.ndarray:
    if kind == ACNE:
        return tone * np.array([0.75, 0.35, 0.35]) + np.array([30.0, 0.0, 0.0])
    if kind == SPOT:
        return tone * np.array([0.68, 0.58, 0.46])
    if kind == BLACKHEAD:
        return tone * 0.15
    return tone * np.array([0.50, 0.45, 0.58])


def _coverage(ov: Overlay, width: int, height: int):
    """Supersampled coverage of one overlay: returns (row slice, col slice, alpha)."""
    reach = ov.radius * max(1.0, ov.aspect) + ov.thickness
    x0 = max(0, int(np.floor((ov.cx - reach) * width)))
    x1 = min(width, int(np.ceil((ov.cx + reach) * width)) + 1)
    y0 = max(0, int(np.floor((ov.cy - reach) * height)))
    y1 = min(height, int(np.ceil((ov.cy + reach) * height)) + 1)
    if x0 >= x1 or y0 >= y1:
        return None
    ss = SUPERSAMPLE
    u = (np.arange(x0 * ss, x1 * ss) + 0.5) / (width * ss)
    v = (np.arange(y0 * ss, y1 * ss) + 0.5) / (height * ss)
    du = (u[None, :] - ov.cx) / ov.aspect
    dv = v[:, None] - ov.cy
    dist = np.sqrt(du * du + dv * dv)
    if ov.kind == DARK_CIRCLE:
        inside = (np.abs(dist - ov.radius) <= ov.thickness / 2) & (dv >= 0)
    else:
        inside = dist <= ov.radius
    alpha = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    return slice(y0, y1), slice(x0, x1), alpha


def render(scene: Scene, width: int, height: int, noise_sigma: float = 6.0) -> np.ndarray:
    """Deterministic HxWx3 uint8 rendering of ``scene`` at the given resolution."""
    tone = np.asarray(scene.tone, dtype=np.float64)
    img = np.broadcast_to(tone, (height, width, 3)).copy()
    for ov in scene.overlays:
        cov = _coverage(ov, width, height)
        if cov is None:
            continue
        rows, cols, alpha = cov
        color = _overlay_color(ov.kind, tone)
        img[rows, cols] = img[rows, cols] * (1 - alpha[..., None]) + color * alpha[..., None]
    if noise_sigma > 0:
        img += np.random.default_rng(scene.noise_seed).normal(0.0, noise_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_sample(scene: Scene, width: int, height: int, noise_sigma: float) -> ImageSample:
    pixels = render(scene, width, height, noise_sigma)
    return ImageSample.from_array(pixels, scene.sample_id, scene.skin_color, scene.label)


# -- scene generation ------------------------------------------------------------


def derive_id(*parts) -> int:
    blob = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def _overlays(kind: str, params: OverlayParams, rng: np.random.Generator) -> list:
    lo, hi = params.count
    n = int(rng.integers(lo, hi + 1))
    out = []
    if kind == DARK_CIRCLE:
        cy = rng.uniform(0.28, 0.38)
        for side in (0.3, 0.7):
            out.append(Overlay(
                kind, cx=side + rng.uniform(-0.04, 0.04), cy=cy + rng.uniform(-0.02, 0.02),
                radius=rng.uniform(*params.radius), thickness=rng.uniform(0.035, 0.05),
            ))
        return out
    for _ in range(n):
        out.append(Overlay(
            kind,
            cx=rng.uniform(0.12, 0.88), cy=rng.uniform(0.12, 0.88),
            radius=rng.uniform(*params.radius),
            aspect=rng.uniform(0.7, 1.4) if kind == SPOT else 1.0,
        ))
    return out


def make_scene(config: GeneratorConfig, rng: np.random.Generator, sample_id: int,
               overlay_kind: Optional[str], label: Optional[DiagnosisLabel]) -> Scene:
    color = SKIN_COLORS[int(rng.integers(len(SKIN_COLORS)))]
    base = np.asarray(config.palette[color], dtype=np.float64)
    tone = tuple(float(c) for c in base + rng.uniform(-config.tone_jitter, config.tone_jitter, 3))
    overlays = ()
    if overlay_kind is not None:
        overlays = tuple(_overlays(overlay_kind, getattr(config, overlay_kind), rng))
    noise_seed = int(rng.integers(2**63))
    return Scene(sample_id, color, tone, noise_seed, overlays, label)


def generate_scenes(config: GeneratorConfig, disease_type: DiseaseType, tag: str = "labeled") -> list:
    """``samples_per_class`` positive and as many negative scenes, interleaved by seed."""
    disease_type = DiseaseType(disease_type)
    rng = np.random.default_rng([config.seed, int(disease_type), zlib.crc32(tag.encode())])
    scenes = []
    for i in range(2 * config.samples_per_class):
        positive = i % 2 == 0
        sid = derive_id(config.seed, tag, disease_type.slug, i)
        label = DiagnosisLabel(disease_type, positive)
        if disease_type is DiseaseType.CLEAN_FACE:
            kind = None if positive else OVERLAY_FOR[DISEASE_TYPES[int(rng.integers(4))]]
        elif positive:
            kind = OVERLAY_FOR[disease_type]
        else:
            # half the negatives show a different condition so the model keys on its own
            others = [d for d in DISEASE_TYPES[:4] if d is not disease_type]
            kind = OVERLAY_FOR[others[int(rng.integers(3))]] if rng.random() < 0.5 else None
        scenes.append(make_scene(config, rng, sid, kind, label))
    order = rng.permutation(len(scenes))
    return [scenes[k] for k in order]


def generate(config: GeneratorConfig, disease_type: DiseaseType, tag: str = "labeled",
             width: Optional[int] = None, height: Optional[int] = None) -> list:
    """Labeled samples for one binary task; deterministic given ``config.seed`` and ``tag``."""
    width = width or config.width
    height = height or config.height
    return [render_sample(s, width, height, config.noise_sigma)
            for s in generate_scenes(config, disease_type, tag)]


def generate_face(config: GeneratorConfig, conditions: Iterable[DiseaseType] = (),
                  index: int = 0, tag: str = "face") -> Scene:
    """A single scene carrying the overlays of every listed condition (none = clean face)."""
    rng = np.random.default_rng([config.seed, index, zlib.crc32(tag.encode())])
    scene = make_scene(config, rng, derive_id(config.seed, tag, index), None, None)
    overlays = []
    for disease in conditions:
        kind = OVERLAY_FOR[DiseaseType(disease)]
        overlays += _overlays(kind, getattr(config, kind), rng)
    return Scene(scene.sample_id, scene.skin_color, scene.tone, scene.noise_seed, tuple(overlays))


# -- splitting -------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    test: list
    split_ratio: float


def split(samples: Sequence[ImageSample], ratio: float = 0.85, seed: int = 0) -> DatasetSplit:
    """Stratified shuffle: each label class is split separately at ``ratio``."""
    if len(samples) < 20:
        raise DatasetError(f"need at least 20 samples to split, got {len(samples)}")
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"ratio {ratio} outside (0, 1)")
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for s in samples:
        key = None if s.truth_label is None else s.truth_label.positive
        groups.setdefault(key, []).append(s)
    train, test = [], []
    for key in sorted(groups, key=lambda k: (k is None, k)):
        group = groups[key]
        order = rng.permutation(len(group))
        cut = int(round(ratio * len(group)))
        train += [group[k] for k in order[:cut]]
        test += [group[k] for k in order[cut:]]
    return DatasetSplit(train, test, ratio)


def class_ratio(samples: Sequence[ImageSample]) -> float:
    pos = sum(1 for s in samples if s.truth_label is not None and s.truth_label.positive)
    neg = sum(1 for s in samples if s.truth_label is not None and not s.truth_label.positive)
    return pos / neg if neg else float("inf")


# -- persistence -----------------------------------------------------------------

MAGIC = b"AISD"
FORMAT_VERSION = 1
_RECORD = struct.Struct("<QHHBBBB")


def encode_sample(sample: ImageSample) -> bytes:
    label = sample.truth_label
    return _RECORD.pack(
        sample.sample_id, sample.width, sample.height, int(sample.skin_color),
        0 if label is None else 1,
        0 if label is None else int(label.disease_type),
        0 if label is None else int(label.positive),
    ) + sample.pixels


def decode_sample(buf: bytes, offset: int = 0):
    """Parse one sample record at ``offset``; returns (sample, next offset)."""
    if offset + _RECORD.size > len(buf):
        raise CorruptionError("sample record truncated")
    sid, w, h, color, has_label, disease, positive = _RECORD.unpack_from(buf, offset)
    offset += _RECORD.size
    n = w * h * 3
    if offset + n > len(buf):
        raise CorruptionError("sample pixels truncated")
    if color >= len(SKIN_COLORS):
        raise CorruptionError(f"unknown skin-color class {color}")
    label = None
    if has_label:
        if disease >= len(DISEASE_TYPES):
            raise CorruptionError(f"unknown disease type {disease}")
        label = DiagnosisLabel(DiseaseType(disease), bool(positive))
    try:
        sample = ImageSample(bytes(buf[offset:offset + n]), w, h, sid, SkinColorClass(color), label)
    except ValueError as exc:
        raise CorruptionError(str(exc)) from None
    return sample, offset + n


def encode_dataset(samples: Sequence[ImageSample]) -> bytes:
    body = bytearray(struct.pack("<HI", FORMAT_VERSION, len(samples)))
    for s in samples:
        body += encode_sample(s)
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_dataset(data: bytes) -> list:
    if len(data) < 4 + 6 + 4:
        raise CorruptionError("dataset file truncated")
    if data[:4] != MAGIC:
        raise CorruptionError(f"bad magic {bytes(data[:4])!r}")
    body = data[4:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("dataset checksum mismatch")
    fmt, count = struct.unpack_from("<HI", body, 0)
    if fmt != FORMAT_VERSION:
        raise CorruptionError(f"unsupported dataset format {fmt}")
    pos = 6
    samples = []
    for _ in range(count):
        sample, pos = decode_sample(body, pos)
        samples.append(sample)
    if pos != len(body):
        raise CorruptionError(f"{len(body) - pos} trailing bytes in dataset")
    return samples


def save_dataset(path, samples: Sequence[ImageSample]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_dataset(samples))
    os.replace(tmp, path)


def load_dataset(path) -> list:
    return decode_dataset(Path(path).read_bytes())


def to_arrays(samples: Sequence[ImageSample], height: int = 32, width: int = 32):
    """Network inputs and integer labels (1 = positive) for labeled samples."""
    from .imaging import batch_from_samples

    x = batch_from_samples(samples, height, width)
    y = np.array([int(s.truth_label.positive) for s in samples], dtype=np.int64)
    return x, y
