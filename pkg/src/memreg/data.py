"""Procedural "shapes-world" segmentation domains.

Scene geometry (which shapes, where, how big) depends only on ``(seed, index)``;
rendering style (palette, noise, texture, illumination) is a per-domain
setting. Two specs with the same seed but different styles therefore produce
identical label maps and different images.

Classes: 0 background, 1 circle, 2 square, 3 triangle, 4 bar.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from memreg.binio import Reader, Writer
from memreg.errors import FormatError
from memreg.rng import STREAM_CROP, STREAM_SHUFFLE, make_rng

CLASS_NAMES = ("background", "circle", "square", "triangle", "bar")

_GEOMETRY = 11
_STYLE = 12

# held-out scenes live far away from the training index range
EVAL_OFFSET = 1_000_000
VAL_OFFSET = 2_000_000


@dataclass(frozen=True)
class Style:
    """Rendering parameters of one domain.

    ``class_colors`` holds the base RGB of shape classes 1..4; every shape gets
    its class color plus per-channel jitter. ``hue_shift`` rotates all colors
    about the gray axis (degrees), ``contrast`` scales deviations from the
    image mean.
    """

    class_colors: tuple = ((0.85, 0.25, 0.2), (0.25, 0.75, 0.3), (0.25, 0.35, 0.85), (0.85, 0.8, 0.25))
    background: tuple = (0.2, 0.2, 0.22)
    color_jitter: float = 0.1
    hue_shift: float = 0.0
    noise_sigma: float = 0.03
    texture_freq: float = 0.0
    texture_amp: float = 0.0
    illumination: float = 0.0
    contrast: float = 1.0


SOURCE_STYLE = Style()
TARGET_STYLE = Style(
    background=(0.3, 0.3, 0.3),
    hue_shift=30.0,
    noise_sigma=0.08,
    illumination=0.2,
    contrast=0.7,
)


@dataclass(frozen=True)
class DomainSpec:
    seed: int = 0
    image_size: tuple = (64, 64)
    num_classes: int = 5
    style: Style = field(default_factory=Style)
    domain: str = "source"
    min_shapes: int = 2
    max_shapes: int = 5

    def __post_init__(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError(f"image size must be at least 16x16, got {h}x{w}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"shapes-world has exactly {len(CLASS_NAMES)} classes")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        style = Style(**{k: _tuplify(v) for k, v in d.pop("style").items()})
        d["image_size"] = tuple(d["image_size"])
        return cls(style=style, **d)


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def source_spec(seed: int = 0, **kw) -> DomainSpec:
    return DomainSpec(seed=seed, style=SOURCE_STYLE, domain="source", **kw)


def target_spec(seed: int = 1, **kw) -> DomainSpec:
    return DomainSpec(seed=seed, style=TARGET_STYLE, domain="target", **kw)


@dataclass
class SegSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    label: Optional[np.ndarray]  # uint8 [H, W] or None
    domain: str
    index: int = -1

    def unlabeled(self) -> "SegSample":
        return SegSample(self.image, None, self.domain, self.index)


# -- geometry --------------------------------------------------------------
def _shape_mask(kind: int, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, h: int, w: int):
    scale = min(h, w) / 64.0
    if kind == 1:  # circle
        r = rng.uniform(5.0, 10.0) * scale
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 2:  # axis-aligned square
        s = rng.uniform(5.0, 9.0) * scale  # half side
        cy, cx = rng.uniform(s, h - s), rng.uniform(s, w - s)
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    if kind == 3:  # triangle (equilateral, rotated)
        r = rng.uniform(7.0, 12.0) * scale  # circumradius
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        t0 = rng.uniform(0, 2 * np.pi)
        angles = t0 + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        vy, vx = cy + r * np.sin(angles), cx + r * np.cos(angles)
        inside = np.ones_like(yy, dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
            inside &= cross >= 0
        return inside
    if kind == 4:  # bar: long thin rotated rectangle
        half_len = rng.uniform(10.0, 18.0) * scale
        half_th = rng.uniform(1.5, 3.0) * scale
        cy, cx = rng.uniform(half_len, h - half_len), rng.uniform(half_len, w - half_len)
        t = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        return (np.abs(u) <= half_len) & (np.abs(v) <= half_th)
    raise ValueError(f"unknown shape class {kind}")


def _layout(spec: DomainSpec, index: int):
    """Shape classes, masks and the label map for scene ``index``."""
    h, w = spec.image_size
    rng = make_rng(spec.seed, _GEOMETRY, index)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    label = np.zeros((h, w), dtype=np.uint8)
    shapes = []
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(count):
        kind = int(rng.integers(1, spec.num_classes))
        mask = _shape_mask(kind, rng, yy, xx, h, w)
        if not mask.any():  # degenerate draw; skip rather than emit an empty shape
            continue
        label[mask] = kind
        shapes.append((kind, mask))
    return label, shapes, (yy, xx)


# -- rendering -------------------------------------------------------------
def _render(spec: DomainSpec, index: int, label, shapes, grid) -> np.ndarray:
    style = spec.style
    h, w = spec.image_size
    yy, xx = grid
    rng = make_rng(spec.seed, _STYLE, index)
    colors = np.asarray(style.class_colors, dtype=np.float64)
    bg = np.asarray(style.background, dtype=np.float64)
    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = (bg + rng.normal(0.0, style.color_jitter, 3))[:, None, None]
    for kind, mask in shapes:
        color = colors[kind - 1] + rng.normal(0.0, style.color_jitter, 3)
        img[:, mask] = color[:, None]
    if style.hue_shift:
        img = np.tensordot(hue_rotation(style.hue_shift), img, axes=1)
    mean = img.mean()
    img = mean + style.contrast * (img - mean)
    if style.texture_amp:
        phase = rng.uniform(0, 2 * np.pi)
        t = rng.uniform(0, np.pi)
        img += style.texture_amp * np.sin(style.texture_freq * (xx * np.cos(t) + yy * np.sin(t)) + phase)
    if style.illumination:
        t = rng.uniform(0, 2 * np.pi)
        ramp = ((xx - w / 2) * np.cos(t) + (yy - h / 2) * np.sin(t)) / max(h, w)
        img += style.illumination * ramp
    if style.noise_sigma:
        img += rng.normal(0.0, style.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def hue_rotation(degrees: float) -> np.ndarray:
    """3x3 rotation of RGB space about the gray diagonal."""
    t = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(t) * kx + (1 - np.cos(t)) * (kx @ kx)


def generate(spec: DomainSpec, index: int) -> SegSample:
    """Deterministic sample ``index`` of the domain, with its exact label map."""
    if index < 0:
        raise ValueError(f"sample index must be >= 0, got {index}")
    label, shapes, grid = _layout(spec, index)
    image = _render(spec, index, label, shapes, grid)
    return SegSample(image=image, label=label, domain=spec.domain, index=index)


def generate_eval(spec: DomainSpec, index: int) -> SegSample:
    """Labeled held-out sample, disjoint from the training index range."""
    return generate(spec, EVAL_OFFSET + index)


def generate_val(spec: DomainSpec, index: int) -> SegSample:
    """Labeled validation sample used for snapshot selection, disjoint from the eval split."""
    return generate(spec, VAL_OFFSET + index)


# -- batching --------------------------------------------------------------
@dataclass
class Batch:
    images: np.ndarray  # [N, 3, h, w]
    labels: Optional[np.ndarray]  # [N, h, w] uint8 or None
    indices: np.ndarray


def random_crop(image: np.ndarray, label, size: tuple, rng: np.random.Generator):
    _, h, w = image.shape
    ch, cw = size
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    img = image[:, y0 : y0 + ch, x0 : x0 + cw]
    lab = None if label is None else label[y0 : y0 + ch, x0 : x0 + cw]
    return img, lab, (y0, x0)


class BatchIterator:
    """Infinite seeded stream of batches over samples ``0..dataset_size-1``.

    Each epoch visits every index once, in an order drawn from
    ``(shuffle_seed, epoch)``; ``draws`` counts samples handed out so far.
    """

    def __init__(self, spec: DomainSpec, batch_size: int, shuffle_seed: int, dataset_size: int = 500,
                 crop: Optional[tuple] = None, labeled: bool = True, labels: Optional[np.ndarray] = None):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if dataset_size < 1:
            raise ValueError(f"dataset_size must be >= 1, got {dataset_size}")
        self.spec = spec
        self.batch_size = int(batch_size)
        self.shuffle_seed = int(shuffle_seed)
        self.dataset_size = int(dataset_size)
        self.crop = tuple(crop) if crop else None
        self.labeled = labeled
        # substitute label maps (pseudo labels), indexed by sample index
        self.labels = labels
        self.draws = 0
        self._cache: dict = {}
        self._epoch, self._perm = -1, None

    def _sample(self, index: int) -> SegSample:
        s = self._cache.get(index)
        if s is None:
            s = generate(self.spec, index)
            self._cache[index] = s
        return s

    def _order(self, epoch: int) -> np.ndarray:
        return make_rng(self.shuffle_seed, STREAM_SHUFFLE, epoch).permutation(self.dataset_size)

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        imgs, labs, idxs = [], [], []
        for _ in range(self.batch_size):
            epoch, pos = divmod(self.draws, self.dataset_size)
            if self._epoch != epoch:
                self._epoch, self._perm = epoch, self._order(epoch)
            index = int(self._perm[pos])
            sample = self._sample(index)
            label = sample.label if self.labels is None else self.labels[index]
            if not self.labeled:
                label = None
            image = sample.image
            if self.crop:
                rng = make_rng(self.shuffle_seed, STREAM_CROP, self.draws)
                image, label, _ = random_crop(image, label, self.crop, rng)
            imgs.append(image)
            labs.append(label)
            idxs.append(index)
            self.draws += 1
        labels = None if labs[0] is None else np.stack(labs)
        return Batch(np.stack(imgs), labels, np.asarray(idxs))


def batch_iter(spec: DomainSpec, batch_size: int, shuffle_seed: int, **kw) -> BatchIterator:
    return BatchIterator(spec, batch_size, shuffle_seed, **kw)


# -- dataset container -----------------------------------------------------
#
# Byte layout (little-endian throughout):
#
#   8 bytes   magic b"MEMREGDS"
#   u32       format version (DATASET_VERSION)
#   u32 + n   DomainSpec as JSON (UTF-8, sorted keys)
#   u32       sample count, then per sample:
#               u64       sample index
#               u16, u16  H, W
#               u8        1 if a label map follows, else 0
#               3*H*W     float32 image values, C order [3, H, W]
#               H*W       uint8 labels (only if flagged)
#   u32       CRC-32 of every preceding byte

DATASET_MAGIC = b"MEMREGDS"
DATASET_VERSION = 1


def dataset_bytes(spec: DomainSpec, samples) -> bytes:
    w = Writer()
    w.raw(DATASET_MAGIC)
    w.pack("I", DATASET_VERSION)
    w.text(json.dumps(spec.to_dict(), sort_keys=True))
    samples = list(samples)
    w.pack("I", len(samples))
    for s in samples:
        _, h, wd = s.image.shape
        w.pack("QHHB", s.index, h, wd, 0 if s.label is None else 1)
        w.raw(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        if s.label is not None:
            w.raw(np.ascontiguousarray(s.label, dtype=np.uint8).tobytes())
    return w.finish()


def export_dataset(spec: DomainSpec, count: int, path, eval_split: bool = False) -> Path:
    """Write samples ``0..count-1`` (or their held-out counterparts) to ``path``."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    make = generate_eval if eval_split else generate
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dataset_bytes(spec, (make(spec, i) for i in range(count))))
    os.replace(tmp, path)
    return path


def dataset_from_bytes(buf: bytes) -> tuple[DomainSpec, list]:
    r = Reader(buf)
    r.expect_magic(DATASET_MAGIC, "dataset container")
    r.expect_version(DATASET_VERSION, "dataset container")
    r.verify_checksum()
    at = r.pos
    try:
        spec = DomainSpec.from_dict(json.loads(r.text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed spec echo: {exc}", at) from exc
    (count,) = r.unpack("I")
    samples = []
    for _ in range(count):
        at = r.pos
        index, h, w, has_label = r.unpack("QHHB")
        if has_label not in (0, 1):
            raise FormatError(f"bad label flag {has_label}", at)
        image = np.frombuffer(r.take(12 * h * w), dtype="<f4").reshape(3, h, w).astype(np.float32)
        label = None
        if has_label:
            label = np.frombuffer(r.take(h * w), dtype=np.uint8).reshape(h, w).copy()
        samples.append(SegSample(image=image, label=label, domain=spec.domain, index=int(index)))
    r.done()
    return spec, samples


def import_dataset(path) -> tuple[DomainSpec, list]:
    return dataset_from_bytes(Path(path).read_bytes())
