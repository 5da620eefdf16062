"""Segmentation network with two classifier heads, and patch discriminators."""

from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from memreg import functional as F
from memreg.binio import Reader, Writer
from memreg.errors import FormatError, ShapeError
from memreg.rng import STREAM_DISC_INIT, STREAM_INIT, make_rng
from memreg.tensor import Tensor, as_tensor


def _he_conv(rng, out_ch, in_ch, k, dtype=np.float32):
    std = np.sqrt(2.0 / (in_ch * k * k))
    return Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(dtype), requires_grad=True)


def _zeros(n, dtype=np.float32):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


class Module:
    """Minimal parameter container: ``self.params`` maps names to leaf tensors."""

    params: "OrderedDict[str, Tensor]"

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        """Cast parameters in place (used for 64-bit gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict):
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            src = arrays[name]
            if src.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: expected shape {p.shape}, got {src.shape}")
            p.data = np.array(src, dtype=p.dtype, copy=True)


def _as_batch(image) -> tuple[Tensor, bool]:
    image = as_tensor(image)
    if image.ndim == 3:
        return image.reshape((1,) + image.shape), True
    if image.ndim != 4:
        raise ShapeError(f"expected an image [3, H, W] or batch [N, 3, H, W], got {image.shape}")
    return image, False


class SegModel(Module):
    """Four conv blocks; the auxiliary head taps block 3, the primary head block 4.

    Blocks 1-2 are stride 2, so both heads work at 1/4 resolution and are
    upsampled (nearest) back to the input size before the softmax.
    """

    def __init__(self, num_classes: int = 5, channels=(16, 32, 64, 64), strides=(2, 2, 1, 1),
                 kernels=(3, 3, 3, 3), dropout: float = 0.1, in_channels: int = 3, seed: int = 0):
        if len(channels) != 4 or len(strides) != 4 or len(kernels) != 4:
            raise ValueError("SegModel expects exactly four encoder blocks")
        self.num_classes = int(num_classes)
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.kernels = tuple(int(k) for k in kernels)
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError(f"kernel sizes must be odd, got {self.kernels}")
        self.dropout = float(dropout)
        self.in_channels = int(in_channels)
        self.total_stride = int(np.prod(self.strides))
        rng = make_rng(seed, STREAM_INIT)
        self.params = OrderedDict()
        prev = self.in_channels
        for i, (ch, k) in enumerate(zip(self.channels, self.kernels), start=1):
            self.params[f"enc{i}.weight"] = _he_conv(rng, ch, prev, k)
            self.params[f"enc{i}.bias"] = _zeros(ch)
            prev = ch
        self.params["aux.weight"] = _he_conv(rng, self.num_classes, self.channels[2], 1)
        self.params["aux.bias"] = _zeros(self.num_classes)
        self.params["primary.weight"] = _he_conv(rng, self.num_classes, self.channels[3], 1)
        self.params["primary.bias"] = _zeros(self.num_classes)
        for name, p in self.params.items():
            p.name = name

    def config(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "channels": self.channels,
            "strides": self.strides,
            "kernels": self.kernels,
            "dropout": self.dropout,
            "in_channels": self.in_channels,
        }

    def logits(self, image, train: bool = False, rng: np.random.Generator | None = None):
        """Return ``(aux_logits, primary_logits)`` at input resolution, batched."""
        x, _ = _as_batch(image)
        h, w = x.shape[2:]
        if h % self.total_stride or w % self.total_stride:
            raise ShapeError(
                f"image size {h}x{w} is not divisible by the encoder stride {self.total_stride}"
            )
        p = self.params
        feats = []
        for i, (s, k) in enumerate(zip(self.strides, self.kernels), start=1):
            x = F.relu(F.conv2d(x, p[f"enc{i}.weight"], p[f"enc{i}.bias"], stride=s, padding=k // 2))
            feats.append(x)
        aux = F.dropout(feats[2], self.dropout, train, rng)
        aux = F.conv2d(aux, p["aux.weight"], p["aux.bias"])
        primary = F.dropout(feats[3], self.dropout, train, rng)
        primary = F.conv2d(primary, p["primary.weight"], p["primary.bias"])
        return (F.upsample_nearest(aux, self.total_stride),
                F.upsample_nearest(primary, self.total_stride))

    def __call__(self, image, train: bool = False, rng=None):
        return seg_forward(self, image, train, rng)


def seg_forward(model: SegModel, image, train_flag: bool = False, rng=None):
    """Per-pixel class distributions ``(p_aux, p_primary)``.

    A single ``[3, H, W]`` image gives ``[C, H, W]`` outputs; a batch gives
    ``[N, C, H, W]``.
    """
    _, single = _as_batch(image)
    aux, primary = model.logits(image, train_flag, rng)
    p_aux, p_primary = F.softmax(aux, axis=1), F.softmax(primary, axis=1)
    if single:
        p_aux = p_aux.reshape(p_aux.shape[1:])
        p_primary = p_primary.reshape(p_primary.shape[1:])
    return p_aux, p_primary


class Discriminator(Module):
    """Fully-convolutional patch discriminator over class-probability maps.

    A shared trunk downsamples by 4; one sigmoid head scores patches there and,
    with ``scales=2``, a further stride-2 block feeds a second head at stride 8.
    """

    def __init__(self, num_classes: int = 5, width: int = 16, scales: int = 2,
                 slope: float = 0.2, seed: int = 0, stream: int = 0):
        if scales not in (1, 2):
            raise ValueError(f"scales must be 1 or 2, got {scales}")
        self.num_classes = int(num_classes)
        self.width = int(width)
        self.scale_count = int(scales)
        self.slope = float(slope)
        rng = make_rng(seed, STREAM_DISC_INIT, stream)
        w = self.width
        self.params = OrderedDict()
        self.params["conv1.weight"] = _he_conv(rng, w, self.num_classes, 3)
        self.params["conv1.bias"] = _zeros(w)
        self.params["conv2.weight"] = _he_conv(rng, 2 * w, w, 3)
        self.params["conv2.bias"] = _zeros(2 * w)
        self.params["head1.weight"] = _he_conv(rng, 1, 2 * w, 3)
        self.params["head1.bias"] = _zeros(1)
        if self.scale_count == 2:
            self.params["conv3.weight"] = _he_conv(rng, 2 * w, 2 * w, 3)
            self.params["conv3.bias"] = _zeros(2 * w)
            self.params["head2.weight"] = _he_conv(rng, 1, 2 * w, 3)
            self.params["head2.bias"] = _zeros(1)
        for name, p in self.params.items():
            p.name = name

    @property
    def strides(self) -> tuple:
        return (4, 8)[: self.scale_count]

    def config(self) -> dict:
        return {"num_classes": self.num_classes, "width": self.width,
                "scales": self.scale_count, "slope": self.slope}

    def __call__(self, prob_map):
        return disc_forward(self, prob_map)


def disc_forward(d: Discriminator, prob_map) -> list:
    """Patch realness scores in (0, 1), one map per configured scale."""
    x, single = _as_batch(prob_map)
    if x.shape[1] != d.num_classes:
        raise ShapeError(f"discriminator expects {d.num_classes} channels, got {x.shape[1]}")
    p = d.params
    h = F.leaky_relu(F.conv2d(x, p["conv1.weight"], p["conv1.bias"], stride=2, padding=1), d.slope)
    h = F.leaky_relu(F.conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=2, padding=1), d.slope)
    scores = [F.sigmoid(F.conv2d(h, p["head1.weight"], p["head1.bias"], padding=1))]
    if d.scale_count == 2:
        h = F.leaky_relu(F.conv2d(h, p["conv3.weight"], p["conv3.bias"], stride=2, padding=1), d.slope)
        scores.append(F.sigmoid(F.conv2d(h, p["head2.weight"], p["head2.bias"], padding=1)))
    if single:
        scores = [s.reshape(s.shape[1:]) for s in scores]
    return scores


# -- checkpoints -------------------------------------------------------------
#
# Byte layout (little-endian throughout):
#
#   8 bytes   magic b"MEMREGCK"
#   u32       format version (CHECKPOINT_VERSION)
#   32 bytes  SHA-256 of the config JSON below
#   u32 + n   config JSON (UTF-8): architecture of every network plus run metadata
#   u64       iteration counter
#   u32       number of array records, then per record:
#               u16 + n   name (UTF-8), e.g. "seg/enc1.weight" or "optim/seg/velocity.0"
#               u8        dtype code (1 f32, 2 f64, 3 i64, 4 u8)
#               u8        ndim, then ndim x u32 extents
#               raw       values, C order
#   u32       CRC-32 of every preceding byte

CHECKPOINT_MAGIC = b"MEMREGCK"
CHECKPOINT_VERSION = 1

_NETS = ("seg", "disc_primary", "disc_aux")


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class ModelCheckpoint:
    """Everything needed to resume or evaluate a run.

    ``optim_state`` maps an optimizer name (``"seg"``, ``"disc"``) to that
    optimizer's ``state_dict()``. ``meta`` holds JSON-serializable run details.
    """

    model: SegModel
    disc_primary: Optional[Discriminator] = None
    disc_aux: Optional[Discriminator] = None
    optim_state: dict = field(default_factory=dict)
    iteration: int = 0
    meta: dict = field(default_factory=dict)

    def networks(self) -> dict:
        nets = {"seg": self.model, "disc_primary": self.disc_primary, "disc_aux": self.disc_aux}
        return {k: v for k, v in nets.items() if v is not None}

    def config(self) -> dict:
        return {"networks": {k: _jsonable(v.config()) for k, v in self.networks().items()},
                "meta": self.meta}

    @property
    def config_hash(self) -> str:
        return config_hash(self.config())


def _jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    cfg = ckpt.config()
    cfg_text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    records = []
    for net_name, net in ckpt.networks().items():
        for pname, p in net.named_parameters():
            records.append((f"{net_name}/{pname}", p.data))
    for opt_name in sorted(ckpt.optim_state):
        for key, arr in ckpt.optim_state[opt_name].items():
            records.append((f"optim/{opt_name}/{key}", np.asarray(arr)))
    w = Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.pack("I", CHECKPOINT_VERSION)
    w.raw(hashlib.sha256(cfg_text.encode("utf-8")).digest())
    w.text(cfg_text)
    w.pack("Q", int(ckpt.iteration))
    w.pack("I", len(records))
    for name, arr in records:
        w.text(name, "H")
        w.array(arr)
    return w.finish()


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    """Write atomically: a temporary sibling file is renamed into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    return path


def checkpoint_from_bytes(buf: bytes) -> ModelCheckpoint:
    r = Reader(buf)
    r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")
    r.expect_version(CHECKPOINT_VERSION, "checkpoint")
    r.verify_checksum()
    digest = bytes(r.take(32))
    at = r.pos
    cfg_text = r.text()
    if hashlib.sha256(cfg_text.encode("utf-8")).digest() != digest:
        raise FormatError("config hash does not match config block", at)
    try:
        cfg = json.loads(cfg_text)
        nets_cfg = cfg["networks"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"malformed config block: {exc}", at) from exc
    (iteration,) = r.unpack("Q")
    (count,) = r.unpack("I")
    arrays = {}
    for _ in range(count):
        at = r.pos
        name = r.text("H")
        if name in arrays:
            raise FormatError(f"duplicate record {name!r}", at)
        arrays[name] = r.array()
    r.done()

    # everything is decoded; only now build objects so failure leaves nothing half-loaded
    nets = {}
    for net_name, net_cfg in nets_cfg.items():
        if net_name not in _NETS:
            raise FormatError(f"unknown network {net_name!r} in config", 0)
        cls = SegModel if net_name == "seg" else Discriminator
        try:
            net = cls(**net_cfg)
            prefix = net_name + "/"
            net.load_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        except (TypeError, ValueError, KeyError) as exc:
            raise FormatError(f"cannot rebuild {net_name}: {exc}", 0) from exc
        nets[net_name] = net
    if "seg" not in nets:
        raise FormatError("checkpoint holds no segmentation model", 0)
    optim = {}
    for name, arr in arrays.items():
        if name.startswith("optim/"):
            _, opt_name, key = name.split("/", 2)
            optim.setdefault(opt_name, {})[key] = arr
    return ModelCheckpoint(model=nets["seg"], disc_primary=nets.get("disc_primary"),
                           disc_aux=nets.get("disc_aux"), optim_state=optim,
                           iteration=int(iteration), meta=cfg.get("meta", {}))


def load_checkpoint(path) -> ModelCheckpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
