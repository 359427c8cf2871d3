"""Miniature segmentation network (FSnet) and defogging network (DFnet).

Both share one encoder class, so their encoder parameters live under the same
``encoder.*`` names and can be spliced between the two. Parameters travel as
:class:`ParamSet` values (ordered name -> float32 tensor maps); forward passes
are pure functions of ``(params, input)``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import ConfigError, DataError, NumericError, SpliceError

ENCODER_PREFIX = "encoder."


@dataclass(frozen=True)
class ArchConfig:
    n_stages: int = 4
    stage_channels: tuple = (16, 32, 64, 128)
    num_classes: int = 5
    decoder_depth: str = "light"  # light | heavy
    stem_channels: int = 16
    out_channels: int = 3  # DFnet output channels (1 for the depth pretext)
    residual_output: bool = True  # DFnet predicts a correction of the input in logit space

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.n_stages != 4:
            raise ConfigError(f"n_stages must be 4, got {self.n_stages}")
        if len(self.stage_channels) != self.n_stages:
            raise ConfigError("stage_channels must have one entry per stage")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"stage_channels must be strictly increasing: {self.stage_channels}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.decoder_depth not in ("light", "heavy"):
            raise ConfigError(f"decoder_depth must be light|heavy, got {self.decoder_depth!r}")
        if self.out_channels not in (1, 3):
            raise ConfigError("out_channels must be 1 or 3")
        if self.residual_output and self.out_channels != 3:
            raise ConfigError("residual_output needs out_channels == 3")

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ParamSet(OrderedDict):
    """Ordered ``name -> tensor`` map plus a ``meta`` dict (kind, arch, phase tags...)."""

    def __init__(self, *args, meta=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.meta = dict(meta or {})

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig.from_dict(self.meta["arch"])

    @property
    def kind(self) -> str:
        return self.meta["kind"]

    def copy(self, **meta_updates):
        out = ParamSet(((k, v.detach().clone()) for k, v in self.items()), meta=self.meta)
        out.meta.update(meta_updates)
        return out

    def encoder_names(self):
        return [k for k in self if k.startswith(ENCODER_PREFIX)]

    def num_parameters(self):
        return sum(v.numel() for v in self.values())

    def digest(self):
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(v.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def equal(self, other):
        return list(self) == list(other) and all(torch.equal(self[k], other[k]) for k in self)


class SegOutput(NamedTuple):
    logits: torch.Tensor
    encoder_feats: List[torch.Tensor]
    decoder_feats: List[torch.Tensor]


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def _norm(c):
    return nn.GroupNorm(min(4, c), c)


class ConvNormAct(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = _norm(cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        s = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + s)


class Encoder(nn.Module):
    """Stride-2 stem followed by four stride-2 residual stages (strides 4..32)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.stem = ConvNormAct(3, arch.stem_channels, stride=2)
        cin = arch.stem_channels
        for i, c in enumerate(arch.stage_channels, start=1):
            setattr(self, f"stage{i}", ResBlock(cin, c, stride=2))
            cin = c
        self.n_stages = arch.n_stages

    def forward(self, x):
        """Returns ``(stem_output, [stage1, ..., stage4])``."""
        s = self.stem(x)
        feats, y = [], s
        for i in range(1, self.n_stages + 1):
            y = getattr(self, f"stage{i}")(y)
            feats.append(y)
        return s, feats


class SegDecoder(nn.Module):
    """Light top-down fusion: each level merges its encoder stage with the upsampled coarser level."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        ch = arch.stage_channels
        n = arch.n_stages
        self.n = n
        for i in range(n):
            setattr(self, f"lateral{i + 1}", nn.Conv2d(ch[i], ch[i], 1))
            setattr(self, f"fuse{i + 1}", ConvNormAct(ch[i], ch[i]))
            if i < n - 1:
                setattr(self, f"project{i + 2}", nn.Conv2d(ch[i + 1], ch[i], 1, bias=False))
        self.head = nn.Conv2d(ch[0], arch.num_classes, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, feats, out_size):
        dec = [None] * self.n
        y = None
        for i in reversed(range(self.n)):
            z = getattr(self, f"lateral{i + 1}")(feats[i])
            if y is not None:
                p = getattr(self, f"project{i + 2}")(y)
                z = z + F.interpolate(p, size=z.shape[-2:], mode="bilinear", align_corners=False)
            y = getattr(self, f"fuse{i + 1}")(z)
            dec[i] = y
        logits = F.interpolate(self.head(dec[0]), size=out_size, mode="bilinear", align_corners=False)
        return logits, dec


class UpBlock(nn.Module):
    def __init__(self, cin, cout, n_res=0):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        self.conv = ConvNormAct(cout, cout)
        self.res = nn.Sequential(*[ResBlock(cout, cout) for _ in range(n_res)])

    def forward(self, x, skip=None):
        y = F.relu(self.up(x))
        if skip is not None:
            y = y + skip
        return self.res(self.conv(y))


class DefogDecoder(nn.Module):
    """Four Up Blocks (transposed conv + conv) mirroring the encoder widths, then the Out Block."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        ch = list(arch.stage_channels)
        widths = ch[::-1] + [arch.stem_channels]  # e.g. 128, 64, 32, 16, 16
        n_res = 3 if arch.decoder_depth == "heavy" else 0
        for j in range(4):
            setattr(self, f"up{j + 1}", UpBlock(widths[j], widths[j + 1], n_res))
        self.out = nn.ConvTranspose2d(widths[4], arch.out_channels, 4, stride=2, padding=1)

    def forward(self, stem, feats):
        skips = feats[:-1][::-1] + [stem]  # stage3, stage2, stage1, stem
        y = feats[-1]
        for j in range(4):
            y = getattr(self, f"up{j + 1}")(y, skips[j])
        return self.out(y)


class SegNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.encoder = Encoder(arch)
        self.decoder = SegDecoder(arch)

    def forward(self, x):
        _, enc = self.encoder(x)
        logits, dec = self.decoder(enc, x.shape[-2:])
        return SegOutput(logits, enc, dec)


_EPS = 1e-4


class DFNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.encoder = Encoder(arch)
        self.decoder = DefogDecoder(arch)
        self.residual = arch.residual_output

    def forward(self, x):
        stem, enc = self.encoder(x)
        y = self.decoder(stem, enc)
        if self.residual:
            y = y + torch.logit(x.clamp(_EPS, 1 - _EPS))
        return torch.sigmoid(y), enc


class JointNet(nn.Module):
    """Shared encoder with both a defogging and a segmentation decoder (joint-training ablation)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.encoder = Encoder(arch)
        self.decoder = DefogDecoder(arch)
        self.segdecoder = SegDecoder(arch)
        self.residual = arch.residual_output

    def forward(self, x):
        stem, enc = self.encoder(x)
        y = self.decoder(stem, enc)
        if self.residual:
            y = y + torch.logit(x.clamp(_EPS, 1 - _EPS))
        logits, dec = self.segdecoder(enc, x.shape[-2:])
        return torch.sigmoid(y), SegOutput(logits, enc, dec)


_KINDS = {"segnet": SegNet, "dfnet": DFNet, "joint": JointNet}


# --------------------------------------------------------------------------
# ParamSet <-> module plumbing
# --------------------------------------------------------------------------

def _build(kind, arch, seed, **meta):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = _KINDS[kind](arch)
    return params_of(module, kind=kind, arch=arch.to_dict(), seed=int(seed), **meta)


def build_segnet(cfg: ArchConfig, seed=0) -> ParamSet:
    return _build("segnet", cfg, seed)


def build_dfnet(cfg: ArchConfig, seed=0) -> ParamSet:
    return _build("dfnet", cfg, seed)


def build_jointnet(cfg: ArchConfig, seed=0) -> ParamSet:
    return _build("joint", cfg, seed)


def params_of(module: nn.Module, **meta) -> ParamSet:
    return ParamSet(((k, v.detach().clone()) for k, v in module.state_dict().items()), meta=meta)


def make_module(params: ParamSet) -> nn.Module:
    """Fresh trainable module holding a copy of ``params``."""
    module = _KINDS[params.kind](params.arch)
    module.load_state_dict(params)
    return module


@lru_cache(maxsize=16)
def _skeleton(kind, arch_json):
    module = _KINDS[kind](ArchConfig.from_dict(json.loads(arch_json)))
    module.eval()
    return module


def _as_batch(image):
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
        if image.ndim == 3:
            image = image.permute(2, 0, 1)
    if image.ndim == 3:
        image = image.unsqueeze(0)
    image = image.to(torch.float32)
    if not torch.isfinite(image).all():
        raise NumericError("input image contains non-finite values")
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ConfigError(f"input size {h}x{w} must be divisible by 32")
    return image


def _call(params, image):
    skel = _skeleton(params.kind, json.dumps(params.meta["arch"], sort_keys=True))
    return functional_call(skel, dict(params), (_as_batch(image),))


def seg_forward(params: ParamSet, image) -> SegOutput:
    """Logits (N x K x H x W) plus encoder and decoder pyramids.

    ``image`` is an H x W x 3 array or an N x 3 x H x W tensor.
    """
    if params.kind != "segnet":
        raise ConfigError(f"seg_forward needs segnet params, got {params.kind}")
    return _call(params, image)


def dfnet_forward(params: ParamSet, foggy):
    """Returns ``(defogged, encoder_feats)``; defogged is N x C x H x W in [0, 1]."""
    if params.kind != "dfnet":
        raise ConfigError(f"dfnet_forward needs dfnet params, got {params.kind}")
    return _call(params, foggy)


def splice_encoder(source: ParamSet, target: ParamSet) -> ParamSet:
    """Copy every ``encoder.*`` parameter of ``target`` from ``source``."""
    out = target.copy()
    for name in target.encoder_names():
        if name not in source:
            raise SpliceError(f"source lacks parameter {name}")
        if source[name].shape != target[name].shape:
            raise SpliceError(
                f"shape mismatch for {name}: {tuple(source[name].shape)} vs {tuple(target[name].shape)}")
        out[name] = source[name].detach().clone()
    out.meta["encoder_from"] = source.meta.get("id", source.meta.get("phase"))
    return out


def decoder_to_segnet(joint: ParamSet) -> ParamSet:
    """Segmentation network view of a joint (shared encoder) ParamSet."""
    out = ParamSet(meta={**joint.meta, "kind": "segnet"})
    for k, v in joint.items():
        if k.startswith(ENCODER_PREFIX):
            out[k] = v.clone()
        elif k.startswith("segdecoder."):
            out["decoder." + k[len("segdecoder."):]] = v.clone()
    return out


# --------------------------------------------------------------------------
# checkpoint format
# --------------------------------------------------------------------------
#   magic "DSCK" | u32 version | u32 header length | header JSON (utf-8)
#   then per record: u16 name length | name | u8 ndim | u32 * ndim shape | f32 LE payload

_MAGIC = b"DSCK"
_CKPT_VERSION = 1


def save_checkpoint(params: ParamSet, path, **meta):
    """Write atomically (temp file + rename). Returns the checkpoint id (payload digest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(params.meta)
    header.update(meta)
    header["id"] = params.digest()[:16]
    hb = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC + struct.pack("<II", _CKPT_VERSION, len(hb)) + hb)
        for name, t in params.items():
            nb = name.encode()
            arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4")
            f.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    os.replace(tmp, path)
    return header["id"]


def load_checkpoint(path) -> ParamSet:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(data[off:off + hlen])
    off += hlen
    params = ParamSet(meta=meta)
    while off < len(data):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        params[name] = torch.from_numpy(arr.astype(np.float32))
    return params
