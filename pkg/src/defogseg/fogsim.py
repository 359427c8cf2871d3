"""Procedural toy scenes, atmospheric-scattering fog and paired dataset I/O.

Scenes are small street-like layouts: a sky band above a horizon line, a
ground plane below it, and a handful of textured objects standing on the
ground. Every pixel has a class label and a scene depth, so fog can be
rendered with the scattering model

    I = J * t + A * (1 - t),    t = exp(-beta * d)

Datasets are written as 8-bit PNGs (clean, fog, label), raw little-endian
float32 depth, and a JSON manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, DimensionError, DomainError, IntegrityError

logger = logging.getLogger(__name__)

IGNORE = 255
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

SKY, GROUND = 0, 1
CLASS_NAMES = ("sky", "ground", "building", "vehicle", "vegetation")

# split name -> (fog domain, labels visible to training consumers)
SPLITS = {
    "train": ("synthetic", True),
    "test": ("synthetic", True),
    "real": ("real", False),
    "real_test": ("real", False),
}


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    min_shapes: int = 3
    max_shapes: int = 7
    near_depth: float = 2.0
    far_depth: float = 50.0
    sky_depth: float = 80.0

    def validate(self):
        for name in ("height", "width"):
            v = getattr(self, name)
            if v < 32 or v % 32:
                raise ConfigError(f"{name}={v} must be >= 32 and divisible by 32")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes={self.num_classes} must be >= 2")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 0 <= min_shapes <= max_shapes")
        if not 0 < self.near_depth < self.far_depth <= self.sky_depth:
            raise ConfigError("need 0 < near_depth < far_depth <= sky_depth")


@dataclass
class DatasetConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    n_train: int = 200
    n_test: int = 50
    n_real: int = 100
    n_real_test: int = 50
    seed: int = 0
    synthetic_beta: tuple = (0.02, 0.06)
    real_beta: tuple = (0.08, 0.16)
    airlight: tuple = (0.75, 0.95)
    real_airlight_amplitude: float = 0.05

    def validate(self):
        self.scene.validate()
        for name in ("n_train", "n_test", "n_real", "n_real_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("synthetic_beta", "real_beta", "airlight"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name}={lo, hi} is not a valid range")
        if self.airlight[1] > 1:
            raise ConfigError("airlight must lie in [0, 1]")

    def count(self, split):
        return {"train": self.n_train, "test": self.n_test,
                "real": self.n_real, "real_test": self.n_real_test}[split]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        scene = SceneConfig(**d.pop("scene", {}))
        for k in ("synthetic_beta", "real_beta", "airlight"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(scene=scene, **d)


@dataclass
class SceneSample:
    id: str
    split: str
    clean: Optional[np.ndarray]  # H x W x 3 float32 in [0, 1]
    fog: np.ndarray
    depth: np.ndarray  # H x W float32
    label: Optional[np.ndarray]  # H x W uint8, IGNORE = 255
    beta: float
    airlight: Union[float, np.ndarray]


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------

def _ground_depth(rows, horizon, cfg):
    """Perspective-like depth for ground rows: near at the bottom edge, far at the horizon."""
    t = (rows - horizon + 0.5) / (cfg.height - horizon)
    return np.clip(cfg.near_depth / np.maximum(t, 1e-6), cfg.near_depth, cfg.far_depth)


def _texture(rng, kind, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "stripes":
        period = rng.integers(3, 6)
        return 0.15 * ((xx // period) % 2) - 0.075
    if kind == "windows":
        p = rng.integers(3, 5)
        return -0.18 * (((xx % p) < p // 2 + 1) & ((yy % p) < p // 2 + 1))
    if kind == "noise":
        return rng.normal(0.0, 0.09, size=(h, w))
    if kind == "smooth":
        return 0.05 * np.sin(xx / max(w, 1) * np.pi)
    raise ValueError(kind)


# class id -> (shape, texture, base RGB)
_OBJECT_STYLES = {
    2: ("rect", "windows", (0.55, 0.45, 0.40)),
    3: ("ellipse", "smooth", (0.75, 0.15, 0.15)),
    4: ("triangle", "noise", (0.20, 0.50, 0.20)),
}


def _object_style(cls_id):
    if cls_id in _OBJECT_STYLES:
        return _OBJECT_STYLES[cls_id]
    # extra classes beyond the default five cycle through shapes with a hashed hue
    shape = ("rect", "ellipse", "triangle")[cls_id % 3]
    h = (cls_id * 0.381966) % 1.0
    rgb = tuple(0.35 + 0.45 * abs(np.sin(np.pi * (h + k / 3))) for k in range(3))
    return shape, "stripes", rgb


def _shape_mask(shape, h, w, y0, x0, oh, ow):
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "rect":
        return (yy >= y0) & (yy < y0 + oh) & (xx >= x0) & (xx < x0 + ow)
    if shape == "ellipse":
        cy, cx = y0 + oh / 2.0, x0 + ow / 2.0
        return ((yy + 0.5 - cy) / (oh / 2.0)) ** 2 + ((xx + 0.5 - cx) / (ow / 2.0)) ** 2 <= 1.0
    if shape == "triangle":
        # apex at the top centre, base at the bottom row
        frac = (yy + 0.5 - y0) / oh
        half = frac * ow / 2.0
        cx = x0 + ow / 2.0
        return (frac >= 0) & (frac <= 1) & (np.abs(xx + 0.5 - cx) <= half)
    raise ValueError(shape)


def gen_scene(seed, cfg=None):
    """Generate one clean scene. Returns ``(clean, depth, label)``.

    Deterministic in ``seed``; the label map always contains sky and ground.
    """
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W, K = cfg.height, cfg.width, cfg.num_classes

    clean = np.zeros((H, W, 3), dtype=np.float64)
    depth = np.zeros((H, W), dtype=np.float64)
    label = np.zeros((H, W), dtype=np.uint8)

    horizon = int(rng.integers(int(0.3 * H), int(0.55 * H) + 1))
    rows = np.arange(H, dtype=np.float64)

    # sky: vertical gradient, brighter toward the horizon
    sky_top = np.array([0.25, 0.45, 0.85]) + rng.uniform(-0.08, 0.08, 3)
    sky_bot = np.array([0.65, 0.78, 0.95]) + rng.uniform(-0.05, 0.05, 3)
    frac = (rows[:horizon] / max(horizon - 1, 1))[:, None]
    clean[:horizon] = (sky_top * (1 - frac) + sky_bot * frac)[:, None, :]
    depth[:horizon] = cfg.sky_depth
    label[:horizon] = SKY

    # ground: grey road with lane-like texture
    g = np.array([0.32, 0.32, 0.34]) + rng.uniform(-0.06, 0.06, 3)
    clean[horizon:] = g + rng.normal(0.0, 0.03, size=(H - horizon, W, 1))
    depth[horizon:] = _ground_depth(rows[horizon:], horizon, cfg)[:, None]
    label[horizon:] = GROUND

    if K > 2:
        n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        objs = []
        for _ in range(n):
            cls_id = int(rng.integers(2, K))
            shape, tex, rgb = _object_style(cls_id)
            base = int(rng.integers(horizon + 1, H + 1))  # bottom row (exclusive)
            d_base = float(_ground_depth(np.array([base - 1.0]), horizon, cfg)[0])
            scale = cfg.near_depth / d_base  # nearer objects are drawn larger
            if cls_id == 2:
                oh, ow = rng.uniform(0.35, 0.8) * H * scale + 6, rng.uniform(0.15, 0.35) * W * scale + 5
            elif cls_id == 3:
                oh, ow = rng.uniform(0.1, 0.2) * H * scale + 4, rng.uniform(0.2, 0.35) * W * scale + 6
            else:
                oh, ow = rng.uniform(0.25, 0.5) * H * scale + 6, rng.uniform(0.15, 0.3) * W * scale + 5
            oh, ow = int(min(oh, H - 1)), int(min(ow, W - 1))
            x0 = int(rng.integers(-ow // 3, W - 2 * ow // 3))
            color = np.clip(np.array(rgb) + rng.uniform(-0.1, 0.1, 3), 0.0, 1.0)
            offset = float(rng.uniform(0.0, 0.15)) * d_base
            objs.append((d_base - offset, cls_id, shape, tex, color, base - oh, x0, oh, ow))
        # painter's algorithm: far objects first
        objs.sort(key=lambda o: -o[0])
        for d_obj, cls_id, shape, tex, color, y0, x0, oh, ow in objs:
            mask = _shape_mask(shape, H, W, y0, x0, oh, ow)
            if not mask.any():
                continue
            t = _texture(rng, tex, H, W)[..., None]
            clean[mask] = (color + t)[mask]
            depth[mask] = d_obj
            label[mask] = cls_id

    clean = np.clip(clean, 0.0, 1.0).astype(np.float32)
    return clean, depth.astype(np.float32), label


# --------------------------------------------------------------------------
# fog
# --------------------------------------------------------------------------

def transmittance(depth, beta):
    return np.exp(-float(beta) * np.asarray(depth, dtype=np.float64))


def apply_fog(clean, depth, beta, airlight):
    """Render homogeneous fog over ``clean`` (H x W x 3) given per-pixel ``depth``.

    ``airlight`` is a scalar or an H x W field. Output is float32 in [0, 1].
    """
    clean = np.asarray(clean)
    depth = np.asarray(depth)
    if clean.ndim != 3 or clean.shape[2] != 3 or clean.shape[:2] != depth.shape:
        raise DimensionError(f"clean {clean.shape} and depth {depth.shape} do not match")
    if not np.isfinite(beta) or beta < 0:
        raise DomainError(f"beta must be finite and >= 0, got {beta}")
    a = np.asarray(airlight, dtype=np.float64)
    if a.ndim not in (0, 2) or (a.ndim == 2 and a.shape != depth.shape):
        raise DimensionError(f"airlight shape {a.shape} does not match depth {depth.shape}")
    if np.any(a < 0) or np.any(a > 1):
        raise DomainError("airlight must lie in [0, 1]")
    t = transmittance(depth, beta)[..., None]
    if a.ndim == 2:
        a = a[..., None]
    out = clean.astype(np.float64) * t + a * (1.0 - t)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def airlight_field(seed, height, width, base, amplitude):
    """Low-frequency airlight map: ``base`` plus a smooth field bounded by ``amplitude``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / np.array([height, width])[:, None, None]
    f = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, 2)
        py, px = rng.uniform(0, 2 * np.pi, 2)
        f += np.sin(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
    f /= max(np.abs(f).max(), 1e-12)
    return np.clip(base + amplitude * f, 0.0, 1.0)


# --------------------------------------------------------------------------
# dataset I/O
# --------------------------------------------------------------------------

def to_u8(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_u8(x):
    return (np.asarray(x, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


def _sample_seed(seed, split, index):
    split_idx = list(SPLITS).index(split)
    return int(np.random.SeedSequence([seed, split_idx, index]).generate_state(1)[0])


def render_sample(cfg, split, index):
    """Build one sample (with 8-bit quantised rasters) plus its manifest entry."""
    domain, visible = SPLITS[split]
    s = _sample_seed(cfg.seed, split, index)
    rng = np.random.default_rng(s)
    clean, depth, label = gen_scene(s, cfg.scene)
    clean = from_u8(to_u8(clean))
    lo, hi = cfg.synthetic_beta if domain == "synthetic" else cfg.real_beta
    beta = float(rng.uniform(lo, hi))
    a = float(rng.uniform(*cfg.airlight))
    entry = {"id": f"{split}_{index:05d}", "split": split, "domain": domain,
             "beta": beta, "airlight": a, "airlight_amplitude": 0.0,
             "airlight_seed": None, "labels_visible": visible, "seed": s}
    if domain == "real" and cfg.real_airlight_amplitude > 0:
        entry["airlight_amplitude"] = float(cfg.real_airlight_amplitude)
        entry["airlight_seed"] = int(rng.integers(0, 2**31 - 1))
    fog = from_u8(to_u8(apply_fog(clean, depth, beta, entry_airlight(entry, clean.shape[:2]))))
    return entry, clean, fog, depth, label


def entry_airlight(entry, shape):
    if not entry.get("airlight_amplitude"):
        return entry["airlight"]
    return airlight_field(entry["airlight_seed"], shape[0], shape[1],
                          entry["airlight"], entry["airlight_amplitude"])


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_png(path, arr):
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def build_dataset(cfg, out_dir):
    """Write all splits under ``out_dir`` and return the manifest dict."""
    cfg.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            (root / split).mkdir(exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {root}: {e}") from e

    samples = []
    for split in SPLITS:
        for i in range(cfg.count(split)):
            entry, clean, fog, depth, label = render_sample(cfg, split, i)
            stem = root / split / entry["id"]
            files = {
                "clean": f"{split}/{entry['id']}.clean.png",
                "fog": f"{split}/{entry['id']}.fog.png",
                "label": f"{split}/{entry['id']}.label.png",
                "depth": f"{split}/{entry['id']}.depth.f32",
            }
            try:
                _write_png(f"{stem}.clean.png", to_u8(clean))
                _write_png(f"{stem}.fog.png", to_u8(fog))
                _write_png(f"{stem}.label.png", label)
                depth.astype("<f4").tofile(f"{stem}.depth.f32")
            except OSError as e:
                raise DataError(f"cannot write sample {entry['id']}: {e}") from e
            entry["files"] = files
            entry["sha256"] = {k: _sha(root / v) for k, v in files.items()}
            samples.append(entry)

    manifest = {
        "version": MANIFEST_VERSION,
        "height": cfg.scene.height,
        "width": cfg.scene.width,
        "num_classes": cfg.scene.num_classes,
        "class_names": list(CLASS_NAMES[: cfg.scene.num_classes]),
        "config": asdict(cfg),
        "samples": samples,
    }
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, root / MANIFEST_NAME)
    logger.info("wrote %d samples to %s", len(samples), root)
    return manifest


def read_manifest(path):
    path = Path(path)
    mpath = path / MANIFEST_NAME if path.is_dir() else path
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as e:
        raise IntegrityError(f"missing manifest: {mpath}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest {mpath}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def _read_png(path):
    try:
        with Image.open(path) as im:
            return np.array(im)
    except FileNotFoundError as e:
        raise IntegrityError(f"missing file referenced by manifest: {path}") from e


def load_dataset(path, splits: Optional[Sequence[str]] = None, evaluation=False,
                 verify=False) -> Iterator[SceneSample]:
    """Yield samples in manifest order.

    Samples whose split is flagged ``labels_visible=false`` come back with
    ``clean`` and ``label`` set to None unless ``evaluation`` is requested.
    """
    root = Path(path)
    if not root.is_dir():
        root = root.parent
    manifest = read_manifest(root)
    H, W = manifest["height"], manifest["width"]
    if isinstance(splits, str):
        splits = [splits]
    for entry in manifest["samples"]:
        if splits is not None and entry["split"] not in splits:
            continue
        files = entry["files"]
        for key, rel in files.items():
            fpath = root / rel
            if not fpath.exists():
                raise IntegrityError(f"missing file referenced by manifest: {fpath}")
            if verify and _sha(fpath) != entry["sha256"][key]:
                raise IntegrityError(f"checksum mismatch: {fpath}")
        reveal = entry["labels_visible"] or evaluation
        fog = from_u8(_read_png(root / files["fog"]))
        depth = np.fromfile(root / files["depth"], dtype="<f4")
        if depth.size != H * W:
            raise IntegrityError(f"depth file has wrong size: {root / files['depth']}")
        depth = depth.reshape(H, W).astype(np.float32)
        clean = from_u8(_read_png(root / files["clean"])) if reveal else None
        label = _read_png(root / files["label"]) if reveal else None
        yield SceneSample(
            id=entry["id"], split=entry["split"], clean=clean, fog=fog, depth=depth,
            label=label, beta=entry["beta"], airlight=entry_airlight(entry, (H, W)),
        )
