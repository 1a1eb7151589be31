"""Dataset directory format and the synthetic prototype-feature scene generator.

Layout of a dataset directory::

    manifest.json
    samples/<id>/features.bin    DNSR feature map
    samples/<id>/instances.png   16-bit gray instance map, 0 = background
    samples/<id>/classes.json    {"<instance id>": <class id>}
    samples/<id>/image.png       optional RGB rendering

Synthetic scenes are axis-aligned rectangles painted back to front on a
background. Every patch takes the label covering most of its pixels and its
feature is that label's class prototype plus Gaussian noise, so features are
homogeneous within objects by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, FormatError
from .features import PatchFeatureMap, decode_features, write_features

MANIFEST_VERSION = 1


@dataclass
class SynthConfig:
    image_size: int = 64
    patch_size: int = 8
    feature_dim: int = 32
    n_classes: int = 5
    min_objects: int = 2
    max_objects: int = 5
    min_size: int = 12
    max_size: int = 28
    noise_std: float = 0.05
    n_samples: int = 2200
    # trailing samples tagged "eval"; None picks n_samples // 11
    n_eval: int | None = None
    seed: int = 0
    render_images: bool = True
    # snap rectangle edges to patch boundaries so patch labels are exact
    align_to_patches: bool = True

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ConfigError(f"bad object count range [{self.min_objects}, {self.max_objects}]")
        if self.min_size < 1 or self.max_size < self.min_size:
            raise ConfigError(f"bad object size range [{self.min_size}, {self.max_size}]")
        if self.max_size > self.image_size:
            raise ConfigError(f"object size {self.max_size} exceeds image size {self.image_size}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.n_samples < 1 or self.n_classes < 1 or self.feature_dim < 1:
            raise ConfigError("n_samples, n_classes and feature_dim must be positive")

    @property
    def eval_count(self) -> int:
        n = self.n_samples // 11 if self.n_eval is None else self.n_eval
        return min(max(n, 0), self.n_samples)


@dataclass
class SceneSample:
    sample_id: str
    features: PatchFeatureMap
    instances: np.ndarray
    classes: dict[int, int]
    image: np.ndarray | None = None
    split: str = "train"

    def class_map(self) -> np.ndarray:
        lut = np.zeros(self.instances.max() + 1, dtype=np.int64)
        for inst, cls in self.classes.items():
            lut[inst] = cls
        return lut[self.instances]


@dataclass
class DatasetManifest:
    n_samples: int
    feature_dim: int
    grid: tuple[int, int]
    image_size: tuple[int, int]
    classes: dict[int, str]
    samples: list[str]
    splits: dict[str, str] = field(default_factory=dict)
    has_images: bool = False
    version: int = MANIFEST_VERSION
    generator: dict | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["classes"] = {str(k): v for k, v in self.classes.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        try:
            if d["version"] != MANIFEST_VERSION:
                raise FormatError(f"manifest version {d['version']} is not supported")
            return cls(
                n_samples=int(d["n_samples"]),
                feature_dim=int(d["feature_dim"]),
                grid=tuple(d["grid"]),
                image_size=tuple(d["image_size"]),
                classes={int(k): v for k, v in d["classes"].items()},
                samples=list(d["samples"]),
                splits=dict(d.get("splits", {})),
                has_images=bool(d.get("has_images", False)),
                generator=d.get("generator"),
            )
        except KeyError as exc:
            raise FormatError(f"manifest is missing field {exc}") from None

    def ids(self, split: str | None = None) -> list[str]:
        # declared samples beyond the listed ids are addressed by index and
        # fail when reached
        ids = list(self.samples) + [f"{i:06d}" for i in range(len(self.samples), self.n_samples)]
        if split is None:
            return ids
        return [s for s in ids if self.splits.get(s, "train") == split]


def patch_labels(instances: np.ndarray, patch_size: int) -> np.ndarray:
    """Majority label per patch.

    Ties prefer foreground over background, then the lower instance id.
    """
    h, w = instances.shape
    rows, cols = h // patch_size, w // patch_size
    blocks = instances.reshape(rows, patch_size, cols, patch_size).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(rows, cols, -1)
    out = np.zeros((rows, cols), dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            counts = np.bincount(blocks[r, c])
            best = counts.max()
            winners = np.flatnonzero(counts == best)
            fg = winners[winners > 0]
            out[r, c] = fg[0] if len(fg) else winners[0]
    return out


def class_prototypes(cfg: SynthConfig) -> np.ndarray:
    """Unit-norm prototypes for background (row 0) and each class."""
    rng = np.random.default_rng([cfg.seed, 1])
    protos = rng.standard_normal((cfg.n_classes + 1, cfg.feature_dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _texture(rng, size: int, period_range=(3.0, 7.0)) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(*period_range)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)


def render_image(rng, cfg: SynthConfig, rects, layout_classes) -> np.ndarray:
    """RGB rendering whose colour statistics are only loosely tied to objects.

    Object colours are drawn per instance, independent of class, and the
    whole scene is modulated by a strong smooth illumination gradient and
    high-frequency texture, as in cluttered natural images.
    """
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s] / s
    base = rng.uniform(0.2, 0.8, 3)
    img = np.broadcast_to(base, (s, s, 3)).copy()
    img += 0.15 * _texture(rng, s)[..., None] * rng.uniform(-1, 1, 3)
    for (y0, x0, y1, x1), _cls in zip(rects, layout_classes):
        color = np.clip(base + rng.normal(0, 0.2, 3), 0, 1)
        tex = 0.15 * _texture(rng, s)[y0:y1, x0:x1, None] * rng.uniform(-1, 1, 3)
        img[y0:y1, x0:x1] = color + tex
    gy, gx = rng.normal(0, 0.6, 2)
    light = 1 + gy * (yy - 0.5) + gx * (xx - 0.5)
    img = img * light[..., None] + rng.normal(0, 0.05, img.shape)
    return np.clip(img, 0, 1)


def _sample_scene(rng, cfg: SynthConfig):
    s = cfg.image_size
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    replace = n_obj > cfg.n_classes
    obj_classes = rng.choice(np.arange(1, cfg.n_classes + 1), size=n_obj, replace=replace)
    canvas = np.zeros((s, s), dtype=np.int64)
    rects = []
    for i in range(n_obj):
        h, w = (int(v) for v in rng.integers(cfg.min_size, cfg.max_size + 1, size=2))
        if cfg.align_to_patches:
            p = cfg.patch_size
            h, w = (min(max(int(round(v / p)) * p, p), s) for v in (h, w))
            y0 = int(rng.integers(0, (s - h) // p + 1)) * p
            x0 = int(rng.integers(0, (s - w) // p + 1)) * p
        else:
            y0, x0 = int(rng.integers(0, s - h + 1)), int(rng.integers(0, s - w + 1))
        rects.append((y0, x0, y0 + int(h), x0 + int(w)))
        canvas[y0:y0 + h, x0:x0 + w] = i + 1
    # renumber visible instances consecutively in paint order
    visible = [i for i in range(1, n_obj + 1) if np.any(canvas == i)]
    lut = np.zeros(n_obj + 1, dtype=np.int64)
    classes = {}
    for new_id, old_id in enumerate(visible, start=1):
        lut[old_id] = new_id
        classes[new_id] = int(obj_classes[old_id - 1])
    return lut[canvas], classes, rects, obj_classes


def _write_label_png(path: Path, labels: np.ndarray) -> None:
    if labels.max(initial=0) > 65535 or labels.min(initial=0) < 0:
        raise DataError("label values do not fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


def generate_synthetic_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write a synthetic dataset to ``out_dir``; deterministic in ``cfg``."""
    cfg.validate()
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    protos = class_prototypes(cfg)
    grid = (cfg.image_size // cfg.patch_size,) * 2
    n_eval = cfg.eval_count
    ids, splits = [], {}
    for idx in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, 2, idx])
        instances, classes, rects, obj_classes = _sample_scene(rng, cfg)
        labels = patch_labels(instances, cfg.patch_size).reshape(-1)
        label_class = np.array([0] + [classes[i] for i in range(1, len(classes) + 1)])
        tokens = protos[label_class[labels]]
        if cfg.noise_std > 0:
            tokens = tokens + rng.normal(0, cfg.noise_std, tokens.shape)
        sid = f"{idx:06d}"
        sdir = out / "samples" / sid
        sdir.mkdir(exist_ok=True)
        write_features(sdir / "features.bin", PatchFeatureMap(tokens.astype(np.float32), grid, "synthetic"))
        _write_label_png(sdir / "instances.png", instances)
        (sdir / "classes.json").write_text(json.dumps({str(k): v for k, v in classes.items()}, sort_keys=True))
        if cfg.render_images:
            img = render_image(rng, cfg, rects, obj_classes)
            Image.fromarray((img * 255).round().astype(np.uint8)).save(sdir / "image.png", format="PNG")
        ids.append(sid)
        splits[sid] = "eval" if idx >= cfg.n_samples - n_eval else "train"
    class_names = {0: "background", **{c: f"class_{c}" for c in range(1, cfg.n_classes + 1)}}
    manifest = DatasetManifest(
        n_samples=cfg.n_samples,
        feature_dim=cfg.feature_dim,
        grid=grid,
        image_size=(cfg.image_size, cfg.image_size),
        classes=class_names,
        samples=ids,
        splits=splits,
        has_images=cfg.render_images,
        generator=asdict(cfg),
    )
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    try:
        raw = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DataError(f"no manifest at {mpath}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    return DatasetManifest.from_json(raw)


def load_sample(root, sample_id: str, manifest: DatasetManifest, with_image: bool = True) -> SceneSample:
    sdir = Path(root) / "samples" / sample_id
    if not sdir.is_dir():
        raise DataError(f"sample {sample_id}: directory {sdir} is missing")
    try:
        features = decode_features((sdir / "features.bin").read_bytes())
        instances = read_label_png(sdir / "instances.png")
        classes = {int(k): int(v) for k, v in json.loads((sdir / "classes.json").read_text()).items()}
    except FileNotFoundError as exc:
        raise DataError(f"sample {sample_id}: missing file {Path(exc.filename).name}") from None
    except FormatError as exc:
        raise FormatError(f"sample {sample_id}: features: {exc}") from None
    if features.grid != tuple(manifest.grid):
        raise DataError(f"sample {sample_id}: features grid {features.grid} != manifest {tuple(manifest.grid)}")
    if features.feature_dim != manifest.feature_dim:
        raise DataError(f"sample {sample_id}: feature_dim {features.feature_dim} != manifest {manifest.feature_dim}")
    if instances.shape != tuple(manifest.image_size):
        raise DataError(f"sample {sample_id}: instances shape {instances.shape} != image_size {tuple(manifest.image_size)}")
    present = set(np.unique(instances).tolist()) - {0}
    if present != set(classes):
        raise DataError(f"sample {sample_id}: classes keys {sorted(classes)} != instance ids {sorted(present)}")
    image = None
    ipath = sdir / "image.png"
    if with_image and ipath.exists():
        with Image.open(ipath) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if image.shape[:2] != tuple(manifest.image_size):
            raise DataError(f"sample {sample_id}: image shape {image.shape[:2]} != image_size")
    return SceneSample(sample_id, features, instances, classes, image, manifest.splits.get(sample_id, "train"))


class Dataset:
    """Lazily loaded dataset; iterates samples in manifest order."""

    def __init__(self, path, split: str | None = None, with_images: bool = True):
        self.root = Path(path)
        self.manifest = read_manifest(self.root)
        self.split = split
        self.with_images = with_images
        self.ids = self.manifest.ids(split)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> SceneSample:
        return load_sample(self.root, self.ids[i], self.manifest, self.with_images)

    def __iter__(self) -> Iterator[SceneSample]:
        for sid in self.ids:
            yield load_sample(self.root, sid, self.manifest, self.with_images)

    def stacked_features(self) -> np.ndarray:
        """``S x N x D_feat`` array of all features in order."""
        return np.stack([load_sample(self.root, sid, self.manifest, False).features.tokens for sid in self.ids])

    def stacked_images(self) -> np.ndarray:
        if not self.manifest.has_images:
            raise DataError("dataset has no rendered images")
        return np.stack([s.image for s in self])


def load_dataset(path, split: str | None = None, with_images: bool = True) -> Dataset:
    return Dataset(path, split, with_images)
