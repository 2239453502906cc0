"""Synthetic pinhole-camera scenes: depth maps plus segmentation labels.

A camera with focal length f (in pixels) images flat shapes placed at
controlled distances in front of a backdrop. A shape of physical size s at
distance d projects to f*s/d pixels, so the same object shrinks with
distance — the effect the depth-adaptive convolution is built to absorb.
Class identity is the shape (disk / square / ring), never the distance, so a
classifier can only win by recognizing geometry at whatever scale it appears.

Rasterization: a pixel belongs to a shape iff its center lies inside the
projected outline (no anti-aliasing). With the projection center on a pixel
and sizes away from exact pixel boundaries, rendering at distance d/g equals
the rendering at d subsampled by the integer factor g.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import DepthMap, FeatureMap, LabelMap
from .tensorio import write_dat1, read_dat1, write_pgm

SHAPES = ("disk", "square", "ring")
RING_INNER_FRACTION = 0.5
BACKGROUND_CLASS = 0


@dataclass
class SceneObject:
    shape: str
    physical_size_mm: float      # disk/ring radius, square half-side
    class_index: int
    center_xy_mm: tuple[float, float]   # position in the camera plane
    distance_mm: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.physical_size_mm <= 0 or self.distance_mm <= 0:
            raise ConfigError("object size and distance must be positive")
        if self.class_index < 1:
            raise ConfigError("object classes start at 1 (0 is background)")


@dataclass
class SceneSpec:
    height: int
    width: int
    focal_px: float
    background_mm: float
    objects: list[SceneObject] = field(default_factory=list)

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.focal_px <= 0:
            raise ConfigError("scene needs positive dims and focal length")
        if self.background_mm <= 0:
            raise ConfigError("background depth must be positive")
        for obj in self.objects:
            if not obj.distance_mm < self.background_mm:
                raise ConfigError("objects must sit in front of the background")


def _object_mask(obj: SceneObject, scene: SceneSpec) -> np.ndarray:
    """Boolean pixel-center-inside mask of the projected shape."""
    scale = scene.focal_px / obj.distance_mm
    cy = (scene.height - 1) / 2.0 + obj.center_xy_mm[1] * scale
    cx = (scene.width - 1) / 2.0 + obj.center_xy_mm[0] * scale
    radius = obj.physical_size_mm * scale
    rows = np.arange(scene.height)[:, None] - cy
    cols = np.arange(scene.width)[None, :] - cx
    if obj.shape == "square":
        return (np.abs(rows) <= radius) & (np.abs(cols) <= radius)
    d2 = rows ** 2 + cols ** 2
    if obj.shape == "disk":
        return d2 <= radius ** 2
    inner = RING_INNER_FRACTION * radius
    return (d2 <= radius ** 2) & (d2 > inner ** 2)


def render(scene: SceneSpec) -> tuple[DepthMap, LabelMap]:
    """Rasterize a scene; nearer objects occlude farther ones.

    The label map matches depth occupancy exactly: a pixel is non-background
    iff its depth differs from the background depth.
    """
    depth = np.full((scene.height, scene.width), scene.background_mm)
    labels = np.full((scene.height, scene.width), BACKGROUND_CLASS, dtype=np.int64)
    for obj in sorted(scene.objects, key=lambda o: -o.distance_mm):
        mask = _object_mask(obj, scene)
        if not mask.any():
            raise ConfigError(
                f"{obj.shape} at {obj.distance_mm}mm projects to zero pixels")
        depth[mask] = obj.distance_mm
        labels[mask] = obj.class_index
    return DepthMap(depth), LabelMap(labels)


def intensity_input(depth: DepthMap) -> FeatureMap:
    """The network's raw input for depth scenes: depth in meters, 1 channel."""
    if depth.has_holes():
        raise ValueError("intensity input needs a hole-free depth map")
    return FeatureMap(depth.depths[None, :, :] / 1000.0)


# -- dataset generation -----------------------------------------------------


@dataclass
class SplitSpec:
    count: int
    distance_range_mm: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.distance_range_mm
        if self.count < 0:
            raise ConfigError("split count must be >= 0")
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid distance range [{lo}, {hi}]")


@dataclass
class DatasetConfig:
    height: int = 64
    width: int = 64
    focal_px: float = 44.0
    classes: tuple[str, ...] = SHAPES
    objects_per_scene: tuple[int, int] = (1, 2)
    size_range_mm: tuple[float, float] = (280.0, 400.0)
    backdrop_offset_mm: tuple[float, float] = (400.0, 800.0)
    splits: dict[str, SplitSpec] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for name in self.classes:
            if name not in SHAPES:
                raise ConfigError(f"unknown class shape {name!r}")
        if not self.classes:
            raise ConfigError("need at least one object class")
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi:
            raise ConfigError("objects_per_scene range must be >= 1")
        if not 0 < self.size_range_mm[0] <= self.size_range_mm[1]:
            raise ConfigError("invalid size range")
        if not 0 < self.backdrop_offset_mm[0] <= self.backdrop_offset_mm[1]:
            raise ConfigError("invalid backdrop offset range")
        for split in self.splits.values():
            far = split.distance_range_mm[1]
            if self.focal_px * self.size_range_mm[0] / far < 1.0:
                raise ConfigError(
                    f"smallest object at {far}mm projects below one pixel")

    @property
    def num_classes(self) -> int:
        return len(self.classes) + 1   # plus background

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        try:
            splits = {name: SplitSpec(count=int(s["count"]),
                                      distance_range_mm=tuple(s["distance_range_mm"]))
                      for name, s in d.get("splits", {}).items()}
            return cls(
                height=int(d.get("image_size", [64, 64])[0]),
                width=int(d.get("image_size", [64, 64])[1]),
                focal_px=float(d.get("focal_px", 44.0)),
                classes=tuple(d.get("classes", list(SHAPES))),
                objects_per_scene=tuple(d.get("objects_per_scene", [1, 2])),
                size_range_mm=tuple(d.get("size_range_mm", [280.0, 400.0])),
                backdrop_offset_mm=tuple(d.get("backdrop_offset_mm", [400.0, 800.0])),
                splits=splits,
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"bad dataset config: {exc}") from exc


def _random_scene(rng: np.random.Generator, cfg: DatasetConfig,
                  distance_range) -> SceneSpec:
    count = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
    objects = []
    max_distance = 0.0
    for _ in range(count):
        shape = cfg.classes[int(rng.integers(len(cfg.classes)))]
        size = float(rng.uniform(*cfg.size_range_mm))
        distance = float(rng.uniform(*distance_range))
        max_distance = max(max_distance, distance)
        # keep the projection fully inside the frame, with a small margin
        scale = cfg.focal_px / distance
        radius_px = size * scale
        span_x = max(0.0, ((cfg.width - 1) / 2.0 - radius_px - 1.0)) / scale
        span_y = max(0.0, ((cfg.height - 1) / 2.0 - radius_px - 1.0)) / scale
        center = (float(rng.uniform(-span_x, span_x)),
                  float(rng.uniform(-span_y, span_y)))
        objects.append(SceneObject(shape=shape, physical_size_mm=size,
                                   class_index=1 + cfg.classes.index(shape),
                                   center_xy_mm=center, distance_mm=distance))
    background = max_distance + float(rng.uniform(*cfg.backdrop_offset_mm))
    return SceneSpec(height=cfg.height, width=cfg.width, focal_px=cfg.focal_px,
                     background_mm=background, objects=objects)


def generate_dataset(cfg: DatasetConfig, out_dir, emit_pgm: bool = False) -> dict:
    """Render every split to DAT1 files and write the manifest.

    Deterministic for a given config: scene parameters are drawn from one
    seeded stream in a fixed split order. The manifest records the mean and
    standard deviation of all training-split depth pixels; the mean feeds the
    dilation scale of depth-adaptive layers at training time.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    files: dict[str, list[str]] = {}
    train_sum = 0.0
    train_sumsq = 0.0
    train_pixels = 0

    for split_name in sorted(cfg.splits):
        split = cfg.splits[split_name]
        split_dir = out / split_name
        split_dir.mkdir(exist_ok=True)
        names = []
        for idx in range(split.count):
            scene = _random_scene(rng, cfg, split.distance_range_mm)
            depth, labels = render(scene)
            stem = f"{idx:05d}"
            write_dat1(split_dir / f"{stem}_depth.dat1", depth.depths)
            write_dat1(split_dir / f"{stem}_label.dat1",
                       labels.labels.astype(np.float64))
            if emit_pgm:
                write_pgm(split_dir / f"{stem}_depth.pgm", depth.depths)
                write_pgm(split_dir / f"{stem}_label.pgm",
                          labels.labels.astype(np.float64),
                          max_value=float(cfg.num_classes - 1))
            names.append(stem)
            if split_name == "train":
                train_sum += float(depth.depths.sum())
                train_sumsq += float(np.square(depth.depths).sum())
                train_pixels += depth.depths.size
        files[split_name] = names

    if train_pixels:
        mean_depth = train_sum / train_pixels
        std_depth = float(np.sqrt(max(0.0, train_sumsq / train_pixels - mean_depth ** 2)))
    else:
        mean_depth, std_depth = 0.0, 0.0

    manifest = {
        "image_size": [cfg.height, cfg.width],
        "focal_px": cfg.focal_px,
        "classes": list(cfg.classes),
        "num_classes": cfg.num_classes,
        "seed": cfg.seed,
        "mean_depth_mm": mean_depth,
        "std_depth_mm": std_depth,
        "splits": {
            name: {
                "count": cfg.splits[name].count,
                "distance_range_mm": list(cfg.splits[name].distance_range_mm),
                "files": files[name],
            }
            for name in sorted(cfg.splits)
        },
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# -- loading ----------------------------------------------------------------


@dataclass
class Sample:
    name: str
    depth: DepthMap
    labels: LabelMap


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_split(data_dir, split_name: str, manifest: dict | None = None) -> list[Sample]:
    manifest = manifest if manifest is not None else load_manifest(data_dir)
    if split_name not in manifest["splits"]:
        raise ConfigError(f"split {split_name!r} not in dataset "
                          f"(has {sorted(manifest['splits'])})")
    base = Path(data_dir) / split_name
    samples = []
    for stem in manifest["splits"][split_name]["files"]:
        depth = DepthMap(read_dat1(base / f"{stem}_depth.dat1"))
        labels = LabelMap(read_dat1(base / f"{stem}_label.dat1").astype(np.int64))
        samples.append(Sample(name=stem, depth=depth, labels=labels))
    return samples
