"""Synthetic multi-shape scenes for pre-training and segmentation."""

from __future__ import annotations

import colorsys
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

VERSION_TAG = "decon-data-1"
NUM_CLASSES = 4
CLASS_NAMES = ("background", "circle", "square", "triangle")


class DatasetError(RuntimeError):
    pass


@dataclass
class Shape:
    cls: int
    center: tuple[float, float]  # (x, y) in pixels
    scale: float
    color: tuple[float, float, float]


@dataclass
class ShapeScene:
    image: np.ndarray  # H x W x 3 float64 in [0, 1], multiples of 1/255
    mask: np.ndarray  # H x W uint8 class ids
    shapes: list[Shape] = field(default_factory=list)


@dataclass
class DatasetManifest:
    version: str
    image_size: int
    count: int
    items: list[dict[str, str]]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "image_size": self.image_size,
                "count": self.count,
                "items": self.items,
                "seed": self.seed,
            },
            indent=2,
        )


def shape_mask(shape: Shape, size: int) -> np.ndarray:
    """Boolean raster of pixel centers covered by ``shape``."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = shape.center
    dx, dy = xs - cx, ys - cy
    s = shape.scale
    if shape.cls == 1:
        return dx * dx + dy * dy <= s * s
    if shape.cls == 2:
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape.cls == 3:
        # upward equilateral triangle with circumradius s
        verts = [(0.0, -s), (-s * np.sqrt(3) / 2, s / 2), (s * np.sqrt(3) / 2, s / 2)]
        inside = np.ones_like(dx, dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            cross = (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0)
            inside &= cross <= 0
        return inside
    raise ValueError(f"unknown shape class {shape.cls}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(0.15, 0.55, size=3)
    c1 = rng.uniform(0.15, 0.55, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = (np.cos(angle) * (xs - 0.5) + np.sin(angle) * (ys - 0.5)) / np.sqrt(2) + 0.5
    return c0 * (1 - t[..., None]) + c1 * t[..., None]


def generate_scene(rng: np.random.Generator, size: int, n_shapes: int) -> ShapeScene:
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if not 0 <= n_shapes <= 8:
        raise ValueError(f"n_shapes must lie in 0..8, got {n_shapes}")
    image = _background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    shapes = []
    for _ in range(n_shapes):
        cls = int(rng.integers(1, NUM_CLASSES))
        center = (float(rng.uniform(0, size)), float(rng.uniform(0, size)))
        scale = float(rng.uniform(size / 8, size / 3))
        color = colorsys.hsv_to_rgb(rng.uniform(), 1.0, rng.uniform(0.7, 1.0))
        shape = Shape(cls, center, scale, tuple(float(c) for c in color))
        covered = shape_mask(shape, size)
        image[covered] = shape.color
        mask[covered] = cls
        shapes.append(shape)
    # quantize so PNG round trips are exact
    image = np.round(np.clip(image, 0, 1) * 255) / 255
    return ShapeScene(image=image, mask=mask, shapes=shapes)


def item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def scene_for_item(seed: int, index: int, size: int) -> ShapeScene:
    rng = item_rng(seed, index)
    n_shapes = int(rng.integers(1, 4))
    return generate_scene(rng, size, n_shapes)


def _write_item(out_dir: Path, seed: int, index: int, size: int) -> dict[str, str]:
    scene = scene_for_item(seed, index, size)
    img_rel = f"img/{index:04d}.png"
    mask_rel = f"mask/{index:04d}.png"
    try:
        Image.fromarray((scene.image * 255).round().astype(np.uint8), "RGB").save(out_dir / img_rel)
        Image.fromarray(scene.mask, "L").save(out_dir / mask_rel)
    except OSError as exc:
        raise DatasetError(f"failed writing item {index} under {out_dir}: {exc}") from exc
    return {"image": img_rel, "mask": mask_rel}


def generate_dataset(cfg, n_items: int, out_dir: str | Path, workers: int = 1) -> DatasetManifest:
    """Write ``n_items`` scenes plus ``manifest.json`` into ``out_dir``.

    Item ``i`` depends only on ``(cfg.seed, i)``, so items can be produced in
    any order or in parallel.
    """
    out = Path(out_dir)
    try:
        (out / "img").mkdir(parents=True, exist_ok=True)
        (out / "mask").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc
    size = cfg.image_size
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            items = list(pool.map(lambda i: _write_item(out, cfg.seed, i, size), range(n_items)))
    else:
        items = [_write_item(out, cfg.seed, i, size) for i in range(n_items)]
    manifest = DatasetManifest(VERSION_TAG, size, n_items, items, int(cfg.seed))
    try:
        (out / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise DatasetError(f"failed writing {out / 'manifest.json'}: {exc}") from exc
    return manifest


def read_manifest(directory: str | Path) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"missing manifest: {path}")
    try:
        raw = json.loads(path.read_text())
        manifest = DatasetManifest(
            version=raw["version"],
            image_size=int(raw["image_size"]),
            count=int(raw["count"]),
            items=list(raw["items"]),
            seed=int(raw["seed"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.version != VERSION_TAG:
        raise DatasetError(f"manifest version {manifest.version!r} != {VERSION_TAG!r}")
    if manifest.count != len(manifest.items):
        raise DatasetError(
            f"manifest count {manifest.count} does not match {len(manifest.items)} listed items"
        )
    return manifest


def _load_png(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DatasetError(f"{path}: expected PNG mode {mode}, got {im.mode}")
            return np.asarray(im).copy()
    except OSError as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc


def load_dataset(directory: str | Path) -> Iterator[ShapeScene]:
    root = Path(directory)
    manifest = read_manifest(root)
    for item in manifest.items:
        image = _load_png(root / item["image"], "RGB").astype(np.float64) / 255
        mask = _load_png(root / item["mask"], "L")
        yield ShapeScene(image=image, mask=mask)


def load_arrays(directory: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Stack a dataset into (N, H, W, 3) float32 images and (N, H, W) int64 masks."""
    scenes = list(load_dataset(directory))
    if not scenes:
        raise DatasetError(f"dataset {directory} is empty")
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    masks = np.stack([s.mask for s in scenes]).astype(np.int64)
    return images, masks
