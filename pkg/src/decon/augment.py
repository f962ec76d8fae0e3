"""Two-view augmentation with tracked crop/flip geometry.

Dense objectives compare a student position in one view with the teacher
position that sees the same image point in the other view, so every view
keeps its :class:`ViewSpec` and :func:`correspondence_grid` recovers the
matching cells at any feature resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv


@dataclass(frozen=True)
class ViewSpec:
    crop: tuple[float, float, float, float]  # (x0, y0, x1, y1), normalized
    hflip: bool = False
    photometric: tuple[float, float, float] = (1.0, 1.0, 0.0)  # brightness, contrast, hue shift
    out_size: int = 64

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.crop
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"invalid crop box {self.crop}")
        if self.out_size < 1:
            raise ValueError("out_size must be positive")


@dataclass(frozen=True)
class ViewPolicy:
    scale: tuple[float, float] = (0.3, 1.0)  # crop area as a fraction of the image
    flip_prob: float = 0.5
    min_iou: float = 0.2
    max_tries: int = 100
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    hue: tuple[float, float] = (-0.5, 0.5)  # full hue wheel: shape classes carry no color signal
    out_size: int = 64

    @classmethod
    def identity(cls, out_size: int = 64) -> "ViewPolicy":
        return cls(scale=(1.0, 1.0), flip_prob=0.0, brightness=(1.0, 1.0),
                   contrast=(1.0, 1.0), hue=(0.0, 0.0), out_size=out_size)

    @property
    def min_area(self) -> float:
        return self.scale[0]


def crop_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _sample_crop(rng: np.random.Generator, policy: ViewPolicy) -> tuple[float, float, float, float]:
    area = rng.uniform(*policy.scale)
    side = min(1.0, math.sqrt(area))
    x0 = rng.uniform(0.0, 1.0 - side) if side < 1.0 else 0.0
    y0 = rng.uniform(0.0, 1.0 - side) if side < 1.0 else 0.0
    return (x0, y0, min(1.0, x0 + side), min(1.0, y0 + side))


def _sample_spec(rng: np.random.Generator, policy: ViewPolicy, crop) -> ViewSpec:
    hflip = bool(rng.uniform() < policy.flip_prob)
    photometric = (
        float(rng.uniform(*policy.brightness)),
        float(rng.uniform(*policy.contrast)),
        float(rng.uniform(*policy.hue)),
    )
    return ViewSpec(crop=crop, hflip=hflip, photometric=photometric, out_size=policy.out_size)


def sample_view_pair(rng: np.random.Generator, policy: ViewPolicy) -> tuple[ViewSpec, ViewSpec]:
    """Draw two views whose crops overlap by at least ``policy.min_iou``.

    After ``max_tries`` rejected draws the most-overlapping pair seen is used.
    """
    best, best_iou = None, -1.0
    for _ in range(policy.max_tries):
        ca, cb = _sample_crop(rng, policy), _sample_crop(rng, policy)
        iou = crop_iou(ca, cb)
        if iou > best_iou:
            best, best_iou = (ca, cb), iou
        if iou >= policy.min_iou:
            break
    ca, cb = best
    return _sample_spec(rng, policy, ca), _sample_spec(rng, policy, cb)


def _bilinear(image: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[None, :, None]
    fy = (py - y0)[:, None, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def photometric(image: np.ndarray, brightness: float, contrast: float, hue: float) -> np.ndarray:
    out = image
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        mean = out.mean()
        out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
        out = hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0)


def apply_view(image: np.ndarray, spec: ViewSpec) -> np.ndarray:
    """Resample the crop of an H x W x 3 image to ``out_size`` square."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = spec.crop
    u = (np.arange(spec.out_size) + 0.5) / spec.out_size
    ux = 1.0 - u if spec.hflip else u
    px = (x0 + ux * (x1 - x0)) * w - 0.5
    py = (y0 + u * (y1 - y0)) * h - 0.5
    if spec.out_size == w and spec.out_size == h and spec.crop == (0.0, 0.0, 1.0, 1.0):
        # exact index map; keeps identity and double flips bit-exact
        view = image[:, ::-1] if spec.hflip else image
        view = np.array(view, copy=True)
    else:
        view = _bilinear(image, px, py)
    return photometric(view, *spec.photometric)


def _to_image(spec: ViewSpec, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = spec.crop
    if spec.hflip:
        u = 1.0 - u
    return x0 + u * (x1 - x0), y0 + v * (y1 - y0)


def _to_view(spec: ViewSpec, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = spec.crop
    u = (x - x0) / (x1 - x0)
    v = (y - y0) / (y1 - y0)
    if spec.hflip:
        u = 1.0 - u
    return u, v


_EPS = 1e-9


def correspondence_grid(spec_a: ViewSpec, spec_b: ViewSpec, grid: int) -> np.ndarray:
    """Matching cells between two views on a ``grid`` x ``grid`` feature map.

    Returns an (M, 2) int array of flat cell indices ``row * grid + col``
    pairing A cells with B cells; each A cell appears at most once.
    """
    if grid < 1:
        raise ValueError("grid must be >= 1")
    centers = (np.arange(grid) + 0.5) / grid
    va, ua = np.meshgrid(centers, centers, indexing="ij")
    x, y = _to_image(spec_a, ua.ravel(), va.ravel())
    ub, vb = _to_view(spec_b, x, y)
    inside = (ub >= -_EPS) & (ub <= 1 + _EPS) & (vb >= -_EPS) & (vb <= 1 + _EPS)
    col = np.clip(np.floor(ub * grid + _EPS), 0, grid - 1).astype(int)
    row = np.clip(np.floor(vb * grid + _EPS), 0, grid - 1).astype(int)
    # distance to the nearest B cell center, in B cell units
    near = (np.abs(ub * grid - (col + 0.5)) <= 0.5 + _EPS) & (np.abs(vb * grid - (row + 0.5)) <= 0.5 + _EPS)
    keep = inside & near
    cell_a = np.flatnonzero(keep)
    cell_b = (row * grid + col)[keep]
    return np.stack([cell_a, cell_b], axis=1).astype(np.int64)


def make_views(image: np.ndarray, rng: np.random.Generator, policy: ViewPolicy):
    spec_a, spec_b = sample_view_pair(rng, policy)
    return apply_view(image, spec_a), apply_view(image, spec_b), spec_a, spec_b
