import json
import math

import numpy as np
import pytest

from decon.config import ExperimentConfig
from decon.data import (
    DatasetError,
    Shape,
    generate_dataset,
    generate_scene,
    load_dataset,
    scene_for_item,
    shape_mask,
)


def test_no_shapes_means_empty_mask(rng):
    scene = generate_scene(rng, 32, 0)
    assert not scene.mask.any()
    assert scene.image.shape == (32, 32, 3)


def test_scene_determinism():
    a = generate_scene(np.random.default_rng(5), 48, 4)
    b = generate_scene(np.random.default_rng(5), 48, 4)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.mask, b.mask)


@pytest.mark.parametrize("size, n", [(8, 1), (32, 9), (32, -1)])
def test_scene_argument_ranges(rng, size, n):
    with pytest.raises(ValueError):
        generate_scene(rng, size, n)


@pytest.mark.parametrize("radius", [4.0, 7.5, 12.0, 20.0])
def test_circle_pixel_count_oracle(radius):
    size = 64
    circle = Shape(1, (size / 2 + 0.3, size / 2 - 0.2), radius, (1.0, 0.0, 0.0))
    count = shape_mask(circle, size).sum()
    assert abs(count - math.pi * radius**2) <= 4 * radius


def test_mask_matches_shapes(rng):
    for _ in range(20):
        scene = generate_scene(rng, 64, int(rng.integers(0, 9)))
        union = np.zeros_like(scene.mask, dtype=bool)
        for s in scene.shapes:
            union |= shape_mask(s, 64)
        assert not (scene.mask.astype(bool) & ~union).any()
        assert scene.mask.max() < 4
        assert scene.image.min() >= 0 and scene.image.max() <= 1


def test_later_shapes_occlude_earlier():
    rng = np.random.default_rng(0)
    scene = generate_scene(rng, 64, 8)
    last = scene.shapes[-1]
    covered = shape_mask(last, 64)
    assert np.all(scene.mask[covered] == last.cls)


def test_foreground_fraction_in_range():
    fractions = [(scene_for_item(11, i, 64).mask > 0).mean() for i in range(256)]
    assert 0.05 <= np.mean(fractions) <= 0.6


def test_generate_and_load_round_trip(tmp_path):
    cfg = ExperimentConfig(image_size=32, seed=9)
    manifest = generate_dataset(cfg, 4, tmp_path)
    assert manifest.count == 4 and len(manifest.items) == 4
    for item in manifest.items:
        assert (tmp_path / item["image"]).exists()
        assert (tmp_path / item["mask"]).exists()
    loaded = list(load_dataset(tmp_path))
    for i, scene in enumerate(loaded):
        ref = scene_for_item(9, i, 32)
        assert np.array_equal(scene.image, ref.image)
        assert np.array_equal(scene.mask, ref.mask)


def test_regeneration_is_byte_identical(tmp_path):
    cfg = ExperimentConfig(image_size=32, seed=2)
    generate_dataset(cfg, 3, tmp_path / "a")
    generate_dataset(cfg, 3, tmp_path / "b", workers=3)
    for i in range(3):
        assert (tmp_path / f"a/mask/{i:04d}.png").read_bytes() == (tmp_path / f"b/mask/{i:04d}.png").read_bytes()


def test_different_seeds_differ():
    masks_a = [scene_for_item(0, i, 32).mask for i in range(16)]
    masks_b = [scene_for_item(1, i, 32).mask for i in range(16)]
    assert any(not np.array_equal(a, b) for a, b in zip(masks_a, masks_b))


def test_missing_file_is_named(tmp_path):
    generate_dataset(ExperimentConfig(image_size=32), 2, tmp_path)
    (tmp_path / "img/0001.png").unlink()
    with pytest.raises(DatasetError, match="0001.png"):
        list(load_dataset(tmp_path))


def test_count_mismatch_rejected(tmp_path):
    generate_dataset(ExperimentConfig(image_size=32), 2, tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    raw["count"] = 3
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(DatasetError, match="count"):
        list(load_dataset(tmp_path))


def test_version_mismatch_and_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        list(load_dataset(tmp_path))
    generate_dataset(ExperimentConfig(image_size=32), 1, tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    raw["version"] = "decon-data-0"
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(DatasetError, match="version"):
        list(load_dataset(tmp_path))
