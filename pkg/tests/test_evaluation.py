import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import MICRO_DEC_WIDTH, MICRO_WIDTHS, micro_config
from decon.data import NUM_CLASSES
from decon.evaluation import (
    ArchitectureMismatch,
    EvalResult,
    build_segmentation_net,
    evaluate_downstream,
    load_eval,
    miou,
    save_eval,
    slot_masks,
    upsample_nearest,
)
from decon.trainer import pretrain


@pytest.fixture(scope="module")
def micro_data():
    from decon.data import scene_for_item

    scenes = [scene_for_item(11, i, 32) for i in range(8)]
    return np.stack([s.image for s in scenes]).astype(np.float32), np.stack([s.mask for s in scenes]).astype(np.int64)


@pytest.fixture(scope="module")
def fpn_ckpt(micro_data, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "fpn.ckpt"
    cfg = micro_config(decoder_kind="fpn", decoder_levels=4, alpha=0.5)
    pretrain(cfg, micro_data[0], out=path, widths=MICRO_WIDTHS, dec_width=MICRO_DEC_WIDTH)
    return path


def test_miou_examples():
    gt = np.array([[0, 1], [2, 3]])
    assert miou(gt, gt, 4) == 1.0
    assert miou(np.ones((3, 3), int), np.full((3, 3), 2), 4) == 0.0
    # confusion counts: TP0=3, TP1=1, gt0->1 twice, gt1->0 once
    gt = np.array([0, 0, 0, 0, 0, 1, 1])
    pred = np.array([0, 0, 0, 1, 1, 0, 1])
    assert miou(pred, gt, 2) == pytest.approx(0.375)


def test_miou_errors():
    with pytest.raises(ValueError):
        miou(np.zeros(3, int), np.zeros(4, int), 2)
    with pytest.raises(ValueError):
        miou(np.zeros(0, int), np.zeros(0, int), 2)
    with pytest.raises(ValueError):
        miou(np.full(3, 5), np.zeros(3, int), 2)


@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_miou_label_permutation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, k, size=(6, 6))
    pred = rng.integers(0, k, size=(6, 6))
    perm = rng.permutation(k)
    value = miou(pred, gt, k)
    assert 0.0 <= value <= 1.0
    assert miou(perm[pred], perm[gt], k) == pytest.approx(value, rel=1e-12)


def test_random_mode_is_deterministic(micro_data):
    images, masks = micro_data
    a = evaluate_downstream(None, "random", images, masks, seeds=[0, 1], steps=3, batch_size=2)
    b = evaluate_downstream(None, "random", images, masks, seeds=[0, 1], steps=3, batch_size=2)
    assert a.miou == b.miou
    assert all(0 <= v <= 1 for v in a.miou)


def test_transfer_loads_teacher_weights(fpn_ckpt):
    from decon.trainer import load_checkpoint

    state = load_checkpoint(fpn_ckpt)
    net = build_segmentation_net(fpn_ckpt, "encoder_decoder", "fpn", seed=0)
    for (k, v), w in zip(state.bundle.teacher.encoder.state_dict().items(), net.encoder.state_dict().values()):
        torch.testing.assert_close(v.to(w.dtype), w, msg=k)
    for (k, v), w in zip(state.bundle.teacher.decoder.state_dict().items(), net.decoder.state_dict().values()):
        torch.testing.assert_close(v.to(w.dtype), w, msg=k)
    enc_only = build_segmentation_net(fpn_ckpt, "encoder", "fcn", seed=0)
    assert enc_only.encoder.widths == MICRO_WIDTHS


def test_encoder_decoder_head_mismatch(fpn_ckpt):
    with pytest.raises(ArchitectureMismatch):
        build_segmentation_net(fpn_ckpt, "encoder_decoder", "fcn", seed=0)
    with pytest.raises(ValueError):
        build_segmentation_net(fpn_ckpt, "decoder", "fpn", seed=0)
    with pytest.raises(ValueError):
        build_segmentation_net(None, "encoder", "fpn", seed=0)


def test_eval_output_shapes(fpn_ckpt, micro_data):
    images, masks = micro_data
    result = evaluate_downstream(fpn_ckpt, "encoder_decoder", images, masks, seeds=[3], head="fpn", steps=2,
                                 batch_size=2)
    assert result.transfer_mode == "encoder_decoder" and len(result.miou) == 1
    net = build_segmentation_net(fpn_ckpt, "encoder", "fpn", seed=0)
    out = net(torch.zeros(2, 3, 32, 32))
    assert out.shape == (2, NUM_CLASSES, 32, 32)


def test_eval_result_round_trip(tmp_path):
    r = EvalResult("encoder", [0, 1, 2], [0.5, 0.6, 0.7], head="fpn", checkpoint="x.ckpt")
    assert r.mean == pytest.approx(0.6) and r.std == pytest.approx(0.1)
    save_eval(r, tmp_path / "e.json")
    back = load_eval(tmp_path / "e.json")
    assert back == r


def test_slot_masks_single_prototype():
    ref, mask = slot_masks(np.random.default_rng(0).normal(size=(3, 4, 4)), np.array([[1.0, 0, 0]]), 16)
    assert ref == 0 and mask.shape == (16, 16) and mask.all()


def test_slot_masks_left_right_halves():
    fmap = np.zeros((2, 4, 4))
    fmap[0, :, :2] = 1.0
    fmap[1, :, 2:] = 1.0
    ref, mask = slot_masks(fmap, np.eye(2), 8)
    expected = np.zeros((8, 8), bool)
    expected[:, :4] = True
    assert ref == 0
    np.testing.assert_array_equal(mask, expected)


def test_slot_masks_all_ties_go_to_first():
    fmap = np.zeros((3, 2, 2))
    fmap[2] = 1.0
    ref, mask = slot_masks(fmap, np.array([[1.0, 0, 0], [0, 1.0, 0]]), 4)
    assert ref == 0 and mask.all()


def test_upsample_nearest_blocks():
    grid = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(upsample_nearest(grid, 4), np.kron(grid, np.ones((2, 2), int)))


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.sampled_from([4, 8, 12]))
def test_prototype_masks_tile_the_image(seed, k, size):
    from decon.evaluation import prototype_assignments

    rng = np.random.default_rng(seed)
    fmap, bank = rng.normal(size=(3, 4, 4)), rng.normal(size=(k, 3))
    full = upsample_nearest(prototype_assignments(fmap, bank), size)
    coverage = sum((full == j).astype(int) for j in range(k))
    assert (coverage == 1).all()
    ref, mask = slot_masks(fmap, bank, size)
    np.testing.assert_array_equal(mask, full == ref)
