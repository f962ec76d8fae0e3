"""Downstream segmentation fine-tuning, mIoU and prototype slot masks."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from decon.checkpoint import read_checkpoint
from decon.config import DECODER_WIDTH, ENCODER_WIDTHS
from decon.data import NUM_CLASSES
from decon.models import Encoder, FCNDecoder, FPNDecoder
from decon.rng import torch_seed

log = logging.getLogger(__name__)

TRANSFER_MODES = ("random", "encoder", "encoder_decoder")
# desk-scale fine-tuning budget
FINETUNE_STEPS = 300
FINETUNE_LR = 0.01
FINETUNE_BATCH = 16
TRAIN_FRACTION = 0.75


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class EvalResult:
    transfer_mode: str
    seeds: list[int]
    miou: list[float]
    head: str = "fcn"
    checkpoint: str | None = None
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self) -> None:
        vals = np.asarray(self.miou, dtype=np.float64)
        self.mean = float(vals.mean()) if len(vals) else float("nan")
        self.std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalResult":
        raw = json.loads(text)
        return cls(raw["transfer_mode"], list(raw["seeds"]), list(raw["miou"]), raw.get("head", "fcn"),
                   raw.get("checkpoint"))


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def miou(pred_mask: np.ndarray, gt_mask: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes present in prediction or ground truth."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    if pred_mask.size == 0:
        raise ValueError("empty masks")
    if max(pred_mask.max(), gt_mask.max()) >= num_classes or min(pred_mask.min(), gt_mask.min()) < 0:
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    cm = confusion_matrix(pred_mask, gt_mask, num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    present = union > 0
    return float((tp[present] / union[present]).mean())


class SegmentationNet(nn.Module):
    def __init__(self, head: str = "fcn", widths=ENCODER_WIDTHS, dec_width=DECODER_WIDTH,
                 num_classes: int = NUM_CLASSES):
        super().__init__()
        self.head = head
        self.encoder = Encoder(widths)
        if head == "fcn":
            self.decoder = FCNDecoder(widths[-1], dec_width)
        elif head == "fpn":
            self.decoder = FPNDecoder(widths, dec_width)
        else:
            raise ValueError(f"unknown head {head!r}")
        self.classifier = nn.Conv2d(dec_width, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # last decoder output is the finest level for both heads
        logits = self.classifier(self.decoder(self.encoder(x))[-1])
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


def _branch_state(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def build_segmentation_net(checkpoint, transfer_mode: str, head: str, seed: int) -> SegmentationNet:
    """Fresh network for one fine-tuning seed, initialized per ``transfer_mode``.

    Pre-trained weights come from the teacher (EMA) branch of the checkpoint.
    """
    if transfer_mode not in TRANSFER_MODES:
        raise ValueError(f"transfer mode must be one of {TRANSFER_MODES}, got {transfer_mode!r}")
    widths, dec_width = ENCODER_WIDTHS, DECODER_WIDTH
    ckpt = None
    if transfer_mode != "random":
        if checkpoint is None:
            raise ValueError(f"transfer mode {transfer_mode!r} needs a checkpoint")
        ckpt = read_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
        widths, dec_width = tuple(ckpt.meta["widths"]), int(ckpt.meta["dec_width"])
        if transfer_mode == "encoder_decoder" and ckpt.meta["config"]["decoder_kind"] != head:
            raise ArchitectureMismatch(
                f"checkpoint decoder {ckpt.meta['config']['decoder_kind']!r} does not match eval head {head!r}"
            )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed(seed, "init", f"finetune/{head}"))
        net = SegmentationNet(head, widths, dec_width)
    if ckpt is not None:
        tensors = {k: v.float() for k, v in ckpt.tensors.items()}
        net.encoder.load_state_dict(_branch_state(tensors, "model/teacher.encoder."))
        if transfer_mode == "encoder_decoder":
            net.decoder.load_state_dict(_branch_state(tensors, "model/teacher.decoder."))
    return net


def finetune(net: SegmentationNet, images: np.ndarray, masks: np.ndarray, seed: int,
             steps: int = FINETUNE_STEPS, lr: float = FINETUNE_LR, batch_size: int = FINETUNE_BATCH) -> None:
    rng = np.random.default_rng([seed, 7])
    x_all = torch.as_tensor(images.transpose(0, 3, 1, 2).copy())
    y_all = torch.as_tensor(masks)
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.9, weight_decay=1e-4)
    net.to(memory_format=torch.channels_last)
    net.train()
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(len(images), size=min(batch_size, len(images)), replace=False))
        x = x_all[idx].contiguous(memory_format=torch.channels_last)
        loss = F.cross_entropy(net(x), y_all[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()


@torch.no_grad()
def predict(net: SegmentationNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    net.eval()
    preds = []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start:start + batch_size].transpose(0, 3, 1, 2).copy())
        preds.append(net(x.contiguous(memory_format=torch.channels_last)).argmax(1).numpy())
    return np.concatenate(preds)


def split(n: int, train_fraction: float = TRAIN_FRACTION) -> tuple[slice, slice]:
    cut = max(1, min(n - 1, int(round(n * train_fraction))))
    return slice(0, cut), slice(cut, n)


def evaluate_downstream(checkpoint, transfer_mode: str, images: np.ndarray, masks: np.ndarray,
                        seeds: Sequence[int], head: str = "fcn", steps: int = FINETUNE_STEPS,
                        lr: float = FINETUNE_LR, batch_size: int = FINETUNE_BATCH) -> EvalResult:
    """Fine-tune a segmentation network end to end per seed; report held-out mIoU."""
    if len(images) < 2:
        raise ValueError("need at least two items to split train/held-out")
    train, test = split(len(images))
    if transfer_mode == "random":
        checkpoint = None
    elif isinstance(checkpoint, (str, Path)):
        checkpoint = read_checkpoint(checkpoint)
    scores = []
    for seed in seeds:
        net = build_segmentation_net(checkpoint, transfer_mode, head, seed)
        finetune(net, images[train], masks[train], seed, steps, lr, batch_size)
        pred = predict(net, images[test])
        scores.append(miou(pred, masks[test], NUM_CLASSES))
        log.info("mode=%s seed=%d miou=%.4f", transfer_mode, seed, scores[-1])
    return EvalResult(transfer_mode, list(seeds), scores, head)


def prototype_assignments(feature_map: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Per-position argmax of dot products with the prototypes (ties to the lowest index).

    ``feature_map`` is D x h x w, ``bank`` is K x D; returns h x w ids.
    """
    sims = np.einsum("kd,dhw->khw", bank, feature_map)
    return np.argmax(sims, axis=0)


def slot_masks(feature_map, bank, image_size: int) -> tuple[int, np.ndarray]:
    """Reference prototype (most frequent assignment) and its upsampled binary mask."""
    fmap = np.asarray(feature_map.detach() if isinstance(feature_map, torch.Tensor) else feature_map,
                      dtype=np.float64)
    bank = np.asarray(bank.detach() if isinstance(bank, torch.Tensor) else bank, dtype=np.float64)
    if bank.shape[0] < 1:
        raise ValueError("need at least one prototype")
    assign = prototype_assignments(fmap, bank)
    reference = int(np.argmax(np.bincount(assign.ravel(), minlength=bank.shape[0])))
    full = upsample_nearest(assign, image_size)
    return reference, full == reference


def upsample_nearest(grid: np.ndarray, size: int) -> np.ndarray:
    h, w = grid.shape
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return grid[rows][:, cols]


def save_eval(result: EvalResult, path: str | Path) -> None:
    Path(path).write_text(result.to_json() + "\n")


def load_eval(path: str | Path) -> EvalResult:
    return EvalResult.from_json(Path(path).read_text())
