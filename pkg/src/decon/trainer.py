"""Pre-training loop: SGD on the student, EMA teacher, centers, logging, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from decon.augment import ViewPolicy, make_views
from decon.checkpoint import VERSION, CheckpointBundle, CheckpointError, read_checkpoint, write_checkpoint
from decon.config import DECODER_WIDTH, ENCODER_WIDTHS, ExperimentConfig, validate_config
from decon.models import ModelBundle, build_bundle, ema_update
from decon.objective import LossBreakdown, PrototypeState, ViewBatch, compute_step_loss, update_center
from decon.rng import substream

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "epoch", "lr", "momentum", "l_enc", "l_dec_1", "l_dec_2", "l_dec_3", "l_dec_4",
               "l_dds", "total"]
SGD_MOMENTUM = 0.9
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss at step {breakdown.step}: {breakdown}")
        self.breakdown = breakdown


def momentum_schedule(step: int, total_steps: int, m0: float) -> float:
    """Cosine ramp of the teacher momentum from ``m0`` at step 0 to 1 at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


@dataclass
class TrainState:
    cfg: ExperimentConfig
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    steps_per_epoch: int
    step: int = 0
    epoch: int = 0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    widths: tuple[int, ...] = ENCODER_WIDTHS
    dec_width: int = DECODER_WIDTH

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    @property
    def dtype(self) -> torch.dtype:
        return next(self.bundle.parameters()).dtype


def init_state(cfg: ExperimentConfig, n_items: int, widths=ENCODER_WIDTHS, dec_width=DECODER_WIDTH,
               dtype: torch.dtype = torch.float32) -> TrainState:
    cfg = validate_config(cfg)
    bundle = build_bundle(cfg, widths, dec_width, dtype=dtype)
    # channels_last roughly halves CPU conv time at these widths
    bundle.to(memory_format=torch.channels_last)
    bundle.train()
    optimizer = torch.optim.SGD(list(bundle.student_parameters()), lr=cfg.lr, momentum=SGD_MOMENTUM,
                                weight_decay=cfg.weight_decay)
    rngs = {name: substream(cfg.seed, name) for name in ("augment", "dropout", "order")}
    steps_per_epoch = max(1, math.ceil(n_items / cfg.batch_size))
    return TrainState(cfg, bundle, optimizer, steps_per_epoch, rngs=rngs, widths=tuple(widths),
                      dec_width=dec_width)


def make_view_batch(images: np.ndarray, indices: Sequence[int], rng: np.random.Generator,
                    policy: ViewPolicy, dtype: torch.dtype = torch.float32) -> ViewBatch:
    va, vb, sa, sb = [], [], [], []
    for i in indices:
        a, b, spec_a, spec_b = make_views(images[i], rng, policy)
        va.append(a)
        vb.append(b)
        sa.append(spec_a)
        sb.append(spec_b)

    def to_tensor(views):
        batch = torch.as_tensor(np.stack(views).transpose(0, 3, 1, 2).copy(), dtype=dtype)
        return batch.contiguous(memory_format=torch.channels_last)

    return ViewBatch(to_tensor(va), to_tensor(vb), sa, sb)


def train_step(state: TrainState, views: ViewBatch) -> LossBreakdown:
    """One update: loss, SGD on student and banks, teacher EMA, center EMA."""
    cfg, bundle = state.cfg, state.bundle
    state.optimizer.zero_grad(set_to_none=True)
    out = compute_step_loss(bundle, views, cfg, state.rngs["dropout"])
    breakdown = out.breakdown(cfg.alpha, state.step)
    if not all(math.isfinite(v) for v in [breakdown.total, breakdown.l_enc, *breakdown.l_dec_levels]):
        log.error("non-finite loss, breakdown: %s", breakdown)
        raise NonFiniteLossError(breakdown)
    out.total.backward()
    state.optimizer.step()
    bundle.normalize_banks()
    m = momentum_schedule(min(state.step, state.total_steps), state.total_steps, cfg.ema_m0)
    ema_update(bundle.teacher, bundle.student, m)
    for name, mean in out.teacher_means.items():
        update_center(PrototypeState(bundle.banks[name], bundle.center(name)), mean, cfg.center_momentum)
    state.step += 1
    return breakdown


def _set_lr(state: TrainState) -> float:
    warmup = state.steps_per_epoch
    lr = lr_schedule(state.step, state.total_steps, warmup, state.cfg.lr)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    return lr


def _log_row(state, breakdown, lr, momentum) -> dict:
    row = {"step": breakdown.step, "epoch": state.epoch, "lr": lr, "momentum": momentum}
    row.update(breakdown.as_row())
    return row


def run_epoch(state: TrainState, images: np.ndarray, policy: ViewPolicy, writer=None) -> list[dict]:
    cfg = state.cfg
    order = state.rngs["order"].permutation(len(images))
    rows = []
    for start in range(0, len(images), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        views = make_view_batch(images, batch, state.rngs["augment"], policy, state.dtype)
        lr = _set_lr(state)
        momentum = momentum_schedule(min(state.step, state.total_steps), state.total_steps, cfg.ema_m0)
        breakdown = train_step(state, views)
        row = _log_row(state, breakdown, lr, momentum)
        rows.append(row)
        if writer is not None:
            writer(row)
    state.epoch += 1
    return rows


class _CsvLog:
    def __init__(self, path: Path, keep_until_step: int | None):
        self.path = path
        rows = []
        if keep_until_step is not None and path.exists():
            with path.open(newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) < keep_until_step]
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = path.open("w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=LOG_COLUMNS)
        self.writer.writeheader()
        self.writer.writerows(rows)
        self.fh.flush()

    def __call__(self, row: dict) -> None:
        self.writer.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


def pretrain(cfg: ExperimentConfig, images: np.ndarray, out: str | Path | None = None,
             log_path: str | Path | None = None, resume: str | Path | None = None,
             checkpoint_every: int = 0, policy: ViewPolicy | None = None, widths=ENCODER_WIDTHS,
             dec_width: int = DECODER_WIDTH, dtype: torch.dtype = torch.float32,
             stop_after_epochs: int | None = None) -> tuple[TrainState, list[dict]]:
    """Pre-train on ``images`` (N x S x S x 3 floats in [0, 1]).

    Runs ``cfg.epochs`` epochs of ``ceil(N / batch_size)`` steps with one
    warm-up epoch and cosine learning-rate decay. When ``resume`` is given the
    run continues from that checkpoint's epoch boundary with its RNG state.
    """
    if len(images) == 0:
        raise ValueError("dataset is empty")
    cfg = validate_config(cfg)
    if images.shape[1] != cfg.image_size:
        raise ValueError(f"images are {images.shape[1]}px but config image_size is {cfg.image_size}")
    policy = policy or ViewPolicy(out_size=cfg.image_size)
    if resume is not None:
        state = load_checkpoint(resume, cfg)
    else:
        state = init_state(cfg, len(images), widths, dec_width, dtype)
    writer = _CsvLog(Path(log_path), state.step if resume is not None else None) if log_path else None
    rows: list[dict] = []
    last_epoch = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, stop_after_epochs)
    try:
        while state.epoch < last_epoch:
            rows.extend(run_epoch(state, images, policy, writer))
            if out is not None and checkpoint_every and state.epoch % checkpoint_every == 0 \
                    and state.epoch < cfg.epochs:
                save_checkpoint(state, periodic_checkpoint_path(out, state.epoch))
    finally:
        if writer is not None:
            writer.close()
    if out is not None:
        save_checkpoint(state, out)
    return state, rows


def periodic_checkpoint_path(out: str | Path, epoch: int) -> Path:
    out = Path(out)
    return out.with_name(f"{out.stem}-ep{epoch:04d}{out.suffix}")


def _dtype_name(dtype: torch.dtype) -> str:
    return {v: k for k, v in _DTYPES.items()}[dtype]


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors = {f"model/{k}": v for k, v in state.bundle.state_dict().items()}
    names = {id(p): n for n, p in state.bundle.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                tensors[f"optim/{names[id(p)]}"] = buf
    meta = {
        "version": VERSION,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.config_hash(),
        "epoch": state.epoch,
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "widths": list(state.widths),
        "dec_width": state.dec_width,
        "dtype": _dtype_name(state.dtype),
        "lr": state.optimizer.param_groups[0]["lr"],
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
    }
    write_checkpoint(CheckpointBundle(meta, tensors), path)


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None, strict: bool = False) -> TrainState:
    """Rebuild a :class:`TrainState` from disk.

    A config whose hash differs from the stored one is a warning, or a
    :class:`CheckpointError` when ``strict``.
    """
    ckpt = read_checkpoint(path)
    meta = ckpt.meta
    stored = ExperimentConfig.from_dict(meta["config"])
    if cfg is not None and validate_config(cfg).config_hash() != meta["config_hash"]:
        msg = f"{path}: config hash {validate_config(cfg).config_hash()} != checkpoint {meta['config_hash']}"
        if strict:
            raise CheckpointError(msg)
        warnings.warn(msg, stacklevel=2)
    steps_per_epoch = int(meta["steps_per_epoch"])
    state = init_state(stored, steps_per_epoch * stored.batch_size, tuple(meta["widths"]),
                       int(meta["dec_width"]), _DTYPES[meta["dtype"]])
    state.steps_per_epoch = steps_per_epoch
    model_state = {k[len("model/"):]: v for k, v in ckpt.tensors.items() if k.startswith("model/")}
    state.bundle.load_state_dict(model_state)
    params = dict(state.bundle.named_parameters())
    for key, buf in ckpt.tensors.items():
        if key.startswith("optim/"):
            state.optimizer.state[params[key[len("optim/"):]]]["momentum_buffer"] = buf.clone()
    for group in state.optimizer.param_groups:
        group["lr"] = meta["lr"]
    for name, rng_state in meta["rng"].items():
        state.rngs[name].bit_generator.state = rng_state
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    return state


def read_loss_log(path: str | Path) -> list[dict]:
    """Rows of a loss log with numbers parsed; blank level columns become None."""
    rows = []
    with Path(path).open(newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {k: (None if v == "" else float(v)) for k, v in raw.items()}
            row["step"], row["epoch"] = int(row["step"]), int(row["epoch"])
            rows.append(row)
    return rows
