"""Contrastive objectives and the weighted encoder/decoder combination."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from decon.augment import ViewSpec, correspondence_grid
from decon.config import ExperimentConfig
from decon.models import ModelBundle, channel_dropout

log = logging.getLogger(__name__)

# incremented whenever a (sample, level) pair has no matched positions
diagnostics: Counter = Counter()


@dataclass
class LossBreakdown:
    l_enc: float
    l_dec_levels: list[float]
    l_dds: float
    total: float
    alpha: float
    step: int = 0

    def as_row(self) -> dict[str, float | str]:
        row: dict[str, float | str] = {"l_enc": self.l_enc}
        for i in range(4):
            row[f"l_dec_{i + 1}"] = self.l_dec_levels[i] if i < len(self.l_dec_levels) else ""
        row["l_dds"] = self.l_dds
        row["total"] = self.total
        return row


@dataclass
class PrototypeState:
    bank: torch.Tensor  # K x D, unit rows
    center: torch.Tensor  # D
    teacher_bank: torch.Tensor | None = None  # defaults to a detached view of ``bank``

    def target_bank(self) -> torch.Tensor:
        return self.bank.detach() if self.teacher_bank is None else self.teacher_bank.detach()


def weighted_total(l_enc, l_dec_levels: Sequence, alpha: float):
    """Returns ``(l_dds, total)``; works on floats and tensors alike."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if len(l_dec_levels) == 0:
        return 0.0, l_enc
    l_dds = sum(l_dec_levels[1:], l_dec_levels[0]) / len(l_dec_levels)
    return l_dds, alpha * l_enc + (1.0 - alpha) * l_dds


def combine_losses(l_enc: float, l_dec_levels: Sequence[float], alpha: float, step: int = 0) -> LossBreakdown:
    """Encoder loss weighted by ``alpha`` against the mean decoder-level loss.

    An empty level list means there is no decoder: ``alpha`` is forced to 1.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    levels = [float(v) for v in l_dec_levels]
    if not levels:
        alpha = 1.0
    l_dds, total = weighted_total(float(l_enc), levels, alpha)
    return LossBreakdown(float(l_enc), levels, float(l_dds), float(total), float(alpha), step)


def _flatten(fmap: torch.Tensor) -> torch.Tensor:
    # (B, D, h, w) -> (B, h*w, D)
    return fmap.flatten(2).transpose(1, 2)


def _gather_pairs(student: torch.Tensor, teacher: torch.Tensor, matches: Sequence[np.ndarray]):
    """Stack matched position vectors across the batch.

    Returns (student_vecs, teacher_vecs, sample_index, per_sample_count).
    """
    b, _, h, w = student.shape
    if teacher.shape != student.shape:
        raise ValueError(f"student/teacher map shapes differ: {tuple(student.shape)} vs {tuple(teacher.shape)}")
    if len(matches) != b:
        raise ValueError(f"expected {b} match sets, got {len(matches)}")
    s_flat, t_flat = _flatten(student), _flatten(teacher)
    idx_b, idx_a, idx_t = [], [], []
    counts = []
    for i, m in enumerate(matches):
        m = np.asarray(m, dtype=np.int64).reshape(-1, 2)
        if m.size and (m.max() >= h * w or m.min() < 0):
            raise ValueError(f"match index out of range for a {h}x{w} grid")
        counts.append(len(m))
        idx_b.append(np.full(len(m), i))
        idx_a.append(m[:, 0])
        idx_t.append(m[:, 1])
    ib = torch.as_tensor(np.concatenate(idx_b), dtype=torch.long)
    ia = torch.as_tensor(np.concatenate(idx_a), dtype=torch.long)
    it = torch.as_tensor(np.concatenate(idx_t), dtype=torch.long)
    return s_flat[ib, ia], t_flat[ib, it], ib, counts


def _per_sample_mean(values: torch.Tensor, sample_index: torch.Tensor, counts: list[int]) -> torch.Tensor:
    b = len(counts)
    sums = values.new_zeros(b).index_add(0, sample_index, values)
    denom = torch.as_tensor([max(c, 1) for c in counts], dtype=values.dtype)
    empty = sum(1 for c in counts if c == 0)
    if empty:
        diagnostics["empty_matches"] += empty
        log.debug("%d samples without matched positions", empty)
    return (sums / denom).mean()


def dense_pair_loss(student_pred: torch.Tensor, teacher_proj: torch.Tensor, matches) -> torch.Tensor:
    """Mean of ``2 - 2 <s_a, t_b>`` over matched positions.

    Accepts a single map pair (D, h, w) with one match array, or a batch
    (B, D, h, w) with one match array per sample; batch results average the
    per-sample means, an unmatched sample contributing 0.
    """
    if student_pred.dim() == 3:
        student_pred, teacher_proj, matches = student_pred[None], teacher_proj[None], [matches]
    s, t, ib, counts = _gather_pairs(student_pred, teacher_proj.detach(), matches)
    per_pair = 2.0 - 2.0 * (s * t).sum(dim=1)
    return _per_sample_mean(per_pair, ib, counts)


def soft_cross_entropy(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Row-wise ``-sum softmax(teacher) * log_softmax(student)``; teacher carries no gradient."""
    p_t = F.softmax(teacher_logits.detach(), dim=-1)
    return -(p_t * F.log_softmax(student_logits, dim=-1)).sum(dim=-1)


def prototype_loss(student_proj: torch.Tensor, teacher_proj: torch.Tensor, protos: PrototypeState,
                   matches, temps: tuple[float, float], center_on: bool = True) -> torch.Tensor:
    """Cross-entropy between teacher and student prototype assignments at matched positions.

    ``temps`` is ``(temp_student, temp_teacher)``. The teacher projection has
    the running center subtracted before scoring when ``center_on``.
    """
    temp_s, temp_t = temps
    if temp_s <= 0 or temp_t <= 0:
        raise ValueError("temperatures must be positive")
    if protos.bank.shape[0] < 2:
        raise ValueError("prototype objective needs K >= 2 prototypes")
    if student_proj.dim() == 3:
        student_proj, teacher_proj, matches = student_proj[None], teacher_proj[None], [matches]
    s, t, ib, counts = _gather_pairs(student_proj, teacher_proj.detach(), matches)
    bank = protos.bank
    if center_on:
        t = t - protos.center.detach()
    logits_s = s @ bank.t() / temp_s
    logits_t = t @ protos.target_bank().t() / temp_t
    return _per_sample_mean(soft_cross_entropy(logits_s, logits_t), ib, counts)


@torch.no_grad()
def update_center(state: PrototypeState, batch_mean: torch.Tensor, c_m: float) -> PrototypeState:
    if not 0.0 <= c_m < 1.0:
        raise ValueError(f"center momentum must lie in [0, 1), got {c_m}")
    state.center.mul_(c_m).add_(batch_mean.to(state.center), alpha=1.0 - c_m)
    return state


def prototype_states(bundle: ModelBundle) -> dict[str, PrototypeState]:
    return {name: PrototypeState(bank, bundle.center(name)) for name, bank in bundle.banks.items()}


@dataclass
class ViewBatch:
    """Two augmented views of the same B source images plus their geometry."""

    view_a: torch.Tensor  # B x 3 x S x S
    view_b: torch.Tensor
    specs_a: list[ViewSpec]
    specs_b: list[ViewSpec]
    _cache: dict = field(default_factory=dict, repr=False)

    def swapped(self) -> "ViewBatch":
        return ViewBatch(self.view_b, self.view_a, self.specs_b, self.specs_a)

    def matches(self, grid: int, reverse: bool = False) -> list[np.ndarray]:
        key = (grid, reverse)
        if key not in self._cache:
            pairs = zip(self.specs_b, self.specs_a) if reverse else zip(self.specs_a, self.specs_b)
            self._cache[key] = [correspondence_grid(a, b, grid) for a, b in pairs]
        return self._cache[key]


@dataclass
class StepOutput:
    total: torch.Tensor
    l_enc: torch.Tensor
    l_dec_levels: list[torch.Tensor]
    l_dds: torch.Tensor | float
    teacher_means: dict[str, torch.Tensor]

    def breakdown(self, alpha: float, step: int = 0) -> LossBreakdown:
        levels = [_scalar(v) for v in self.l_dec_levels]
        if not levels:
            alpha = 1.0
        return LossBreakdown(_scalar(self.l_enc), levels, _scalar(self.l_dds), _scalar(self.total), alpha, step)


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _student_pass(bundle, x, cfg, dropout_rng, use_predictor):
    net = bundle.student
    feats = net.encoder(x)
    enc_z = net.enc_head(feats[-1], use_predictor)
    dec_z = []
    if net.decoder is not None:
        # dropout only on the copies entering the decoder; the encoder path stays intact
        dec_in = [channel_dropout(dropout_rng, f, cfg.dropout_p, training=True) for f in feats]
        dec_maps = net.decoder(dec_in)
        dec_z = [head(dec_maps[i], use_predictor) for i, head in enumerate(net.dec_heads)]
    return enc_z, dec_z


@torch.no_grad()
def _teacher_pass(bundle, x):
    net = bundle.teacher
    feats = net.encoder(x)
    enc_z = net.enc_head(feats[-1])
    dec_z = []
    if net.decoder is not None:
        dec_maps = net.decoder(feats)
        dec_z = [head(dec_maps[i]) for i, head in enumerate(net.dec_heads)]
    return enc_z, dec_z


def _pair_loss(cfg, bundle, head, student_z, teacher_z, matches):
    if cfg.objective_kind == "dense_pair":
        return dense_pair_loss(student_z, teacher_z, matches)
    state = PrototypeState(bundle.banks[head], bundle.center(head), bundle.teacher_bank(head))
    return prototype_loss(student_z, teacher_z, state, matches, (cfg.temp_student, cfg.temp_teacher))


def compute_step_loss(bundle: ModelBundle, views: ViewBatch, cfg: ExperimentConfig,
                      dropout_rng: np.random.Generator) -> StepOutput:
    """Symmetrized encoder + deep-supervised decoder loss for one batch of view pairs.

    Call ``.total.backward()`` on the result for gradients; only student
    parameters and prototype banks are part of the graph.
    """
    use_pred = cfg.objective_kind == "dense_pair"
    s_a = _student_pass(bundle, views.view_a, cfg, dropout_rng, use_pred)
    s_b = _student_pass(bundle, views.view_b, cfg, dropout_rng, use_pred)
    t_a = _teacher_pass(bundle, views.view_a)
    t_b = _teacher_pass(bundle, views.view_b)

    def both_directions(head, sa, sb, ta, tb):
        grid = sa.shape[-1]
        ab = _pair_loss(cfg, bundle, head, sa, tb, views.matches(grid))
        ba = _pair_loss(cfg, bundle, head, sb, ta, views.matches(grid, reverse=True))
        return 0.5 * (ab + ba)

    l_enc = both_directions("enc", s_a[0], s_b[0], t_a[0], t_b[0])
    levels = [
        both_directions(f"dec{i}", s_a[1][i], s_b[1][i], t_a[1][i], t_b[1][i])
        for i in range(len(s_a[1]))
    ]
    alpha = cfg.alpha if levels else 1.0
    l_dds, total = weighted_total(l_enc, levels, alpha)

    teacher_means = {}
    if cfg.objective_kind == "prototype":
        heads = [("enc", t_a[0], t_b[0])] + [(f"dec{i}", t_a[1][i], t_b[1][i]) for i in range(len(levels))]
        for name, za, zb in heads:
            z = torch.cat([_flatten(za), _flatten(zb)], dim=1)
            teacher_means[name] = z.mean(dim=(0, 1))
    return StepOutput(total, l_enc, levels, l_dds, teacher_means)

