"""Toy encoder, FCN/FPN decoders, auxiliary heads and the teacher-student bundle."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from decon.config import DECODER_WIDTH, ENCODER_WIDTHS, ExperimentConfig
from decon.rng import torch_seed

STRIDES = (2, 4, 8, 16)


class BatchNorm2d(nn.BatchNorm2d):
    """Batch norm whose running statistics can be frozen while still normalizing
    with batch statistics (used by the EMA teacher, whose statistics are only
    ever written by :func:`ema_update`)."""

    update_stats = True

    def forward(self, x):
        if self.training and not self.update_stats:
            return F.batch_norm(x, None, None, self.weight, self.bias, True, 0.0, self.eps)
        return super().forward(x)


def conv_bn_relu(c_in, c_out, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        BatchNorm2d(c_out),
        nn.ReLU(inplace=False),
    )


class Encoder(nn.Module):
    def __init__(self, widths: Sequence[int] = ENCODER_WIDTHS):
        super().__init__()
        self.widths = tuple(widths)
        stages = []
        c_in = 3
        for w in self.widths:
            stages.append(nn.Sequential(conv_bn_relu(c_in, w, stride=2), conv_bn_relu(w, w)))
            c_in = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FCNDecoder(nn.Module):
    """Two dilated 3x3 blocks on the bottleneck; one output level."""

    kind = "fcn"

    def __init__(self, in_channels: int, width: int = DECODER_WIDTH, dilation: int = 6):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        self.blocks = nn.Sequential(
            conv_bn_relu(in_channels, width, dilation=dilation),
            conv_bn_relu(width, width, dilation=dilation),
        )

    def forward(self, pyramid: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        x = pyramid[-1]
        if x.shape[1] != self.in_channels:
            raise ValueError(f"FCN expects {self.in_channels} input channels, got {x.shape[1]}")
        return [self.blocks(x)]


class FPNDecoder(nn.Module):
    """Lateral 1x1 convs summed top-down with nearest upsampling, 3x3 output conv per level.

    Outputs are ordered bottleneck first (strides 16, 8, 4, 2).
    """

    kind = "fpn"

    def __init__(self, in_widths: Sequence[int] = ENCODER_WIDTHS, width: int = DECODER_WIDTH):
        super().__init__()
        self.in_widths = tuple(in_widths)
        self.width = width
        # index 0 pairs with the bottleneck
        self.laterals = nn.ModuleList(nn.Conv2d(c, width, 1) for c in reversed(self.in_widths))
        self.outputs = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in self.in_widths)

    def forward(self, pyramid: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(pyramid) != len(self.in_widths):
            raise ValueError(f"FPN expects {len(self.in_widths)} levels, got {len(pyramid)}")
        for fmap, c in zip(pyramid, self.in_widths):
            if fmap.shape[1] != c:
                raise ValueError(f"FPN level expects {c} channels, got {fmap.shape[1]}")
        outs = []
        merged = None
        for lateral, out_conv, fmap in zip(self.laterals, self.outputs, reversed(pyramid)):
            lat = lateral(fmap)
            merged = lat if merged is None else lat + F.interpolate(merged, scale_factor=2, mode="nearest")
            outs.append(out_conv(merged))
        return outs


class AuxHead(nn.Module):
    """Projector (+ predictor) applied per position; outputs are unit-norm along channels."""

    def __init__(self, c_in: int, hidden: int, out: int):
        super().__init__()
        self.c_in = c_in
        self.projector = _mlp(c_in, hidden, out)
        self.predictor = _mlp(out, hidden, out)

    def forward(self, fmap: torch.Tensor, use_predictor: bool = False) -> torch.Tensor:
        if fmap.shape[1] != self.c_in:
            raise ValueError(f"aux head expects {self.c_in} channels, got {fmap.shape[1]}")
        z = self.projector(fmap)
        if use_predictor:
            z = self.predictor(z)
        return F.normalize(z, dim=1, eps=1e-12)


def _mlp(c_in, hidden, out):
    return nn.Sequential(
        nn.Conv2d(c_in, hidden, 1, bias=False),
        BatchNorm2d(hidden),
        nn.ReLU(inplace=False),
        nn.Conv2d(hidden, out, 1),
    )


class Network(nn.Module):
    """One branch (student or teacher): encoder, optional decoder, aux heads."""

    def __init__(self, encoder, decoder, enc_head, dec_heads):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.enc_head = enc_head
        self.dec_heads = nn.ModuleList(dec_heads)

    def set_stat_updates(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.update_stats = enabled


class ModelBundle(nn.Module):
    """Student and EMA teacher branches plus per-head prototype banks and centers."""

    def __init__(self, student: Network, teacher: Network, bank_sizes: dict[str, int], proj_out: int,
                 seed: int = 0):
        super().__init__()
        self.student = student
        self.teacher = teacher
        self.teacher.requires_grad_(False)
        self.teacher.set_stat_updates(False)
        self.banks = nn.ParameterDict()
        for name, k in bank_sizes.items():
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(torch_seed(seed, "init", f"bank/{name}"))
                bank = F.normalize(torch.randn(k, proj_out), dim=1)
            self.banks[name] = nn.Parameter(bank)
            self.register_buffer(f"center_{name}", torch.zeros(proj_out))

    @property
    def head_names(self) -> list[str]:
        return ["enc"] + [f"dec{i}" for i in range(len(self.student.dec_heads))]

    def center(self, name: str) -> torch.Tensor:
        return getattr(self, f"center_{name}")

    def teacher_bank(self, name: str) -> torch.Tensor:
        """The bank as seen by teacher targets: shared values, no gradient."""
        return self.banks[name].detach()

    def student_parameters(self):
        yield from self.student.parameters()
        yield from self.banks.parameters()

    @torch.no_grad()
    def normalize_banks(self) -> None:
        for bank in self.banks.values():
            bank.copy_(F.normalize(bank, dim=1, eps=1e-12))


def build_network(cfg: ExperimentConfig, widths=ENCODER_WIDTHS, dec_width=DECODER_WIDTH,
                  seed: int | None = None) -> Network:
    """Student network; every part is initialized from its own seed substream,
    so adding a decoder never changes the encoder's initial weights."""
    seed = cfg.seed if seed is None else seed

    def init(name, factory):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(torch_seed(seed, "init", name))
            return factory()

    encoder = init("encoder", lambda: Encoder(widths))
    enc_head = init("enc_head", lambda: AuxHead(widths[-1], cfg.proj_hidden, cfg.proj_out))
    decoder = None
    dec_heads = []
    if cfg.decoder_kind == "fcn":
        decoder = init("decoder", lambda: FCNDecoder(widths[-1], dec_width))
        n_levels = 1
    elif cfg.decoder_kind == "fpn":
        decoder = init("decoder", lambda: FPNDecoder(widths, dec_width))
        n_levels = cfg.decoder_levels
    else:
        n_levels = 0
    for i in range(n_levels):
        dec_heads.append(init(f"dec_head/{i}", lambda: AuxHead(dec_width, cfg.proj_hidden, cfg.proj_out)))
    return Network(encoder, decoder, enc_head, dec_heads)


def build_bundle(cfg: ExperimentConfig, widths=ENCODER_WIDTHS, dec_width=DECODER_WIDTH,
                 dtype: torch.dtype = torch.float32) -> ModelBundle:
    student = build_network(cfg, widths, dec_width)
    teacher = copy.deepcopy(student)
    banks = {}
    if cfg.objective_kind == "prototype":
        banks["enc"] = cfg.prototypes_enc
        for i in range(len(student.dec_heads)):
            banks[f"dec{i}"] = cfg.prototypes_dec
    bundle = ModelBundle(student, teacher, banks, cfg.proj_out, seed=cfg.seed)
    return bundle.to(dtype)


def encoder_forward(encoder: Encoder, image: torch.Tensor) -> list[torch.Tensor]:
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise ValueError(f"expected a (B, 3, S, S) image batch, got shape {tuple(image.shape)}")
    s = image.shape[-1]
    if image.shape[-2] != s or s % 16 != 0:
        raise ValueError(f"image must be square with side divisible by 16, got {tuple(image.shape[-2:])}")
    return encoder(image)


def fcn_forward(decoder: FCNDecoder, bottleneck: torch.Tensor) -> torch.Tensor:
    return decoder([bottleneck])[0]


def fpn_forward(decoder: FPNDecoder, pyramid: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return decoder(pyramid)


def aux_forward(head: AuxHead, fmap: torch.Tensor, use_predictor: bool) -> torch.Tensor:
    return head(fmap, use_predictor)


def channel_dropout(rng: np.random.Generator, fmap: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    """Zero whole (sample, channel) planes with probability ``p``; scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return fmap
    b, c = fmap.shape[:2]
    keep = rng.uniform(size=(b, c)) >= p
    scale = torch.as_tensor(keep, dtype=fmap.dtype, device=fmap.device) / (1.0 - p)
    return fmap * scale[:, :, None, None]


def _float_state(module: nn.Module):
    for name, t in module.state_dict(keep_vars=True).items():
        if t.is_floating_point():
            yield name, t


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, over parameters and BN statistics."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    s_state = dict(_float_state(student))
    t_state = dict(_float_state(teacher))
    if s_state.keys() != t_state.keys():
        raise ValueError("teacher and student have different parameter sets")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)
