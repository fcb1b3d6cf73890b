"""Bottleneck projection and weighted timestep aggregation into a feature pyramid."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import (
    NUM_STAGES,
    DenoiserFeatures,
    NoiseSchedule,
    TimestepPlan,
    ToyDenoiser,
    extract_multistep_features,
)

# A pyramid is a list of 4 tensors, finest first: level l has stride 2**(l+1).
FeaturePyramid = list


class ConfigurationError(ValueError):
    pass


def pyramid_shapes(height: int, width: int, base_channels: int = 256) -> list[tuple[int, int, int]]:
    """Expected ``(C_l, H_l, W_l)`` for levels 1..4 of an ``H x W`` input."""
    return [
        (base_channels * 2 ** (l - 1), height // 2 ** (l + 1), width // 2 ** (l + 1))
        for l in range(1, NUM_STAGES + 1)
    ]


def check_pyramid(pyr: Sequence[torch.Tensor], base_channels: int | None = None) -> None:
    if len(pyr) != NUM_STAGES:
        raise ConfigurationError(f"a pyramid has {NUM_STAGES} levels, got {len(pyr)}")
    for lo, hi in zip(pyr, pyr[1:]):
        if hi.shape[-3] != 2 * lo.shape[-3]:
            raise ConfigurationError("pyramid channels must double between levels")
        if hi.shape[-2] * 2 != lo.shape[-2] or hi.shape[-1] * 2 != lo.shape[-1]:
            raise ConfigurationError("pyramid spatial size must halve between levels")
    if base_channels is not None and pyr[0].shape[-3] != base_channels:
        raise ConfigurationError(f"level 1 must have {base_channels} channels")


class Bottleneck(nn.Module):
    """concat(taps) -> 1x1 reduce -> ReLU -> 1x1 expand -> bilinear resize."""

    def __init__(self, tap_channels: Sequence[int], reduce_channels: int, out_channels: int):
        super().__init__()
        self.tap_channels = tuple(int(c) for c in tap_channels)
        self.reduce = nn.Conv2d(sum(self.tap_channels), reduce_channels, 1)
        self.expand = nn.Conv2d(reduce_channels, out_channels, 1)

    def forward(self, taps: Sequence[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        got = tuple(int(t.shape[-3]) for t in taps)
        if got != self.tap_channels:
            raise ConfigurationError(f"tap widths {got} do not match configured {self.tap_channels}")
        single = taps[0].dim() == 3
        x = torch.cat([t[None] if single else t for t in taps], dim=1)
        x = self.expand(F.relu(self.reduce(x)))
        if tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return x[0] if single else x


class PyramidProjector(nn.Module):
    """One bottleneck per pyramid level, mapping a single timestep's taps to a pyramid.

    Denoiser stages run coarse to fine, so stage ``3 - i`` feeds level ``i``.
    """

    def __init__(self, tap_channels: Sequence[Sequence[int]], reduce_channels: int = 256,
                 base_channels: int = 256):
        super().__init__()
        if len(tap_channels) != NUM_STAGES:
            raise ConfigurationError(f"expected {NUM_STAGES} denoiser stages, got {len(tap_channels)}")
        self.base_channels = base_channels
        self.levels = nn.ModuleList(
            Bottleneck(tap_channels[NUM_STAGES - 1 - i], reduce_channels, base_channels * 2**i)
            for i in range(NUM_STAGES)
        )

    def forward(self, feats: DenoiserFeatures, image_size: tuple[int, int]) -> FeaturePyramid:
        h, w = image_size
        return [
            bott(feats.taps[NUM_STAGES - 1 - i], (h // 2 ** (i + 2), w // 2 ** (i + 2)))
            for i, bott in enumerate(self.levels)
        ]


def project_bottleneck(feats: DenoiserFeatures, params: PyramidProjector,
                       image_size: tuple[int, int]) -> FeaturePyramid:
    feats.validate()
    return params(feats, image_size)


class AggregationWeights(nn.Module):
    def __init__(self, T: int, per_level: bool = False):
        super().__init__()
        shape = (NUM_STAGES, T) if per_level else (T,)
        self.per_level = per_level
        self.logits = nn.Parameter(torch.zeros(shape))

    def normalized(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    def __len__(self) -> int:
        return self.logits.shape[-1]


def aggregate_timesteps(per_step: Sequence[FeaturePyramid], weights) -> FeaturePyramid:
    """Convex combination of per-timestep pyramids with ``softmax(logits)`` weights.

    ``weights`` is an :class:`AggregationWeights` or a raw logits tensor
    (``[T]`` shared, or ``[4, T]`` per level).
    """
    logits = weights.logits if isinstance(weights, AggregationWeights) else weights
    if logits.shape[-1] != len(per_step):
        raise ValueError(f"{len(per_step)} pyramids but {logits.shape[-1]} weights")
    w = torch.softmax(logits, dim=-1)
    out = []
    for lvl in range(len(per_step[0])):
        wl = w[lvl] if w.dim() == 2 else w
        stack = torch.stack([p[lvl] for p in per_step], dim=0)
        if any(p[lvl].shape != per_step[0][lvl].shape for p in per_step):
            raise ValueError(f"level {lvl}: pyramids disagree on shape")
        out.append(torch.tensordot(wl.to(stack.dtype), stack, dims=1))
    return out


class DiffusionBackbone(nn.Module):
    """Frozen denoiser + trainable per-timestep bottlenecks + weighted aggregation."""

    def __init__(self, denoiser: ToyDenoiser, schedule: NoiseSchedule, plan: TimestepPlan,
                 reduce_channels: int = 256, base_channels: int = 256,
                 share_bottleneck: bool = False, per_level_weights: bool = False):
        super().__init__()
        plan.check_against(schedule)
        self.denoiser = denoiser
        self.schedule = schedule
        self.plan = plan
        self.base_channels = base_channels
        n_proj = 1 if share_bottleneck else plan.T
        taps = denoiser.tap_channels()
        self.projectors = nn.ModuleList(
            PyramidProjector(taps, reduce_channels, base_channels) for _ in range(n_proj)
        )
        self.weights = AggregationWeights(plan.T, per_level=per_level_weights)

    def forward(self, images: torch.Tensor, noise_seed: int) -> FeaturePyramid:
        size = tuple(images.shape[-2:])
        # images live in [0, 1]; diffusion operates on data scaled to [-1, 1]
        x0 = images * 2.0 - 1.0
        steps = extract_multistep_features(x0, self.plan, self.schedule, self.denoiser, noise_seed)
        per_step = [
            project_bottleneck(f, self.projectors[i % len(self.projectors)], size)
            for i, f in enumerate(steps)
        ]
        return aggregate_timesteps(per_step, self.weights)
