"""Noise schedule, forward diffusion and multi-timestep feature extraction.

The denoiser is only used as a frozen feature source: images are diffused to
a handful of timesteps and the intermediate activations of its four
upsampling stages are collected, three taps per stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

NUM_STAGES = 4
TAPS_PER_STAGE = 3


class ContractError(RuntimeError):
    """A component returned data that violates its declared contract."""


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int
    alpha_bar: np.ndarray  # float64, length num_train_steps + 1, alpha_bar[0] == 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.num_train_steps + 1,):
            raise ValueError(
                f"alpha_bar must have length {self.num_train_steps + 1}, got {ab.shape}"
            )
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)


def build_noise_schedule(
    num_train_steps: int = 1000,
    kind: str = "linear",
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    betas: Sequence[float] | None = None,
) -> NoiseSchedule:
    """Build a cumulative signal-retention table for a discrete schedule.

    ``betas`` overrides the linear ramp when given explicitly, which is handy
    for small hand-checkable schedules.
    """
    if int(num_train_steps) != num_train_steps or num_train_steps < 1:
        raise ValueError(f"num_train_steps must be a positive integer, got {num_train_steps}")
    num_train_steps = int(num_train_steps)
    if betas is not None:
        beta = np.asarray(betas, dtype=np.float64)
        if beta.shape != (num_train_steps,):
            raise ValueError("explicit betas must have length num_train_steps")
    elif kind == "linear":
        if num_train_steps == 1:
            beta = np.array([beta_max], dtype=np.float64)
        else:
            beta = np.linspace(beta_min, beta_max, num_train_steps, dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError("betas must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(num_train_steps, alpha_bar)


def forward_diffuse(x0, t: int, noise, schedule: NoiseSchedule):
    """Return ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise``.

    Works on numpy arrays and torch tensors alike.
    """
    if int(t) != t or not 0 <= t <= schedule.num_train_steps:
        raise ValueError(f"timestep {t} outside [0, {schedule.num_train_steps}]")
    if tuple(x0.shape) != tuple(noise.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs noise {tuple(noise.shape)}")
    abar = float(schedule.alpha_bar[int(t)])
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


@dataclass(frozen=True)
class TimestepPlan:
    T: int
    max_timestep: int
    timesteps: tuple[int, ...]

    def __post_init__(self):
        ts = self.timesteps
        if len(ts) != self.T:
            raise ValueError("plan must hold exactly T timesteps")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timesteps must be strictly increasing")
        if ts and (ts[0] < 1 or ts[-1] > self.max_timestep):
            raise ValueError("timesteps must lie in [1, max_timestep]")

    def check_against(self, schedule: NoiseSchedule) -> None:
        if self.max_timestep > schedule.num_train_steps:
            raise ValueError(
                f"max_timestep {self.max_timestep} exceeds schedule horizon "
                f"{schedule.num_train_steps}"
            )


def sample_timesteps(T: int, max_timestep: int, policy: str = "uniform") -> TimestepPlan:
    if T < 1:
        raise ValueError("T must be >= 1")
    if T > max_timestep:
        raise ValueError(f"cannot place T={T} distinct timesteps in [1, {max_timestep}]")
    if policy != "uniform":
        raise ValueError(f"unknown timestep policy {policy!r}")
    # round half up; spacing max/T >= 1 keeps the values distinct
    ts = tuple(int(math.floor(i * max_timestep / T + 0.5)) for i in range(1, T + 1))
    return TimestepPlan(T, max_timestep, ts)


@dataclass
class DenoiserFeatures:
    """Twelve intermediate maps, ``taps[l][k]`` for stage l and tap k.

    Each map is ``[C, H, W]``, or ``[B, C, H, W]`` when extracted in batch.
    """

    taps: tuple[tuple[torch.Tensor, ...], ...]
    timestep: int

    def validate(self) -> "DenoiserFeatures":
        if len(self.taps) != NUM_STAGES or any(len(s) != TAPS_PER_STAGE for s in self.taps):
            raise ContractError("denoiser must expose 4 stages x 3 taps")
        for l, stage in enumerate(self.taps):
            ndims = {t.dim() for t in stage}
            if len(ndims) != 1 or ndims.pop() not in (3, 4):
                raise ContractError(f"stage {l}: taps must all be 3-D or all 4-D")
            sizes = {tuple(t.shape[-2:]) for t in stage}
            if len(sizes) != 1:
                raise ContractError(f"stage {l}: taps disagree on spatial size {sizes}")
        return self

    def stage_channels(self) -> list[list[int]]:
        return [[int(t.shape[-3]) for t in stage] for stage in self.taps]


class DenoiserInterface(Protocol):
    frozen: bool

    def __call__(self, x_t: torch.Tensor, t: int) -> DenoiserFeatures: ...


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ToyDenoiser(nn.Module):
    """Small fixed-seed UNet-shaped noise predictor used as a frozen feature source.

    The encoder downsamples to 1/32 of the input; the decoder has four
    upsampling stages running at strides 32, 16, 8 and 4, each made of three
    residual blocks whose outputs are the exposed taps. Weights are drawn from
    ``seed`` and never trained.
    """

    def __init__(self, width: int = 16, groups: int = 4, seed: int = 0):
        super().__init__()
        self.width = width
        self.seed = seed
        w = width
        self.stage_widths = (8 * w, 4 * w, 2 * w, w)  # decoder, coarse to fine
        self.temb_dim = 4 * w
        self.temb_mlp = nn.Sequential(
            nn.Linear(w, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim)
        )
        self.stem = nn.Conv2d(3, w, 3, padding=1)
        enc_widths = (w, 2 * w, 4 * w, 8 * w, 8 * w)  # strides 2, 4, 8, 16, 32
        self.down = nn.ModuleList()
        cin = w
        for cout in enc_widths:
            self.down.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
            cin = cout
        self.mid = _ResBlock(cin, cin, self.temb_dim, groups)
        self.up = nn.ModuleList()
        skips = enc_widths[4:0:-1]  # encoder outputs at strides 32, 16, 8, 4
        for stage_w, skip_w in zip(self.stage_widths, skips):
            blocks = nn.ModuleList(
                [
                    _ResBlock(cin + skip_w, stage_w, self.temb_dim, groups),
                    _ResBlock(stage_w, stage_w, self.temb_dim, groups),
                    _ResBlock(stage_w, stage_w, self.temb_dim, groups),
                ]
            )
            self.up.append(blocks)
            cin = stage_w
        self.out = nn.Conv2d(cin, 3, 3, padding=1)

        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                elif p is not None and p.dim() == 1:
                    p.zero_()
            for m in self.modules():
                if isinstance(m, nn.GroupNorm):
                    m.weight.fill_(1.0)
        self.freeze()

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def train(self, mode: bool = True):
        # always stays in eval mode
        return super().train(False)

    def forward_taps(self, x_t: torch.Tensor, t: torch.Tensor):
        """Run the network on a batch; returns (taps, predicted noise)."""
        temb = _timestep_embedding(t, self.width).to(x_t.dtype)
        temb = self.temb_mlp(temb)
        h = self.stem(x_t)
        enc = []
        for conv in self.down:
            h = F.silu(conv(h))
            enc.append(h)
        h = self.mid(h, temb)
        # skip for stage i is the encoder output at the stage's resolution
        skip_feats = enc[4], enc[3], enc[2], enc[1]
        taps = []
        for i, (blocks, skip) in enumerate(zip(self.up, skip_feats)):
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skip], dim=1)
            stage = []
            for blk in blocks:
                h = blk(h, temb)
                stage.append(h)
            taps.append(tuple(stage))
        eps = self.out(F.interpolate(h, scale_factor=4, mode="nearest"))
        return tuple(taps), eps

    @torch.no_grad()
    def __call__(self, x_t: torch.Tensor, t) -> DenoiserFeatures:
        single = x_t.dim() == 3
        xb = x_t[None] if single else x_t
        if not torch.is_tensor(t):
            t_int = int(t)
            t = torch.full((xb.shape[0],), t_int, dtype=torch.long)
        else:
            t_int = int(t.reshape(-1)[0])
        taps, _ = self.forward_taps(xb, t)
        if single:
            taps = tuple(tuple(m[0] for m in stage) for stage in taps)
        return DenoiserFeatures(taps, t_int)

    def tap_channels(self) -> list[list[int]]:
        return [[w, w, w] for w in self.stage_widths]


def extract_multistep_features(
    x0: torch.Tensor,
    plan: TimestepPlan,
    schedule: NoiseSchedule,
    denoiser: DenoiserInterface,
    rng_seed: int,
) -> list[DenoiserFeatures]:
    """Diffuse ``x0`` to every planned timestep and collect denoiser taps.

    Noise is drawn fresh for each timestep from a generator seeded with
    ``rng_seed``, so the result is a pure function of the inputs. ``x0`` may
    be a single ``[3, H, W]`` image or a batch.
    """
    if not getattr(denoiser, "frozen", False):
        raise ContractError("feature extraction requires a frozen denoiser")
    plan.check_against(schedule)
    gen = torch.Generator().manual_seed(int(rng_seed))
    out = []
    for t in plan.timesteps:
        noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        x_t = forward_diffuse(x0, t, noise, schedule)
        feats = denoiser(x_t, t)
        if not isinstance(feats, DenoiserFeatures):
            raise ContractError(f"denoiser returned {type(feats).__name__}, not DenoiserFeatures")
        out.append(feats.validate())
    return out
