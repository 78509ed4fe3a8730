"""First-level and conditional-upsampler video generators.

Both generators stack units of one temporal layer (ConvGRU or separable 3D
convolution, per config) followed by two 2D residual blocks; every unit
except the last doubles the spatial resolution through its first block.
The first level starts from a learned 4x4 seed replicated over time; an
upsampler starts from a 1x1-projected, nearest-resized copy of its
(temporally replicated) condition video and re-injects the condition through
1x1 residual taps after every unit whose resolution does not exceed the
condition's. Noise (and the optional class embedding) reaches the upsampling
levels only through the conditional batch-norm gains and biases.

`first_level_plan` / `upsampler_plan` compute the unit schedules used both to
build the modules and to derive shapes and activation counts analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import (
    CondBatchNorm,
    ConvGRU,
    GenBlock2d,
    SeparableConv3d,
    orthogonal_init,
    snconv2d,
    snlinear,
)
from .video import check_video, fold_time, nearest_resize, replicate_frames, unfold_time

SEED_RES = 4


@dataclass(frozen=True)
class UnitPlan:
    c_in: int
    c_out: int
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    upsample: bool
    tap: bool  # condition residual tap after this unit (upsamplers only)


def first_level_plan(ch: int, mults, out_h: int, out_w: int) -> list[UnitPlan]:
    mults = list(mults)
    units = len(mults)
    if out_h != out_w:
        raise ValueError("first level outputs square frames")
    if units < 1 or SEED_RES * 2 ** (units - 1) != out_h:
        raise ValueError(
            f"{units} units with a {SEED_RES}x{SEED_RES} seed produce "
            f"{SEED_RES * 2 ** (units - 1)}x-; target is {out_h}"
        )
    plans = []
    res = SEED_RES
    c_in = ch * mults[0]
    for i, m in enumerate(mults):
        up = i < units - 1
        r_out = res * 2 if up else res
        plans.append(UnitPlan(c_in, ch * m, res, res, r_out, r_out, up, False))
        c_in = ch * m
        res = r_out
    return plans


def upsampler_plan(ch: int, mults, cond_h: int, cond_w: int, k_s: int) -> list[UnitPlan]:
    mults = list(mults)
    units = len(mults)
    out_h, out_w = cond_h * k_s, cond_w * k_s
    div = 2 ** (units - 1)
    if units < 1 or out_h % div or out_w % div:
        raise ValueError(f"{units} units cannot reach {out_h}x{out_w} by doubling")
    start_h, start_w = out_h // div, out_w // div
    if start_h < 1 or start_w < 1:
        raise ValueError("too many units for the target resolution")
    if start_h > cond_h or start_w > cond_w:
        raise ValueError(
            f"stack entry {start_h}x{start_w} exceeds condition {cond_h}x{cond_w}; "
            "the condition is never upscaled"
        )
    plans = []
    h, w = start_h, start_w
    c_in = ch * mults[0]
    for i, m in enumerate(mults):
        up = i < units - 1
        h_out, w_out = (h * 2, w * 2) if up else (h, w)
        tap = h_out <= cond_h and w_out <= cond_w
        plans.append(UnitPlan(c_in, ch * m, h, w, h_out, w_out, up, tap))
        c_in = ch * m
        h, w = h_out, w_out
    return plans


def latent_condition(z: torch.Tensor, label_embedding: torch.Tensor | None = None) -> torch.Tensor:
    """Condition vector feeding every CondBatchNorm of a level.

    [embed(y) || z] when a class embedding is present, otherwise z alone.
    """
    if label_embedding is None:
        return z
    if label_embedding.shape[0] != z.shape[0]:
        raise ValueError("label embedding and noise batch sizes differ")
    return torch.cat([label_embedding, z], dim=1)


class GenUnit(nn.Module):
    """Temporal layer plus two 2D residual blocks; optional 2x upsample."""

    def __init__(self, plan: UnitPlan, cond_dim: int, temporal_unit: str, spectral: bool = True):
        super().__init__()
        if temporal_unit == "convgru":
            self.temporal = ConvGRU(plan.c_in, spectral=spectral)
        elif temporal_unit == "sep3d":
            self.temporal = SeparableConv3d(plan.c_in, plan.c_in, spectral=spectral)
        else:
            raise ValueError(f"unknown temporal unit kind {temporal_unit!r}")
        self.block1 = GenBlock2d(plan.c_in, plan.c_out, cond_dim, upsample=plan.upsample, spectral=spectral)
        self.block2 = GenBlock2d(plan.c_out, plan.c_out, cond_dim, upsample=False, spectral=spectral)

    def forward(self, v: torch.Tensor, cond: torch.Tensor, t_offset: int = 0) -> torch.Tensor:
        v = self.temporal(v)
        v = self.block1(v, cond, t_offset)
        return self.block2(v, cond, t_offset)


class _OutputHead(nn.Module):
    """norm-relu-conv-tanh head mapping features to RGB in [-1, 1]."""

    def __init__(self, cin: int, cond_dim: int, spectral: bool = True):
        super().__init__()
        self.bn = CondBatchNorm(cin, cond_dim, spectral=spectral)
        self.conv = snconv2d(cin, 3, spectral=spectral)

    def forward(self, v: torch.Tensor, cond: torch.Tensor, t_offset: int = 0) -> torch.Tensor:
        h = torch.relu(self.bn(v, cond, t_offset))
        return torch.tanh(unfold_time(self.conv(fold_time(h)), v.shape[0]))


class FirstLevelGenerator(nn.Module):
    """Unconditional-start generator: seed 4x4 features, replicate over time,
    then temporal/2D units up to the target resolution."""

    def __init__(self, cfg, num_classes: int, spectral: bool = True):
        super().__init__()
        self.cfg = cfg
        self.plans = first_level_plan(cfg.ch, cfg.g_mults, cfg.height, cfg.width)
        self.conditional = cfg.conditional
        self.noise_dim = cfg.noise_dim
        cond_dim = cfg.noise_dim + (cfg.embed_dim if cfg.conditional else 0)
        self.embed = nn.Embedding(num_classes, cfg.embed_dim) if cfg.conditional else None
        if self.embed is not None:
            with torch.no_grad():
                self.embed.weight.copy_(orthogonal_init((num_classes, cfg.embed_dim)))
        c0 = self.plans[0].c_in
        self.seed_fc = snlinear(cond_dim, c0 * SEED_RES * SEED_RES, spectral=spectral)
        self.units = nn.ModuleList(
            GenUnit(p, cond_dim, cfg.temporal_unit, spectral=spectral) for p in self.plans
        )
        self.head = _OutputHead(self.plans[-1].c_out, cond_dim, spectral=spectral)

    def condition(self, z: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
        if self.conditional:
            if y is None:
                raise ValueError("conditional generator requires class labels")
            return latent_condition(z, self.embed(y))
        return latent_condition(z)

    def forward(self, z: torch.Tensor, y: torch.Tensor | None = None, frames: int | None = None,
                t_offset: int = 0) -> torch.Tensor:
        frames = self.cfg.frames if frames is None else frames
        if frames < 1:
            raise ValueError(f"frame count must be >= 1, got {frames}")
        if z.shape[1] != self.noise_dim:
            raise ValueError(f"noise dim {z.shape[1]} != configured {self.noise_dim}")
        cond = self.condition(z, y)
        b = z.shape[0]
        c0 = self.plans[0].c_in
        seed = self.seed_fc(cond).reshape(b, c0, SEED_RES, SEED_RES)
        v = seed.unsqueeze(1).expand(b, frames, c0, SEED_RES, SEED_RES)
        for unit in self.units:
            v = unit(v, cond, t_offset)
        return self.head(v, cond, t_offset)


class UpsamplerGenerator(nn.Module):
    """Conditional generator refining a coarse video by (K_T, K_S).

    The condition is frame-replicated by K_T up front, so every internal
    tensor already has the output frame count; all temporal structure comes
    from the units' temporal convolutions (or ConvGRU).
    """

    def __init__(self, cfg, num_classes: int, cond_h: int, cond_w: int, spectral: bool = True):
        super().__init__()
        self.cfg = cfg
        self.cond_hw = (cond_h, cond_w)
        self.plans = upsampler_plan(cfg.ch, cfg.g_mults, cond_h, cond_w, cfg.k_s)
        self.conditional = cfg.conditional
        self.noise_dim = cfg.noise_dim
        cond_dim = cfg.noise_dim + (cfg.embed_dim if cfg.conditional else 0)
        self.embed = nn.Embedding(num_classes, cfg.embed_dim) if cfg.conditional else None
        if self.embed is not None:
            with torch.no_grad():
                self.embed.weight.copy_(orthogonal_init((num_classes, cfg.embed_dim)))
        self.stem = snconv2d(3, self.plans[0].c_in, kernel=1, padding=0, spectral=spectral)
        self.units = nn.ModuleList(
            GenUnit(p, cond_dim, cfg.temporal_unit, spectral=spectral) for p in self.plans
        )
        self.taps = nn.ModuleList(
            snconv2d(3, p.c_out, kernel=1, padding=0, spectral=spectral) if p.tap else None
            for p in self.plans
        )
        self.head = _OutputHead(self.plans[-1].c_out, cond_dim, spectral=spectral)

    @property
    def temporal_conv_count(self) -> int:
        """Number of temporal 3-kernels; each widens the output-frame
        receptive field by one frame per side. Unbounded for ConvGRU units."""
        if self.cfg.temporal_unit != "sep3d":
            raise ValueError("receptive field is only finite for sep3d units")
        return len(self.plans)

    def condition(self, z: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
        if self.conditional:
            if y is None:
                raise ValueError("conditional generator requires class labels")
            return latent_condition(z, self.embed(y))
        return latent_condition(z)

    def forward(self, x_low: torch.Tensor, z: torch.Tensor, y: torch.Tensor | None = None,
                t_offset: int = 0) -> torch.Tensor:
        check_video(x_low, channels=3)
        if x_low.shape[-2:] != torch.Size(self.cond_hw):
            raise ValueError(
                f"condition is {x_low.shape[-2]}x{x_low.shape[-1]}, "
                f"configured for {self.cond_hw[0]}x{self.cond_hw[1]}"
            )
        if z.shape[1] != self.noise_dim:
            raise ValueError(f"noise dim {z.shape[1]} != configured {self.noise_dim}")
        cond = self.condition(z, y)
        c = replicate_frames(x_low, self.cfg.k_t)
        p0 = self.plans[0]
        v = unfold_time(self.stem(fold_time(nearest_resize(c, p0.h_in, p0.w_in))), c.shape[0])
        for plan, unit, tap in zip(self.plans, self.units, self.taps):
            v = unit(v, cond, t_offset)
            if tap is not None:
                r = nearest_resize(c, plan.h_out, plan.w_out)
                v = v + unfold_time(tap(fold_time(r)), c.shape[0])
        return self.head(v, cond, t_offset)
