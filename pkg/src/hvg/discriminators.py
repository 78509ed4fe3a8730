"""Spatial, temporal and matching discriminators plus their combined score.

The spatial head scores k randomly sampled full-resolution frames
individually; the temporal head scores spatially halved full-length clips;
the matching head scores (output, condition) pairs after reducing the output
to the condition's shape and concatenating on channels. None of them contain
normalization layers, every weight matrix is spectrally normalized, and each
head ends in ReLU -> global sum pool -> linear. With class labels present,
a projection term <embed(y), pooled features> is added to each score.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .layers import DiscBlock, orthogonal_init, snlinear
from .video import check_video, spatial_downsample, temporal_subsample


class _ProjectionHead(nn.Module):
    """ReLU -> sum pool over (T, H, W) -> linear score (+ label projection)."""

    def __init__(self, features: int, num_classes: int, conditional: bool, spectral: bool = True):
        super().__init__()
        self.linear = snlinear(features, 1, spectral=spectral)
        self.embed = nn.Embedding(num_classes, features) if conditional else None
        if self.embed is not None:
            with torch.no_grad():
                self.embed.weight.copy_(orthogonal_init((num_classes, features)))

    def forward(self, v: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
        feat = torch.relu(v).sum(dim=(1, 3, 4))
        score = self.linear(feat)
        if self.embed is not None:
            if y is None:
                raise ValueError("conditional discriminator requires class labels")
            score = score + (self.embed(y) * feat).sum(dim=1, keepdim=True)
        return score


def _block_stack(cin: int, base: int, mults, height: int, three_d_blocks: int, spectral: bool):
    """DiscBlock stack; blocks pool 2x while the running resolution allows."""
    blocks = []
    c = cin
    res = height
    for i, m in enumerate(mults):
        down = res >= 4
        blocks.append(
            DiscBlock(c, base * m, downsample=down, three_d=i < three_d_blocks, spectral=spectral)
        )
        c = base * m
        if down:
            res //= 2
    return nn.ModuleList(blocks), c


class SpatialDiscriminator(nn.Module):
    """Per-frame 2D critic on k frames sampled without replacement."""

    def __init__(self, cfg, num_classes: int, height: int, spectral: bool = True):
        super().__init__()
        self.k = cfg.spatial_k
        self.blocks, feats = _block_stack(3, cfg.d_base, cfg.d_mults, height, 0, spectral)
        self.head = _ProjectionHead(feats, num_classes, cfg.conditional, spectral)

    def sample_frames(self, batch: int, frames: int, generator: torch.Generator | None) -> torch.Tensor:
        if self.k > frames:
            raise ValueError(f"cannot sample {self.k} frames from a {frames}-frame clip")
        noise = torch.rand(batch, frames, generator=generator)
        return torch.argsort(noise, dim=1)[:, : self.k]

    def forward(self, v: torch.Tensor, y: torch.Tensor | None = None,
                generator: torch.Generator | None = None,
                frame_indices: torch.Tensor | None = None) -> torch.Tensor:
        check_video(v, channels=3)
        b, t = v.shape[0], v.shape[1]
        idx = self.sample_frames(b, t, generator) if frame_indices is None else frame_indices
        k = idx.shape[1]
        gather = idx.reshape(b, k, 1, 1, 1).expand(b, k, *v.shape[2:])
        frames = torch.gather(v, 1, gather).reshape(b * k, 1, *v.shape[2:])
        h = frames
        for block in self.blocks:
            h = block(h)
        y_rep = y.repeat_interleave(k) if y is not None else None
        return self.head(h, y_rep).reshape(b, k)


class ClipDiscriminator(nn.Module):
    """3D-then-2D critic over a full clip (temporal and matching heads).

    The first two blocks are 3D residual blocks; the remainder process frames
    independently. The temporal variant halves the input spatially first; the
    matching variant consumes a channel-concatenated (condition, reduced
    output) pair instead.
    """

    def __init__(self, cfg, num_classes: int, height: int, cin: int = 3,
                 pre_downsample: int = 1, spectral: bool = True):
        super().__init__()
        self.pre_downsample = pre_downsample
        self.blocks, feats = _block_stack(
            cin, cfg.d_base, cfg.d_mults, height // pre_downsample, 2, spectral
        )
        self.head = _ProjectionHead(feats, num_classes, cfg.conditional, spectral)

    def forward(self, v: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        check_video(v)
        h = spatial_downsample(v, self.pre_downsample)
        for block in self.blocks:
            h = block(h)
        return self.head(h, y)


class MatchingDiscriminator(nn.Module):
    """Scores (output, condition) pairs for grounding.

    The output is reduced with the same temporal-subsample + box-downsample
    operators that build the training pyramid, then concatenated with the raw
    condition on channels.
    """

    def __init__(self, cfg, num_classes: int, cond_height: int, spectral: bool = True):
        super().__init__()
        self.k_t, self.k_s = cfg.k_t, cfg.k_s
        self.stack = ClipDiscriminator(cfg, num_classes, cond_height, cin=6, spectral=spectral)

    def forward(self, x_high: torch.Tensor, x_low: torch.Tensor,
                y: torch.Tensor | None = None) -> torch.Tensor:
        check_video(x_high, channels=3)
        check_video(x_low, channels=3)
        th, hh, wh = x_high.shape[1], x_high.shape[3], x_high.shape[4]
        tl, hl, wl = x_low.shape[1], x_low.shape[3], x_low.shape[4]
        if th != tl * self.k_t or hh != hl * self.k_s or wh != wl * self.k_s:
            raise ValueError(
                f"pair shapes irreconcilable: {th}/{hh}x{wh} does not reduce to "
                f"{tl}/{hl}x{wl} under factors ({self.k_t}, {self.k_s})"
            )
        reduced = spatial_downsample(temporal_subsample(x_high, self.k_t), self.k_s)
        return self.stack(torch.cat([x_low, reduced], dim=2), y)


def combined_scores(level_kind: str, spatial: torch.Tensor, temporal: torch.Tensor,
                    matching: torch.Tensor | None = None) -> torch.Tensor:
    """Concatenate per-sample head outputs into one score vector.

    First level: [spatial k || temporal 1]. Upsampling level with a matching
    head: [spatial || temporal || matching].
    """
    if level_kind == "first":
        return torch.cat([spatial, temporal], dim=1)
    if level_kind != "upsampler":
        raise ValueError(f"unknown level kind {level_kind!r}")
    if matching is None:
        return torch.cat([spatial, temporal], dim=1)
    return torch.cat([spatial, temporal, matching], dim=1)


class LevelDiscriminator(nn.Module):
    """Bundles the heads of one hierarchy level behind a single score call."""

    def __init__(self, cfg, num_classes: int, height: int, width: int,
                 cond_height: int | None = None, spectral: bool = True):
        super().__init__()
        if height % 2 or width % 2:
            raise ValueError("discriminator input must be even-sized for the 2x pre-downsample")
        self.role = cfg.role
        self.spatial = SpatialDiscriminator(cfg, num_classes, height, spectral)
        self.temporal = ClipDiscriminator(cfg, num_classes, height, pre_downsample=2, spectral=spectral)
        self.matching = None
        if cfg.role == "upsampler" and cfg.matching_d:
            if cond_height is None:
                raise ValueError("upsampler discriminator needs the condition height")
            self.matching = MatchingDiscriminator(cfg, num_classes, cond_height, spectral)

    @property
    def score_width_per_sample(self) -> int:
        return self.spatial.k + 1 + (1 if self.matching is not None else 0)

    def forward(self, v: torch.Tensor, y: torch.Tensor | None = None,
                x_low: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        s = self.spatial(v, y, generator=generator)
        t = self.temporal(v, y)
        if self.role == "first":
            return combined_scores("first", s, t)
        if self.matching is None:
            return combined_scores("upsampler", s, t)
        if x_low is None:
            raise ValueError("matching head requires the condition video")
        return combined_scores("upsampler", s, t, self.matching(v, x_low, y))
