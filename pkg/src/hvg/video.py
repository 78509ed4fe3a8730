"""Video tensors and the fixed resampling operators shared by every module.

A video is a dense rank-5 float tensor laid out ``[B, T, C, H, W]`` with
values in ``[-1, 1]`` (single videos handled by the dataset code drop the
batch dimension). Every operator below is pure, deterministic and
differentiable. The training pyramid is recomputed with the same functions
when checking crop alignment, so the implementations must stay bit-stable.

Spatial downsampling uses half-pixel-center bilinear weights, which for an
integer factor K reduce to a uniform K x K block average. Power-of-two
factors are evaluated as iterated exact 2x2 pairwise averages
``((a + b) + (c + d)) / 4`` so that constant inputs are preserved bit-exactly
regardless of the backend's reduction order; other integer factors fall back
to a single block average.

Nearest-neighbor resizing maps output index ``i`` to source index
``(i * in_size) // out_size`` on both spatial axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


def check_video(v: torch.Tensor, channels: int | None = None) -> torch.Tensor:
    """Validate the [B, T, C, H, W] layout and return the tensor unchanged."""
    if not isinstance(v, torch.Tensor) or v.ndim != 5:
        shape = tuple(v.shape) if isinstance(v, torch.Tensor) else type(v).__name__
        raise ValueError(f"expected a rank-5 [B, T, C, H, W] video tensor, got {shape}")
    if v.shape[1] < 1:
        raise ValueError("video must contain at least one frame")
    if channels is not None and v.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {v.shape[2]}")
    return v


def fold_time(v: torch.Tensor) -> torch.Tensor:
    """[B, T, C, H, W] -> [B*T, C, H, W] view for per-frame 2D ops."""
    b, t, c, h, w = v.shape
    return v.reshape(b * t, c, h, w)


def unfold_time(x: torch.Tensor, batch: int) -> torch.Tensor:
    """Inverse of fold_time."""
    bt, c, h, w = x.shape
    return x.reshape(batch, bt // batch, c, h, w)


def _halve_spatial(v: torch.Tensor) -> torch.Tensor:
    # Pairwise adds keep K*c exact for equal inputs at every partial sum.
    a = v[..., 0::2, :] + v[..., 1::2, :]
    return (a[..., :, 0::2] + a[..., :, 1::2]) * 0.25


def spatial_downsample(v: torch.Tensor, factor: int) -> torch.Tensor:
    """Box-average spatial downsample by an integer factor."""
    check_video(v)
    if factor < 1:
        raise ValueError(f"spatial factor must be >= 1, got {factor}")
    if factor == 1:
        return v
    h, w = v.shape[-2], v.shape[-1]
    if h % factor or w % factor:
        raise ValueError(
            f"spatial dims {h}x{w} are not divisible by downsample factor {factor}"
        )
    if factor & (factor - 1) == 0:
        out = v
        k = factor
        while k > 1:
            out = _halve_spatial(out)
            k //= 2
        return out
    acc = None
    for i in range(factor):
        for j in range(factor):
            part = v[..., i::factor, j::factor]
            acc = part if acc is None else acc + part
    return acc / float(factor * factor)


def temporal_subsample(v: torch.Tensor, factor: int, phase: int = 0) -> torch.Tensor:
    """Keep frames phase, phase+K, ...; output length ceil((T - phase) / K)."""
    check_video(v)
    if factor < 1:
        raise ValueError(f"temporal factor must be >= 1, got {factor}")
    if not 0 <= phase < factor:
        raise ValueError(f"phase {phase} must lie in [0, {factor})")
    return v[:, phase::factor]


def replicate_frames(v: torch.Tensor, factor: int) -> torch.Tensor:
    """Repeat each frame `factor` times in order (nearest temporal upsample)."""
    check_video(v)
    if factor < 1:
        raise ValueError(f"replication factor must be >= 1, got {factor}")
    if factor == 1:
        return v
    return torch.repeat_interleave(v, factor, dim=1)


def nearest_resize(v: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Nearest-neighbor spatial resize; source index = (i * in) // out."""
    check_video(v)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")
    h, w = v.shape[-2], v.shape[-1]
    if (h, w) == (out_h, out_w):
        return v
    rows = torch.arange(out_h, device=v.device) * h // out_h
    cols = torch.arange(out_w, device=v.device) * w // out_w
    return v.index_select(3, rows).index_select(4, cols)


@dataclass(frozen=True)
class CropWindow:
    """Aligned temporal spans of a (coarse, fine) view pair.

    The fine-side span is locked to the coarse one by the pair's temporal
    factor: high_start = low_start * K_T and high_len = low_len * K_T.
    """

    low_start: int
    low_len: int
    high_start: int
    high_len: int

    @classmethod
    def from_low(cls, low_start: int, low_len: int, k_t: int) -> "CropWindow":
        return cls(low_start, low_len, low_start * k_t, low_len * k_t)

    def validate(self, k_t: int, low_frames: int, high_frames: int) -> None:
        if self.low_len < 1:
            raise ValueError("crop window must cover at least one frame")
        if self.high_start != self.low_start * k_t or self.high_len != self.low_len * k_t:
            raise ValueError(
                f"crop window {self} is misaligned with temporal factor {k_t}"
            )
        if self.low_start < 0 or self.low_start + self.low_len > low_frames:
            raise ValueError(
                f"low window [{self.low_start}, {self.low_start + self.low_len}) "
                f"outside video of {low_frames} frames"
            )
        if self.high_start + self.high_len > high_frames:
            raise ValueError(
                f"high window [{self.high_start}, {self.high_start + self.high_len}) "
                f"outside video of {high_frames} frames"
            )


@dataclass
class PyramidSample:
    """Aligned coarse-to-fine views of a batch of videos.

    views[l] equals spatial_downsample(temporal_subsample(views[l+1],
    temporal_factors[l]), spatial_factors[l]) bit-exactly.
    """

    views: list[torch.Tensor]
    temporal_factors: list[int]
    spatial_factors: list[int]

    @property
    def num_views(self) -> int:
        return len(self.views)


def build_pyramid(v: torch.Tensor, factors) -> PyramidSample:
    """Build coarse-to-fine views from the finest video.

    `factors` lists one (K_T, K_S) pair per adjacent view pair, coarse first.
    Dims must divide exactly at every step; no padding is applied.
    """
    check_video(v)
    views = [v]
    for k_t, k_s in reversed(list(factors)):
        cur = views[0]
        if cur.shape[1] % k_t:
            raise ValueError(
                f"temporal length {cur.shape[1]} not divisible by factor {k_t}"
            )
        views.insert(0, spatial_downsample(temporal_subsample(cur, k_t), k_s))
    return PyramidSample(
        views=views,
        temporal_factors=[int(f[0]) for f in factors],
        spatial_factors=[int(f[1]) for f in factors],
    )


def temporal_crop_pair(p: PyramidSample, level: int, w: CropWindow):
    """Aligned (coarse window, fine window) covering the same wall-clock span.

    `level` indexes the finer view, so level=1 pairs views[0] and views[1].
    """
    if not 1 <= level < p.num_views:
        raise ValueError(f"level {level} out of range for {p.num_views} views")
    low, high = p.views[level - 1], p.views[level]
    w.validate(p.temporal_factors[level - 1], low.shape[1], high.shape[1])
    return (
        low[:, w.low_start : w.low_start + w.low_len],
        high[:, w.high_start : w.high_start + w.high_len],
    )
