"""Full-hierarchy sampling, convolutional unrolling and the test-time
per-timestep normalization-statistic recompute.

Because upsamplers train on temporal crops, their per-timestep running stats
only cover the training window. Before sampling past that horizon, each
level runs a number of "dummy" forward passes (default 200) at the target
length: conditions come from the already-recomputed frozen lower levels and
noise is drawn at the evaluation sigma, so inference needs no data access.
Stats are recomputed level by level in hierarchy order and reset first, so
every timestep's entry comes from the same estimation pass.

Windowed sampling applies an upsampler to one temporal crop of the level-1
output only; its normalization reads the running stats at the crop's
absolute output offset, which is what makes interior frames of windowed and
full runs agree exactly (see the receptive-field helpers below).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .config import ExperimentConfig
from .data import write_hvgt, float_to_u8
from .layers import cond_batchnorm_modules, set_stat_recompute_mode
from .training import FrozenHierarchy, derive_seed
from .video import CropWindow

from PIL import Image


@dataclass
class SampleRun:
    """One sampling request: noise scale, horizon, determinism and recompute."""

    seed: int = 0
    sigma: float = 1.0
    frames_level1: int | None = None
    labels: list[int] | None = None
    batch: int = 4
    passes: int = 200
    recompute_batch: int = 8

    def generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(derive_seed(self.seed, 0x5A3))


def load_hierarchy(exp: ExperimentConfig, out_root) -> FrozenHierarchy:
    return FrozenHierarchy.load(exp, out_root, exp.num_levels)


def stats_cover(generator_module, t_needed: int) -> bool:
    for _, m in cond_batchnorm_modules(generator_module):
        if m.recorded.shape[0] < t_needed or not bool(m.recorded[:t_needed].all()):
            return False
    return True


def recompute_bn_stats(hier: FrozenHierarchy, level_index: int, frames_level1: int,
                       passes: int, sigma: float = 1.0, seed: int = 0, batch: int = 8) -> None:
    """Re-estimate one level's per-timestep stats at the unrolled horizon.

    passes=0 leaves the recorded statistics untouched; otherwise they are
    reset and re-accumulated with the training-time moving-average recurrence
    over `passes` frozen-condition forward passes. Deterministic given seed.
    """
    exp = hier.exp
    if not 1 <= level_index <= len(hier.generators):
        raise ValueError(f"level {level_index} out of range")
    if passes == 0:
        return
    g = hier.generators[level_index - 1]
    gen = torch.Generator().manual_seed(derive_seed(seed, level_index, 0xB57A75))
    cfg = exp.hierarchy[level_index - 1]
    set_stat_recompute_mode(g)
    for _, m in cond_batchnorm_modules(g):
        m.reset_stats()
    sub = FrozenHierarchy(exp, hier.generators[: level_index - 1]) if cfg.role != "first" else None
    try:
        with torch.no_grad():
            for _ in range(passes):
                labels = (
                    torch.randint(exp.dataset.num_classes, (batch,), generator=gen)
                    if cfg.conditional
                    else None
                )
                z = torch.randn(batch, cfg.noise_dim, generator=gen) * sigma
                if cfg.role == "first":
                    g(z, labels, frames=frames_level1)
                else:
                    cond, labels = sub.sample(
                        batch, gen, sigma=sigma, frames_level1=frames_level1, labels=labels
                    )
                    g(cond, z, labels if cfg.conditional else None)
    finally:
        g.eval()


def recompute_all(hier: FrozenHierarchy, frames_level1: int, passes: int,
                  sigma: float = 1.0, seed: int = 0, batch: int = 8) -> None:
    """Recompute stats for every level the horizon requires, in order."""
    shapes = hier.exp.level_full_shapes(frames_level1)
    for lvl in range(1, len(hier.generators) + 1):
        t_out = shapes[lvl - 1][0]
        if not stats_cover(hier.generators[lvl - 1], t_out):
            recompute_bn_stats(hier, lvl, frames_level1, passes, sigma, seed, batch)


def sample_hierarchy(hier: FrozenHierarchy, run: SampleRun):
    """Frozen full-length sampling; every upsampler consumes the entire
    previous output (no temporal cropping). Returns all per-level videos."""
    gen = run.generator()
    labels = torch.tensor(run.labels, dtype=torch.long) if run.labels is not None else None
    videos, labels = hier.sample(
        run.batch, gen, sigma=run.sigma, frames_level1=run.frames_level1,
        labels=labels, return_all=True,
    )
    return videos, labels


def sample_windowed(hier: FrozenHierarchy, run: SampleRun, window: CropWindow):
    """Frozen sampling where the first upsampler sees only `window` of the
    level-1 output; deeper levels consume the windowed result in full.
    Normalization reads stats at the window's absolute output offset."""
    exp = hier.exp
    if len(hier.generators) < 2:
        raise ValueError("windowed sampling needs at least one upsampling level")
    gen = run.generator()
    labels = torch.tensor(run.labels, dtype=torch.long) if run.labels is not None else None
    conditional = exp.hierarchy[0].conditional
    if conditional and labels is None:
        labels = torch.randint(exp.dataset.num_classes, (run.batch,), generator=gen)
    outs = []
    with torch.no_grad():
        g1 = hier.generators[0]
        cfg1 = exp.hierarchy[0]
        z = torch.randn(run.batch, cfg1.noise_dim, generator=gen) * run.sigma
        coarse = g1(z, labels if cfg1.conditional else None, frames=run.frames_level1)
        k_t2 = exp.hierarchy[1].k_t
        window.validate(k_t2, coarse.shape[1], coarse.shape[1] * k_t2)
        v = coarse[:, window.low_start : window.low_start + window.low_len]
        outs.append(v)
        offset = window.high_start
        for i, g in enumerate(hier.generators[1:], start=2):
            cfg = exp.hierarchy[i - 1]
            z = torch.randn(run.batch, cfg.noise_dim, generator=gen) * run.sigma
            v = g(v, z, labels if cfg.conditional else None, t_offset=offset)
            outs.append(v)
            offset *= exp.hierarchy[i].k_t if i < len(exp.hierarchy) else 1
    return outs, labels


def upsampler_receptive_span(n_temporal_convs: int, t_out: int, frame: int) -> tuple[int, int]:
    """Output-frame span [lo, hi] that output `frame` depends on."""
    return max(0, frame - n_temporal_convs), min(t_out - 1, frame + n_temporal_convs)


def interior_frames(n_temporal_convs: int, t_out: int) -> range:
    """Output frames whose full receptive field lies inside a t_out-frame clip."""
    return range(n_temporal_convs, t_out - n_temporal_convs)


def export_samples(out_dir, videos: torch.Tensor, fmt: str = "frames", gif_ms: int = 125) -> list[Path]:
    """Write one directory per sample: PNG frames, HVGT dump and optional GIF."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(videos.shape[0]):
        sdir = out_dir / f"sample_{i:04d}"
        sdir.mkdir(parents=True, exist_ok=True)
        arr = float_to_u8(videos[i])
        if fmt in ("frames", "all"):
            for f in range(arr.shape[0]):
                Image.fromarray(arr[f].transpose(1, 2, 0)).save(sdir / f"frame_{f:05d}.png")
        if fmt in ("gif", "all"):
            frames = [Image.fromarray(arr[f].transpose(1, 2, 0)) for f in range(arr.shape[0])]
            frames[0].save(
                sdir / "sample.gif", save_all=True, append_images=frames[1:],
                duration=gif_ms, loop=0,
            )
        write_hvgt(sdir / "sample.hvgt", arr)
        written.append(sdir)
    return written
