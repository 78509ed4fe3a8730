"""Fréchet/IS metrics with a desk-scale trained feature extractor, per-class
scores, radially averaged power spectra, and the activation-accounting
harness for the memory-scaling comparison.

The feature extractor is a small 3D convnet trained to classify the labeled
synthetic dataset; its penultimate activations stand in for FID features and
its logits for FVD features. Absolute metric values are therefore NOT
comparable to numbers produced with any other extractor; only orderings
between models evaluated with the same extractor are meaningful. Every
metrics report carries that caveat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ExperimentConfig
from .generators import SEED_RES, first_level_plan, upsampler_plan
from .inference import SampleRun, sample_hierarchy, sample_windowed
from .training import FrozenHierarchy, derive_seed
from .video import CropWindow, check_video, spatial_downsample, temporal_subsample

NON_COMPARABLE_NOTE = (
    "metrics use a desk-scale trained feature extractor; values are only "
    "comparable across models scored with this same extractor"
)


# -- Frechet distance and inception score -------------------------------------


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need a [N>=2, D] feature matrix")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False), feats.shape[0])


def _psd_sqrt_eigs(mat: np.ndarray, clip: float = -1e-8) -> tuple[np.ndarray, np.ndarray]:
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    if w.min() < clip * max(1.0, abs(w.max())):
        raise ValueError(f"matrix is not PSD within tolerance (min eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None), v


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^{1/2}).

    The matrix square root uses the symmetric form Ca^{1/2} Cb Ca^{1/2}
    (eigendecomposition, negative eigenvalues clipped at -1e-8 relative).
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    wa, va = _psd_sqrt_eigs(a.cov)
    a_sqrt = (va * np.sqrt(wa)) @ va.T
    inner = a_sqrt @ b.cov @ a_sqrt
    wi, _ = _psd_sqrt_eigs(inner)
    diff = a.mean - b.mean
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sum(np.sqrt(wi)))
    return max(val, 0.0)


def inception_score(class_probs: np.ndarray) -> float:
    """exp(mean_n KL(p(y|x_n) || mean marginal)); lies in [1, C]."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected an [N, C] probability matrix")
    if p.min() < 0 or np.abs(p.sum(axis=1) - 1.0).max() > 1e-5:
        raise ValueError("rows must be probability vectors (tolerance 1e-5)")
    marginal = p.mean(axis=0)
    logq = np.log(np.clip(marginal, 1e-300, None))
    kl = np.where(p > 0, p * (np.log(np.clip(p, 1e-300, None)) - logq), 0.0).sum(axis=1)
    return float(np.exp(kl.mean()))


# -- trained feature extractor -------------------------------------------------


class VideoFeatureExtractor(nn.Module):
    """Small 3D-conv classifier; penultimate features + logits for metrics."""

    def __init__(self, num_classes: int, input_hw: int, width: int = 32, feat_dim: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.input_hw = input_hw
        self.net = nn.Sequential(
            nn.Conv3d(3, width, 3, stride=(1, 2, 2), padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(width, width * 2, 3, stride=(1, 2, 2), padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(width * 2, width * 2, 3, stride=(2, 1, 1), padding=1),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(width * 2, feat_dim)
        self.logits = nn.Linear(feat_dim, num_classes)

    def _prep(self, v: torch.Tensor) -> torch.Tensor:
        check_video(v, channels=3)
        h = v.shape[-1]
        if h != self.input_hw:
            if h % self.input_hw:
                raise ValueError(f"input {h}px does not reduce to extractor's {self.input_hw}px")
            v = spatial_downsample(v, h // self.input_hw)
        return v.permute(0, 2, 1, 3, 4)

    def features(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.net(self._prep(v))
        feat = torch.relu(self.fc(self.pool(x).flatten(1)))
        return feat, self.logits(feat)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.features(v)[1]


def train_feature_extractor(videos: torch.Tensor, labels: torch.Tensor, num_classes: int,
                            seed: int = 0, steps: int = 600, batch: int = 32,
                            crop_frames: int = 8, holdout_frac: float = 0.2,
                            lr: float = 1e-3):
    """Train the classifier on random temporal crops; returns (model, holdout acc).

    Accuracy must exceed 0.95 before the Fréchet/IS numbers mean anything;
    callers are expected to assert that.
    """
    check_video(videos, channels=3)
    n, t = videos.shape[0], videos.shape[1]
    if crop_frames > t:
        raise ValueError(f"crop of {crop_frames} frames exceeds videos of {t}")
    gen = torch.Generator().manual_seed(derive_seed(seed, 0xFEA7))
    torch.manual_seed(derive_seed(seed, 0xFEA8))
    model = VideoFeatureExtractor(num_classes, input_hw=videos.shape[-1])
    order = torch.randperm(n, generator=gen)
    n_hold = max(1, int(n * holdout_frac))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    model.train()
    for _ in range(steps):
        idx = train_idx[torch.randint(len(train_idx), (batch,), generator=gen)]
        start = int(torch.randint(t - crop_frames + 1, (1,), generator=gen))
        clips = videos[idx, start : start + crop_frames]
        loss = loss_fn(model(clips), labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        correct = 0
        for i in range(0, len(hold_idx), batch):
            idx = hold_idx[i : i + batch]
            mid = (t - crop_frames) // 2
            pred = model(videos[idx, mid : mid + crop_frames]).argmax(dim=1)
            correct += int((pred == labels[idx]).sum())
    return model, correct / len(hold_idx)


def video_features(model: VideoFeatureExtractor, videos: torch.Tensor, batch: int = 32):
    """(penultimate features, logits) as float64 numpy arrays."""
    model.eval()
    feats, logits = [], []
    with torch.no_grad():
        for i in range(0, videos.shape[0], batch):
            f, lg = model.features(videos[i : i + batch])
            feats.append(f.double().numpy())
            logits.append(lg.double().numpy())
    return np.concatenate(feats), np.concatenate(logits)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- generator evaluation --------------------------------------------------------


def _real_clips(view: torch.Tensor, t_eval: int, n: int, generator: torch.Generator):
    total, t = view.shape[0], view.shape[1]
    if t_eval > t:
        raise ValueError(f"requested {t_eval} frames from {t}-frame views")
    idx = torch.randint(total, (n,), generator=generator)
    starts = torch.randint(t - t_eval + 1, (n,), generator=generator)
    clips = torch.stack([view[i, s : s + t_eval] for i, s in zip(idx.tolist(), starts.tolist())])
    return clips, idx


def _generate(hier: FrozenHierarchy, mode: str, n: int, sigma: float, seed: int,
              batch: int = 32):
    exp = hier.exp
    first = exp.hierarchy[0]
    videos, labels = [], []
    for i in range(0, n, batch):
        b = min(batch, n - i)
        run = SampleRun(seed=derive_seed(seed, i, 0x9E), sigma=sigma, batch=b)
        if mode == "full":
            outs, y = sample_hierarchy(hier, run)
        elif mode == "window":
            w = exp.hierarchy[1].window
            gen = torch.Generator().manual_seed(derive_seed(seed, i, 0x11))
            start = int(torch.randint(first.frames - w + 1, (1,), generator=gen))
            outs, y = sample_windowed(
                hier, run, CropWindow.from_low(start, w, exp.hierarchy[1].k_t)
            )
        else:
            raise ValueError(f"unknown eval mode {mode!r}")
        videos.append(outs[-1])
        labels.append(y if y is not None else torch.zeros(b, dtype=torch.long))
    return torch.cat(videos), torch.cat(labels)


def evaluate_generator(hier: FrozenHierarchy, data_view: torch.Tensor,
                       data_labels: torch.Tensor, extractor: VideoFeatureExtractor,
                       n_samples: int, modes=("window", "full"), sigma: float = 1.0,
                       seed: int = 0, per_class: bool = False) -> dict:
    """Fréchet (features and logits), IS and optional per-class scores.

    `data_view` is the pyramid view at the hierarchy's finest level, full
    length; real clips are contiguous random crops matching each mode's
    output length.
    """
    report: dict = {"note": NON_COMPARABLE_NOTE, "n_samples": n_samples, "modes": {}}
    for mode in modes:
        fake, fake_labels = _generate(hier, mode, n_samples, sigma, seed)
        gen = torch.Generator().manual_seed(derive_seed(seed, 0xDA7A))
        real, real_idx = _real_clips(data_view, fake.shape[1], n_samples, gen)
        real_labels = data_labels[real_idx]
        f_fake, l_fake = video_features(extractor, fake)
        f_real, l_real = video_features(extractor, real)
        entry = {
            "frames": int(fake.shape[1]),
            "fid_like": frechet_distance(
                GaussianStats.from_features(f_real), GaussianStats.from_features(f_fake)
            ),
            "fvd_like": frechet_distance(
                GaussianStats.from_features(l_real), GaussianStats.from_features(l_fake)
            ),
            "is_score": inception_score(_softmax(l_fake)),
        }
        if per_class:
            per = {}
            for c in sorted(set(fake_labels.tolist())):
                fm = (fake_labels == c).numpy()
                rm = (real_labels == c).numpy()
                if fm.sum() < 2 or rm.sum() < 2:
                    continue
                per[str(c)] = {
                    "n": int(fm.sum()),
                    "is_score": inception_score(_softmax(l_fake[fm])),
                    "fid_like": frechet_distance(
                        GaussianStats.from_features(f_real[rm]),
                        GaussianStats.from_features(f_fake[fm]),
                    ),
                }
            entry["per_class"] = per
        report["modes"][mode] = entry
    return report


def grounding_error(hier: FrozenHierarchy, n_samples: int, sigma: float = 1.0,
                    seed: int = 0, batch: int = 32) -> float:
    """Mean squared error between the reduced refined output and its condition.

    Measures how well an upsampling level stays grounded: the level-2 output
    is pulled back through the pyramid operators and compared to the level-1
    window it was conditioned on.
    """
    exp = hier.exp
    cfg = exp.hierarchy[1]
    total, count = 0.0, 0
    for i in range(0, n_samples, batch):
        b = min(batch, n_samples - i)
        run = SampleRun(seed=derive_seed(seed, i, 0x96D), sigma=sigma, batch=b)
        gen = torch.Generator().manual_seed(derive_seed(seed, i, 0x96E))
        start = int(
            torch.randint(exp.hierarchy[0].frames - cfg.window + 1, (1,), generator=gen)
        )
        outs, _ = sample_windowed(hier, run, CropWindow.from_low(start, cfg.window, cfg.k_t))
        cond, refined = outs[0], outs[1]
        reduced = spatial_downsample(temporal_subsample(refined, cfg.k_t), cfg.k_s)
        total += float(((reduced - cond) ** 2).mean()) * b
        count += b
    return total / count


# -- radially averaged power spectra ---------------------------------------------


def radial_power_spectrum(frame: np.ndarray) -> np.ndarray:
    """Sum of |DFT|^2 over integer-radius bins (bin r owns [r-0.5, r+0.5)).

    Conserves energy exactly: the bin sums add up to the total spectral power.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.shape[0] != frame.shape[1]:
        raise ValueError(f"expected a square 2D frame, got {frame.shape}")
    n = frame.shape[0]
    power = np.abs(np.fft.fft2(frame)) ** 2
    freqs = np.fft.fftfreq(n, d=1.0 / n)
    r = np.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)
    bins = np.floor(r + 0.5).astype(np.int64)
    return np.bincount(bins.ravel(), weights=power.ravel(), minlength=int(bins.max()) + 1)


def to_grayscale(frames: torch.Tensor) -> np.ndarray:
    """[..., C, H, W] -> [..., H, W] by channel mean."""
    return frames.detach().cpu().numpy().mean(axis=-3)


def radial_psd(videos: torch.Tensor, frame_indices, groups: int = 3) -> dict:
    """Mean and across-group std of the radially binned power per frame index.

    Videos are split into `groups` contiguous groups; the per-group curve is
    the mean spectrum over that group's videos, the reported std is the
    sample std (ddof=1) across groups.
    """
    check_video(videos)
    n, t = videos.shape[0], videos.shape[1]
    if n < groups * 2:
        raise ValueError(f"need at least {groups * 2} videos for {groups} groups")
    out = {}
    bounds = np.linspace(0, n, groups + 1, dtype=int)
    for fi in frame_indices:
        if not 0 <= fi < t:
            raise ValueError(f"frame index {fi} out of range for {t}-frame videos")
        gray = to_grayscale(videos[:, fi])
        curves = []
        for gi in range(groups):
            chunk = gray[bounds[gi] : bounds[gi + 1]]
            curves.append(np.mean([radial_power_spectrum(f) for f in chunk], axis=0))
        curves = np.stack(curves)
        out[int(fi)] = {
            "bins": np.arange(curves.shape[1]),
            "mean": curves.mean(axis=0),
            "std": curves.std(axis=0, ddof=1),
        }
    return out


def psd_band_coverage(data_curves: dict, gen_curves: dict, frame_index: int,
                      n_std: float = 3.0) -> float:
    """Fraction of frequency bins where the generated mean PSD lies inside
    the data mean +- n_std band."""
    d = data_curves[frame_index]
    g = gen_curves[frame_index]
    lo = d["mean"] - n_std * d["std"]
    hi = d["mean"] + n_std * d["std"]
    inside = (g["mean"] >= lo) & (g["mean"] <= hi)
    return float(inside.mean())


# -- activation accounting ---------------------------------------------------------


def _gen_block_elements(c_in: int, c_out: int, h_in: int, w_in: int, h_out: int, w_out: int,
                        upsample: bool, projected: bool) -> int:
    """Stored tensors of one 2D generator block, per frame (ReLUs fold in place)."""
    total = c_in * h_in * w_in          # first normalization output
    if upsample:
        total += c_in * h_out * w_out   # nearest-upsampled tensor
    total += c_out * h_out * w_out      # conv1
    total += c_out * h_out * w_out      # second normalization
    total += c_out * h_out * w_out      # conv2
    if upsample:
        total += c_in * h_out * w_out   # upsampled shortcut
    if projected:
        total += c_out * h_out * w_out  # shortcut projection
    total += c_out * h_out * w_out      # residual sum
    return total


def _temporal_unit_elements(kind: str, channels: int, h: int, w: int) -> int:
    """Per-frame stored tensors of the temporal layer."""
    if kind == "convgru":
        return 4 * channels * h * w  # z, r, candidate, new state
    if kind == "sep3d":
        return 2 * channels * h * w  # temporal conv out, spatial conv out
    raise ValueError(f"unknown temporal unit kind {kind!r}")


def generator_activation_elements(cfg, frames: int, cond_hw: tuple[int, int] | None = None) -> int:
    """Stored-activation element count of one level's generator forward, per
    sample, at the given output frame count.

    Counts every materialized intermediate; the first level is exactly
    proportional to its frame count, an upsampler depends only on its fixed
    window. The discriminators are excluded: the spatial head consumes a
    fixed number of sampled frames, and the comparison of interest is the
    generated-activation footprint as the horizon grows.
    """
    if cfg.role == "first":
        plans = first_level_plan(cfg.ch, cfg.g_mults, cfg.height, cfg.width)
        total = plans[0].c_in * SEED_RES * SEED_RES  # replicated seed, per frame
        t = frames
    else:
        if cond_hw is None:
            raise ValueError("upsampler accounting needs the condition resolution")
        plans = upsampler_plan(cfg.ch, cfg.g_mults, cond_hw[0], cond_hw[1], cfg.k_s)
        t = cfg.window * cfg.k_t
        total = 3 * cond_hw[0] * cond_hw[1]            # replicated condition, per frame
        total += 3 * plans[0].h_in * plans[0].w_in     # resized condition at the stem
        total += plans[0].c_in * plans[0].h_in * plans[0].w_in  # stem projection
    for p in plans:
        total += _temporal_unit_elements(cfg.temporal_unit, p.c_in, p.h_in, p.w_in)
        total += _gen_block_elements(p.c_in, p.c_out, p.h_in, p.w_in, p.h_out, p.w_out,
                                     p.upsample, p.c_in != p.c_out)
        total += _gen_block_elements(p.c_out, p.c_out, p.h_out, p.w_out, p.h_out, p.w_out,
                                     False, False)
        if p.tap:
            total += 3 * p.h_out * p.w_out      # resized condition at the tap
            total += p.c_out * p.h_out * p.w_out  # tap projection
            total += p.c_out * p.h_out * p.w_out  # tap sum
    last = plans[-1]
    total += last.c_out * last.h_out * last.w_out  # head normalization
    total += 2 * 3 * last.h_out * last.w_out       # head conv + tanh
    return total * t


def activation_accounting(exp: ExperimentConfig, t_totals) -> list[dict]:
    """Per-level activation element counts and the end-to-end comparison.

    T_total is the finest-level output length; level 1 runs at
    T_total / prod(K_T) while the upsamplers keep their fixed windows.
    """
    rows = []
    k_prod = 1
    for lvl in exp.hierarchy[1:]:
        k_prod *= lvl.k_t
    shapes = exp.level_train_shapes()
    for t_total in t_totals:
        if t_total % k_prod:
            raise ValueError(f"T_total={t_total} not divisible by the K_T product {k_prod}")
        t1 = t_total // k_prod
        per_level = []
        for i, cfg in enumerate(exp.hierarchy):
            cond_hw = (shapes[i - 1][1], shapes[i - 1][2]) if i else None
            frames = t1 if cfg.role == "first" else cfg.window * cfg.k_t
            per_level.append(generator_activation_elements(cfg, frames, cond_hw))
        row = {
            "t_total": int(t_total),
            "levels": per_level,
            "hierarchy_total": int(sum(per_level)),
        }
        if exp.end_to_end is not None:
            row["end_to_end"] = generator_activation_elements(exp.end_to_end, t_total)
            row["ratio"] = row["end_to_end"] / row["hierarchy_total"]
        rows.append(row)
    return rows


def scaling_crossover(exp: ExperimentConfig, t_max: int = 4096) -> int | None:
    """Smallest feasible T_total where the hierarchy is cheaper end to end."""
    k_prod = 1
    for lvl in exp.hierarchy[1:]:
        k_prod *= lvl.k_t
    for t in range(k_prod, t_max + 1, k_prod):
        row = activation_accounting(exp, [t])[0]
        if "end_to_end" in row and row["hierarchy_total"] < row["end_to_end"]:
            return t
    return None
