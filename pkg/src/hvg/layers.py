"""Building-block layers: orthogonal init, spectral normalization, ConvGRU,
separable 3D convolution, per-frame conditional batch norm, and the residual
blocks used by generators and discriminators.

Feature tensors keep the video layout [B, T, C, H, W] at block boundaries;
2D convolutions fold time into the batch, 3D convolutions permute to torch's
[B, C, T, H, W] internally. All convolutions are 3x3 (or 3x3x3) with
padding 1 and stride 1 unless noted; spatial resizing happens only through
explicit nearest-neighbor upsampling or 2x average pooling.

Weight matrices are flattened as (out_channels x fan-in) everywhere, both
for orthogonal initialization and for spectral normalization.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .video import _halve_spatial, fold_time, nearest_resize, unfold_time


class MissingStatsError(RuntimeError):
    """Evaluation requested at a timestep with no recorded normalization stats."""


def orthogonal_init(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    """Orthogonal weight of the given shape, flattened as (out x fan-in).

    Rows are orthonormal when out <= fan-in (W W^T = I), columns otherwise.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"degenerate shape {shape}")
    rows = shape[0]
    cols = 1
    for s in shape[1:]:
        cols *= s
    n, m = max(rows, cols), min(rows, cols)
    a = torch.randn(n, m, generator=generator, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    d = torch.diagonal(r)
    q = q * torch.where(d >= 0, 1.0, -1.0)
    if rows < cols:
        q = q.t()
    return q.reshape(shape).to(dtype)


def l2normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / (v.norm() + eps)


def power_iteration_normalize(w: torch.Tensor, u: torch.Tensor, v: torch.Tensor, update: bool = True):
    """Divide w by the power-iteration estimate of its top singular value.

    Returns (w / sigma, u', v'). With update=True the vectors advance one
    iteration; sigma is taken as u^T W v with u, v held constant, so the
    result stays differentiable in w. All-zero w yields sigma clamped to a
    small epsilon and therefore a zero output.
    """
    w2d = w.reshape(w.shape[0], -1)
    if update:
        with torch.no_grad():
            v = l2normalize(w2d.t().mv(u))
            u = l2normalize(w2d.mv(v))
    sigma = torch.dot(u, torch.mv(w2d, v))
    return w / sigma.clamp_min(1e-12), u, v


class SpectralNorm(nn.Module):
    """Wrap a module carrying `weight`, normalizing it by its top singular value.

    The left/right power-iteration vectors persist as buffers and advance once
    per training-mode forward; frozen (eval) forwards reuse them unchanged, so
    repeated frozen calls are bit-identical.
    """

    def __init__(self, module: nn.Module):
        super().__init__()
        w = module.weight
        rows = w.shape[0]
        cols = w.numel() // rows
        del module._parameters["weight"]
        self.module = module
        self.weight_orig = nn.Parameter(w.detach().clone())
        self.register_buffer("weight_u", l2normalize(torch.randn(rows, dtype=w.dtype)))
        self.register_buffer("weight_v", l2normalize(torch.randn(cols, dtype=w.dtype)))
        # One alignment iteration keeps sigma = u^T W v positive from the start
        # (u ends up parallel to W v), so frozen forwards never see a
        # negative estimate clamped to epsilon.
        with torch.no_grad():
            _, u, v = power_iteration_normalize(self.weight_orig, self.weight_u, self.weight_v)
            self.weight_u.copy_(u)
            self.weight_v.copy_(v)
        module.weight = self.weight_orig.detach()

    def normalized_weight(self, update: bool | None = None) -> torch.Tensor:
        update = self.training if update is None else update
        w_n, u, v = power_iteration_normalize(self.weight_orig, self.weight_u, self.weight_v, update)
        if update:
            with torch.no_grad():
                self.weight_u.copy_(u)
                self.weight_v.copy_(v)
        return w_n

    def forward(self, *args, **kwargs):
        self.module.weight = self.normalized_weight()
        return self.module(*args, **kwargs)


def _init_conv(conv: nn.Module, generator=None) -> nn.Module:
    with torch.no_grad():
        conv.weight.copy_(orthogonal_init(conv.weight.shape, generator, conv.weight.dtype))
        if conv.bias is not None:
            conv.bias.zero_()
    return conv


def snconv2d(cin, cout, kernel=3, padding=1, bias=True, spectral=True, generator=None):
    conv = _init_conv(nn.Conv2d(cin, cout, kernel, 1, padding, bias=bias), generator)
    return SpectralNorm(conv) if spectral else conv


def snconv3d(cin, cout, kernel=3, padding=1, bias=True, spectral=True, generator=None):
    conv = _init_conv(nn.Conv3d(cin, cout, kernel, 1, padding, bias=bias), generator)
    return SpectralNorm(conv) if spectral else conv


def snlinear(cin, cout, bias=True, spectral=True, generator=None):
    lin = _init_conv(nn.Linear(cin, cout, bias=bias), generator)
    return SpectralNorm(lin) if spectral else lin


class ConvGRU(nn.Module):
    """Convolutional GRU over a frame sequence with 3x3 gates.

    Update/reset gates use sigmoid; the candidate state uses ReLU:
        z = sigmoid(conv_z([h, x]))     r = sigmoid(conv_r([h, x]))
        hc = relu(conv_h([r * h, x]))   h' = (1 - z) * h + z * hc
    """

    def __init__(self, in_channels: int, hidden_channels: int | None = None, spectral: bool = True):
        super().__init__()
        hidden = in_channels if hidden_channels is None else hidden_channels
        self.hidden_channels = hidden
        self.conv_z = snconv2d(in_channels + hidden, hidden, spectral=spectral)
        self.conv_r = snconv2d(in_channels + hidden, hidden, spectral=spectral)
        self.conv_h = snconv2d(in_channels + hidden, hidden, spectral=spectral)

    def step(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if h.shape[1] != self.hidden_channels:
            raise ValueError(f"hidden state has {h.shape[1]} channels, expected {self.hidden_channels}")
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.conv_z(hx))
        r = torch.sigmoid(self.conv_r(hx))
        cand = torch.relu(self.conv_h(torch.cat([r * h, x], dim=1)))
        return (1.0 - z) * h + z * cand

    def forward(self, v: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
        b, t, c, hh, ww = v.shape
        h = (
            torch.zeros(b, self.hidden_channels, hh, ww, dtype=v.dtype, device=v.device)
            if h0 is None
            else h0
        )
        outs = []
        for i in range(t):
            h = self.step(h, v[:, i])
            outs.append(h)
        return torch.stack(outs, dim=1)


class SeparableConv3d(nn.Module):
    """Temporal 1D conv (kernel 3, zero pad 1) followed by a spatial 3x3 conv."""

    def __init__(self, cin: int, cout: int, spectral: bool = True):
        super().__init__()
        self.temporal = snconv3d(cin, cout, kernel=(3, 1, 1), padding=(1, 0, 0), spectral=spectral)
        self.spatial = snconv3d(cout, cout, kernel=(1, 3, 3), padding=(0, 1, 1), spectral=spectral)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        x = v.permute(0, 2, 1, 3, 4)
        x = self.spatial(self.temporal(x))
        return x.permute(0, 2, 1, 3, 4)


class CondBatchNorm(nn.Module):
    """Batch normalization with per-timestep statistics and condition-projected
    gain/bias.

    Training mode normalizes each (t, c) slice by batch statistics over
    (B, H, W) and updates per-timestep running stats with a fixed-momentum
    moving average (biased variance throughout). Eval mode normalizes by the
    recorded running stats at absolute timesteps t_offset..t_offset+T and
    never mutates them; missing entries raise MissingStatsError (run the
    statistic-recompute pass to extend them). The affine part is
    (1 + gain(cond)) * normalized + bias(cond).
    """

    def __init__(self, num_features: int, cond_dim: int, momentum: float = 0.1,
                 eps: float = 1e-5, spectral: bool = True):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gain = snlinear(cond_dim, num_features, bias=False, spectral=spectral)
        self.bias = snlinear(cond_dim, num_features, bias=False, spectral=spectral)
        self.register_buffer("running_mean", torch.zeros(0, num_features))
        self.register_buffer("running_var", torch.ones(0, num_features))
        self.register_buffer("recorded", torch.zeros(0, dtype=torch.bool))

    def _ensure_capacity(self, t_end: int) -> None:
        cap = self.running_mean.shape[0]
        if t_end <= cap:
            return
        grow = t_end - cap
        opts = dict(dtype=self.running_mean.dtype, device=self.running_mean.device)
        self.running_mean = torch.cat([self.running_mean, torch.zeros(grow, self.num_features, **opts)])
        self.running_var = torch.cat([self.running_var, torch.ones(grow, self.num_features, **opts)])
        self.recorded = torch.cat(
            [self.recorded, torch.zeros(grow, dtype=torch.bool, device=self.recorded.device)]
        )

    def reset_stats(self) -> None:
        self.running_mean = self.running_mean[:0]
        self.running_var = self.running_var[:0]
        self.recorded = self.recorded[:0]

    def forward(self, v: torch.Tensor, cond: torch.Tensor, t_offset: int = 0) -> torch.Tensor:
        b, t, c, h, w = v.shape
        if c != self.num_features:
            raise ValueError(f"expected {self.num_features} channels, got {c}")
        sl = slice(t_offset, t_offset + t)
        if self.training:
            mean = v.mean(dim=(0, 3, 4))
            var = v.var(dim=(0, 3, 4), unbiased=False)
            with torch.no_grad():
                self._ensure_capacity(t_offset + t)
                m = self.momentum
                self.running_mean[sl] = (1 - m) * self.running_mean[sl] + m * mean
                self.running_var[sl] = (1 - m) * self.running_var[sl] + m * var
                self.recorded[sl] = True
        else:
            if self.recorded.shape[0] < t_offset + t or not bool(self.recorded[sl].all()):
                raise MissingStatsError(
                    f"no recorded per-timestep stats for frames [{t_offset}, {t_offset + t}); "
                    "recompute normalization statistics at this horizon first"
                )
            mean = self.running_mean[sl]
            var = self.running_var[sl]
        vhat = (v - mean.view(1, t, c, 1, 1)) / torch.sqrt(var.view(1, t, c, 1, 1) + self.eps)
        g = 1.0 + self.gain(cond).view(b, 1, c, 1, 1)
        return vhat * g + self.bias(cond).view(b, 1, c, 1, 1)

    def stats_state(self) -> dict:
        return {
            "mean": self.running_mean.detach().cpu().tolist(),
            "var": self.running_var.detach().cpu().tolist(),
            "recorded": [bool(x) for x in self.recorded.detach().cpu()],
        }

    def load_stats_state(self, state: dict) -> None:
        opts = dict(dtype=self.running_mean.dtype, device=self.running_mean.device)
        self.running_mean = torch.tensor(state["mean"], **opts).reshape(-1, self.num_features)
        self.running_var = torch.tensor(state["var"], **opts).reshape(-1, self.num_features)
        self.recorded = torch.tensor(state["recorded"], dtype=torch.bool, device=self.recorded.device)


def set_stat_recompute_mode(model: nn.Module) -> None:
    """Eval everywhere except CondBatchNorm, which runs in training mode.

    Used for the test-time statistic recompute and for finite-difference
    gradient checks: batch statistics flow, while spectral-norm vectors stay
    fixed so repeated forwards are consistent.
    """
    model.eval()
    for m in model.modules():
        if isinstance(m, CondBatchNorm):
            m.training = True


def cond_batchnorm_modules(model: nn.Module):
    return [(name, m) for name, m in model.named_modules() if isinstance(m, CondBatchNorm)]


def _conv_frames(conv: nn.Module, v: torch.Tensor) -> torch.Tensor:
    return unfold_time(conv(fold_time(v)), v.shape[0])


class GenBlock2d(nn.Module):
    """Generator residual block: norm-act-(upsample)-conv-norm-act-conv.

    Frames are processed independently (time folded into the batch for the
    convolutions); normalization sees the full clip so statistics stay
    per-frame. The shortcut is nearest-upsampled and 1x1-projected when the
    channel count changes.
    """

    def __init__(self, cin: int, cout: int, cond_dim: int, upsample: bool = False, spectral: bool = True):
        super().__init__()
        self.upsample = upsample
        self.bn1 = CondBatchNorm(cin, cond_dim, spectral=spectral)
        self.conv1 = snconv2d(cin, cout, spectral=spectral)
        self.bn2 = CondBatchNorm(cout, cond_dim, spectral=spectral)
        self.conv2 = snconv2d(cout, cout, spectral=spectral)
        self.proj = (
            snconv2d(cin, cout, kernel=1, padding=0, bias=False, spectral=spectral)
            if cin != cout
            else None
        )

    def _up(self, v: torch.Tensor) -> torch.Tensor:
        return nearest_resize(v, v.shape[-2] * 2, v.shape[-1] * 2)

    def forward(self, v: torch.Tensor, cond: torch.Tensor, t_offset: int = 0) -> torch.Tensor:
        h = torch.relu(self.bn1(v, cond, t_offset))
        if self.upsample:
            h = self._up(h)
        h = _conv_frames(self.conv1, h)
        h = torch.relu(self.bn2(h, cond, t_offset))
        h = _conv_frames(self.conv2, h)
        s = self._up(v) if self.upsample else v
        if self.proj is not None:
            s = _conv_frames(self.proj, s)
        return h + s


class DiscBlock(nn.Module):
    """Discriminator residual block: relu-conv-relu-conv, no normalization.

    Optional 2x spatial average pooling follows the second convolution (the
    shortcut is 1x1-projected when channels change, then pooled). The 3D
    variant uses 3x3x3 convolutions; pooling stays spatial-only.
    """

    def __init__(self, cin: int, cout: int, downsample: bool = False, three_d: bool = False,
                 spectral: bool = True):
        super().__init__()
        self.downsample = downsample
        self.three_d = three_d
        mk = snconv3d if three_d else snconv2d
        self.conv1 = mk(cin, cout, spectral=spectral)
        self.conv2 = mk(cout, cout, spectral=spectral)
        self.proj = (
            mk(cin, cout, kernel=1, padding=0, bias=False, spectral=spectral) if cin != cout else None
        )

    def _conv(self, conv: nn.Module, v: torch.Tensor) -> torch.Tensor:
        if self.three_d:
            return conv(v.permute(0, 2, 1, 3, 4)).permute(0, 2, 1, 3, 4)
        return _conv_frames(conv, v)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        h = self._conv(self.conv1, torch.relu(v))
        h = self._conv(self.conv2, torch.relu(h))
        if self.downsample:
            h = _halve_spatial(h)
        s = v if self.proj is None else self._conv(self.proj, v)
        if self.downsample:
            s = _halve_spatial(s)
        return h + s
