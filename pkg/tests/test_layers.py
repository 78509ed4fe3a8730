import numpy as np
import pytest
import torch

from hvg.layers import (
    CondBatchNorm,
    ConvGRU,
    DiscBlock,
    GenBlock2d,
    MissingStatsError,
    SeparableConv3d,
    SpectralNorm,
    l2normalize,
    orthogonal_init,
    power_iteration_normalize,
    set_stat_recompute_mode,
    snconv2d,
    snlinear,
)

# ---------------------------------------------------------------- oracles


def loop_conv2d(x, w, b=None, pad=1):
    """Dense python-loop 2D convolution oracle (stride 1)."""
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    bs, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    out = np.zeros((bs, cout, h - kh + 1, ww - kw + 1))
    for n in range(bs):
        for o in range(cout):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    out[n, o, i, j] = (x[n, :, i : i + kh, j : j + kw] * w[o]).sum()
            if b is not None:
                out[n, o] += b[o]
    return out


def loop_conv_temporal(x, w, b=None):
    """[B, C, T, H, W] temporal size-3 conv oracle, zero pad 1."""
    x = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0), (0, 0)))
    bs, cin, t, h, ww = x.shape
    cout = w.shape[0]
    out = np.zeros((bs, cout, t - 2, h, ww))
    for n in range(bs):
        for o in range(cout):
            for i in range(t - 2):
                out[n, o, i] = sum(
                    (x[n, c, i : i + 3] * w[o, c, :, 0, 0, None, None]).sum(axis=0)
                    for c in range(cin)
                )
                if b is not None:
                    out[n, o, i] += b[o]
    return out


def fd_gradient(fn, x, eps=1e-6):
    """Central finite differences of a scalar function wrt x (float64)."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_gradients(module, inputs, wrt_input=0, rtol=1e-4):
    """Analytic grads vs central differences on a random-projected scalar loss."""
    module = module.double()
    inputs = [x.double() for x in inputs]
    gen = torch.Generator().manual_seed(123)

    def run():
        out = module(*inputs)
        return (out * proj).sum()

    with torch.no_grad():
        proj = torch.randn(module(*inputs).shape, generator=gen, dtype=torch.float64)

    x = inputs[wrt_input].requires_grad_(True)
    loss = run()
    params = [p for p in module.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [x] + params)
    targets = [x] + params
    # Floor the denominator at a fraction of the overall gradient scale so
    # that exactly-zero gradients (e.g. a conv bias absorbed by the following
    # batch norm) compare by absolute error instead of noise ratios.
    scale = max(max(g.norm().item() for g in grads), 1.0)
    with torch.no_grad():
        for target, analytic in zip(targets, grads):
            numeric = fd_gradient(lambda: run().item(), target.data)
            denom = max(analytic.norm().item(), numeric.norm().item(), 1e-6 * scale)
            rel = (analytic - numeric).norm().item() / denom
            assert rel <= rtol, f"gradient mismatch: rel err {rel:.2e}"
    x.requires_grad_(False)


# ---------------------------------------------------------------- orthogonal init


class TestOrthogonalInit:
    def test_square_gram_identity(self):
        w = orthogonal_init((8, 8), torch.Generator().manual_seed(0), dtype=torch.float64)
        err = (w.T @ w - torch.eye(8, dtype=torch.float64)).abs().max()
        assert err < 1e-5

    def test_one_by_one(self):
        w = orthogonal_init((1, 1), torch.Generator().manual_seed(1))
        assert abs(abs(w.item()) - 1.0) < 1e-6

    def test_conv_kernel_rows_orthonormal(self):
        w = orthogonal_init((16, 8, 3, 3), torch.Generator().manual_seed(2), dtype=torch.float64)
        flat = w.reshape(16, 72)
        gram = flat @ flat.T
        assert (gram - torch.eye(16, dtype=torch.float64)).abs().max() < 1e-5

    def test_tall_columns_orthonormal(self):
        w = orthogonal_init((72, 16), torch.Generator().manual_seed(3), dtype=torch.float64)
        assert (w.T @ w - torch.eye(16, dtype=torch.float64)).abs().max() < 1e-5

    def test_degenerate_shape(self):
        with pytest.raises(ValueError, match="degenerate"):
            orthogonal_init((0, 4))


# ---------------------------------------------------------------- spectral norm


class TestSpectralNorm:
    def test_diagonal_exact(self):
        w = torch.diag(torch.tensor([2.0, 1.0]))
        u = l2normalize(torch.randn(2, generator=torch.Generator().manual_seed(0)))
        v = l2normalize(torch.randn(2, generator=torch.Generator().manual_seed(1)))
        for _ in range(50):
            w_n, u, v = power_iteration_normalize(w, u, v)
        assert torch.allclose(w_n, w / 2.0, atol=1e-6)

    def test_orthogonal_unchanged(self):
        w = orthogonal_init((6, 6), torch.Generator().manual_seed(4))
        u = l2normalize(torch.randn(6, generator=torch.Generator().manual_seed(5)))
        v = l2normalize(torch.randn(6, generator=torch.Generator().manual_seed(6)))
        for _ in range(50):
            w_n, u, v = power_iteration_normalize(w, u, v)
        assert torch.allclose(w_n, w, atol=1e-4)

    def test_converges_to_svd_oracle(self):
        w = torch.randn(5, 7, generator=torch.Generator().manual_seed(7))
        u = l2normalize(torch.randn(5, generator=torch.Generator().manual_seed(8)))
        v = l2normalize(torch.randn(7, generator=torch.Generator().manual_seed(9)))
        for _ in range(50):
            w_n, u, v = power_iteration_normalize(w, u, v)
        top = torch.linalg.svdvals(w_n)[0].item()
        assert 1 - 1e-3 <= top <= 1 + 1e-3

    def test_zero_weight_clamped(self):
        w = torch.zeros(3, 3)
        u = l2normalize(torch.ones(3))
        v = l2normalize(torch.ones(3))
        w_n, _, _ = power_iteration_normalize(w, u, v)
        assert torch.isfinite(w_n).all() and torch.equal(w_n, torch.zeros(3, 3))

    def test_vectors_unit_norm_after_update(self):
        w = torch.randn(4, 9, generator=torch.Generator().manual_seed(10))
        u = l2normalize(torch.randn(4, generator=torch.Generator().manual_seed(11)))
        v = l2normalize(torch.randn(9, generator=torch.Generator().manual_seed(12)))
        _, u, v = power_iteration_normalize(w, u, v)
        assert abs(u.norm().item() - 1) < 1e-6 and abs(v.norm().item() - 1) < 1e-6

    def test_module_frozen_forward_is_stable(self):
        torch.manual_seed(13)
        conv = snconv2d(3, 4)
        conv.eval()
        x = torch.randn(2, 3, 5, 5)
        a, b = conv(x), conv(x)
        assert torch.equal(a, b)
        u_before = conv.weight_u.clone()
        conv.train()
        conv(x)
        assert not torch.equal(u_before, conv.weight_u)

    def test_wrapper_normalizes_effective_weight(self):
        torch.manual_seed(14)
        lin = snlinear(6, 4)
        lin.train()
        x = torch.randn(3, 6)
        for _ in range(100):
            lin(x)
        top = torch.linalg.svdvals(lin.normalized_weight(update=False))[0].item()
        assert top <= 1 + 1e-3


# ---------------------------------------------------------------- ConvGRU


class TestConvGRU:
    def _zero_gru(self, c=3):
        torch.manual_seed(0)
        gru = ConvGRU(c, spectral=False)
        for p in gru.parameters():
            torch.nn.init.zeros_(p)
        return gru

    def test_zero_weights_halve_state(self):
        gru = self._zero_gru()
        h = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(1))
        x = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(2))
        out = gru.step(h, x)
        assert torch.allclose(out, 0.5 * h, atol=1e-7)

    def test_closed_update_gate_keeps_state(self):
        gru = self._zero_gru()
        with torch.no_grad():
            gru.conv_z.bias.fill_(-40.0)
        h = torch.randn(1, 3, 4, 4, generator=torch.Generator().manual_seed(3))
        x = torch.randn(1, 3, 4, 4, generator=torch.Generator().manual_seed(4))
        assert torch.allclose(gru.step(h, x), h, atol=1e-6)

    def test_matches_gate_equation_oracle(self):
        torch.manual_seed(5)
        gru = ConvGRU(2, spectral=False).double()
        h = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        x = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        out = gru.step(h, x)

        def conv(m, inp):
            return loop_conv2d(inp.numpy(), m.weight.detach().numpy(), m.bias.detach().numpy())

        hx = torch.cat([h, x], 1)
        z = 1 / (1 + np.exp(-conv(gru.conv_z, hx)))
        r = 1 / (1 + np.exp(-conv(gru.conv_r, hx)))
        cand = np.maximum(conv(gru.conv_h, torch.cat([torch.from_numpy(r) * h, x], 1)), 0)
        expected = (1 - z) * h.numpy() + z * cand
        np.testing.assert_allclose(out.detach().numpy(), expected, rtol=1e-10, atol=1e-12)

    def test_channel_mismatch(self):
        gru = ConvGRU(3, spectral=False)
        with pytest.raises(ValueError, match="channels"):
            gru.step(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4))

    def test_sequence_shape(self):
        torch.manual_seed(6)
        gru = ConvGRU(3)
        out = gru(torch.randn(2, 5, 3, 4, 4))
        assert out.shape == (2, 5, 3, 4, 4)


# ---------------------------------------------------------------- separable 3D conv


class TestSeparableConv3d:
    def test_identity_kernels(self):
        conv = SeparableConv3d(2, 2, spectral=False)
        with torch.no_grad():
            conv.temporal.weight.zero_()
            conv.temporal.bias.zero_()
            conv.spatial.weight.zero_()
            conv.spatial.bias.zero_()
            for c in range(2):
                conv.temporal.weight[c, c, 1, 0, 0] = 1.0  # temporal kernel [0, 1, 0]
                conv.spatial.weight[c, c, 0, 1, 1] = 1.0  # spatial delta
        v = torch.randn(2, 4, 2, 5, 5, generator=torch.Generator().manual_seed(0))
        assert torch.allclose(conv(v), v, atol=1e-7)

    def test_constant_scaling_interior(self):
        conv = SeparableConv3d(1, 1, spectral=False)
        with torch.no_grad():
            conv.temporal.weight.fill_(0.5)
            conv.temporal.bias.zero_()
            conv.spatial.weight.fill_(0.25)
            conv.spatial.bias.zero_()
        s_t, s_s = 3 * 0.5, 9 * 0.25
        v = torch.full((1, 5, 1, 8, 8), 0.7)
        out = conv(v)
        interior = out[:, 1:-1, :, 1:-1, 1:-1]
        assert torch.allclose(interior, torch.full_like(interior, 0.7 * s_t * s_s), atol=1e-5)

    def test_matches_loop_oracle(self):
        torch.manual_seed(7)
        conv = SeparableConv3d(2, 3, spectral=False).double()
        v = torch.randn(1, 2, 2, 4, 4, dtype=torch.float64)
        out = conv(v).detach().numpy()
        x = v.permute(0, 2, 1, 3, 4).numpy()  # [B, C, T, H, W]
        mid = loop_conv_temporal(
            x, conv.temporal.weight.detach().numpy(), conv.temporal.bias.detach().numpy()
        )
        bs, c, t, h, w = mid.shape
        sw = conv.spatial.weight.detach().numpy()[:, :, 0]  # [cout, cin, 3, 3]
        final = np.stack(
            [
                loop_conv2d(mid[:, :, i], sw, conv.spatial.bias.detach().numpy())
                for i in range(t)
            ],
            axis=2,
        )
        np.testing.assert_allclose(out, final.transpose(0, 2, 1, 3, 4), rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- conditional BN


class TestCondBatchNorm:
    def test_constant_input_zeroed(self):
        bn = CondBatchNorm(3, 5, spectral=False)
        with torch.no_grad():
            bn.gain.weight.zero_()
            bn.bias.weight.zero_()
        v = torch.ones(4, 2, 3, 4, 4) * 0.37
        out = bn(v, torch.randn(4, 5, generator=torch.Generator().manual_seed(0)))
        assert torch.allclose(out, torch.zeros_like(out), atol=1e-6)

    def test_train_mode_normalizes_per_frame(self):
        torch.manual_seed(1)
        bn = CondBatchNorm(2, 3, spectral=False)
        with torch.no_grad():
            bn.gain.weight.zero_()
            bn.bias.weight.zero_()
        gen = torch.Generator().manual_seed(2)
        # distinct per-frame statistics
        v = torch.randn(8, 3, 2, 6, 6, generator=gen) * torch.tensor([1.0, 2.0, 4.0]).view(1, 3, 1, 1, 1)
        v = v + torch.tensor([0.0, 5.0, -3.0]).view(1, 3, 1, 1, 1)
        out = bn(v, torch.randn(8, 3, generator=gen))
        mean = out.mean(dim=(0, 3, 4))
        var = out.var(dim=(0, 3, 4), unbiased=False)
        assert mean.abs().max() <= 1e-5
        assert (var - 1).abs().max() <= 1e-4

    def test_running_stats_recurrence_oracle(self):
        bn = CondBatchNorm(1, 2, spectral=False)
        gen = torch.Generator().manual_seed(3)
        cond = torch.zeros(4, 2)
        rm, rv = 0.0, 1.0
        for _ in range(5):
            v = torch.randn(4, 1, 1, 3, 3, generator=gen) * 2 + 1
            bn(v, cond)
            m = v.mean().item()
            va = v.var(unbiased=False).item()
            rm = 0.9 * rm + 0.1 * m
            rv = 0.9 * rv + 0.1 * va
        assert bn.running_mean[0, 0].item() == pytest.approx(rm, rel=1e-5)
        assert bn.running_var[0, 0].item() == pytest.approx(rv, rel=1e-5)

    def test_eval_without_stats_raises(self):
        bn = CondBatchNorm(2, 2, spectral=False)
        bn.eval()
        with pytest.raises(MissingStatsError):
            bn(torch.randn(1, 2, 2, 3, 3), torch.zeros(1, 2))

    def test_eval_uses_offset_stats(self):
        bn = CondBatchNorm(1, 2, spectral=False)
        with torch.no_grad():
            bn.gain.weight.zero_()
            bn.bias.weight.zero_()
        gen = torch.Generator().manual_seed(4)
        v = torch.randn(8, 4, 1, 3, 3, generator=gen)
        for _ in range(300):
            bn(v, torch.zeros(8, 2))
        bn.eval()
        full = bn(v, torch.zeros(8, 2))
        tail = bn(v[:, 2:], torch.zeros(8, 2), t_offset=2)
        assert torch.allclose(full[:, 2:], tail, atol=1e-6)
        with pytest.raises(MissingStatsError):
            bn(v, torch.zeros(8, 2), t_offset=3)

    def test_frozen_mode_does_not_update(self):
        bn = CondBatchNorm(1, 2, spectral=False)
        v = torch.randn(4, 2, 1, 3, 3, generator=torch.Generator().manual_seed(5))
        bn(v, torch.zeros(4, 2))
        bn.eval()
        before = bn.running_mean.clone()
        bn(v * 3 + 1, torch.zeros(4, 2))
        assert torch.equal(before, bn.running_mean)

    def test_stats_state_round_trip(self):
        bn = CondBatchNorm(2, 2, spectral=False)
        v = torch.randn(4, 3, 2, 3, 3, generator=torch.Generator().manual_seed(6))
        bn(v, torch.zeros(4, 2))
        state = bn.stats_state()
        other = CondBatchNorm(2, 2, spectral=False)
        other.load_stats_state(state)
        assert torch.equal(other.running_mean, bn.running_mean)
        assert torch.equal(other.running_var, bn.running_var)
        assert torch.equal(other.recorded, bn.recorded)


# ---------------------------------------------------------------- blocks


class TestGenBlock2d:
    def test_zero_convs_identity_shortcut(self):
        torch.manual_seed(0)
        blk = GenBlock2d(3, 3, 4, upsample=False, spectral=False)
        with torch.no_grad():
            blk.conv1.weight.zero_()
            blk.conv1.bias.zero_()
            blk.conv2.weight.zero_()
            blk.conv2.bias.zero_()
        v = torch.randn(2, 2, 3, 4, 4, generator=torch.Generator().manual_seed(1))
        out = blk(v, torch.randn(2, 4, generator=torch.Generator().manual_seed(2)))
        assert torch.equal(out, v)

    def test_upsample_doubles(self):
        torch.manual_seed(3)
        blk = GenBlock2d(4, 2, 4, upsample=True)
        out = blk(torch.randn(1, 2, 4, 4, 4), torch.randn(1, 4))
        assert out.shape == (1, 2, 2, 8, 8)

    def test_gradcheck_spec_shape(self):
        torch.manual_seed(4)
        blk = GenBlock2d(4, 3, 3, upsample=False, spectral=True)
        set_stat_recompute_mode(blk)
        v = torch.randn(1, 2, 4, 3, 3, dtype=torch.float64)
        cond = torch.randn(1, 3, dtype=torch.float64)
        check_gradients(blk, [v, cond])


class TestDiscBlock:
    def test_downsample_halves(self):
        torch.manual_seed(0)
        blk = DiscBlock(3, 5, downsample=True)
        out = blk(torch.randn(2, 3, 3, 8, 8))
        assert out.shape == (2, 3, 5, 4, 4)

    def test_zero_residual_gives_pooled_input(self):
        blk = DiscBlock(2, 2, downsample=True, spectral=False)
        with torch.no_grad():
            for p in blk.parameters():
                p.zero_()
        v = torch.randn(1, 2, 2, 4, 4, generator=torch.Generator().manual_seed(1))
        out = blk(v)
        pooled = (v[..., 0::2, :] + v[..., 1::2, :])
        pooled = (pooled[..., 0::2] + pooled[..., 1::2]) * 0.25
        assert torch.equal(out, pooled)

    def test_3d_block_matches_loop_oracle(self):
        torch.manual_seed(2)
        blk = DiscBlock(2, 2, downsample=False, three_d=True, spectral=False).double()
        v = torch.randn(1, 4, 2, 3, 3, dtype=torch.float64)
        out = blk(v).detach().numpy()

        def conv3d_loop(x, w, b):
            xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
            bs, cin, t, h, ww = xp.shape
            cout = w.shape[0]
            res = np.zeros((bs, cout, t - 2, h - 2, ww - 2))
            for n in range(bs):
                for o in range(cout):
                    for i in range(t - 2):
                        for j in range(h - 2):
                            for k in range(ww - 2):
                                res[n, o, i, j, k] = (
                                    xp[n, :, i : i + 3, j : j + 3, k : k + 3] * w[o]
                                ).sum() + b[o]
            return res

        x = v.permute(0, 2, 1, 3, 4).numpy()  # [B, C, T, H, W]
        h1 = conv3d_loop(
            np.maximum(x, 0),
            blk.conv1.weight.detach().numpy(),
            blk.conv1.bias.detach().numpy(),
        )
        h2 = conv3d_loop(
            np.maximum(h1, 0),
            blk.conv2.weight.detach().numpy(),
            blk.conv2.bias.detach().numpy(),
        )
        expected = (h2 + x).transpose(0, 2, 1, 3, 4)
        np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)

    def test_gradcheck_2d(self):
        torch.manual_seed(5)
        blk = DiscBlock(2, 3, downsample=True, spectral=True)
        blk.eval()
        check_gradients(blk, [torch.randn(2, 2, 2, 4, 4, dtype=torch.float64)])

    def test_gradcheck_3d(self):
        torch.manual_seed(6)
        blk = DiscBlock(2, 2, downsample=False, three_d=True, spectral=True)
        blk.eval()
        check_gradients(blk, [torch.randn(1, 3, 2, 3, 3, dtype=torch.float64)])


class TestGradChecksRemainingLayers:
    def test_convgru_step(self):
        torch.manual_seed(7)
        gru = ConvGRU(2, spectral=True)
        gru.eval()

        class StepWrap(torch.nn.Module):
            def __init__(self, inner):
                super().__init__()
                self.inner = inner

            def forward(self, h, x):
                return self.inner.step(h, x)

        check_gradients(
            StepWrap(gru),
            [torch.randn(2, 2, 3, 3, dtype=torch.float64),
             torch.randn(2, 2, 3, 3, dtype=torch.float64)],
        )

    def test_separable_conv3d(self):
        torch.manual_seed(8)
        conv = SeparableConv3d(2, 2, spectral=True)
        conv.eval()
        check_gradients(conv, [torch.randn(1, 3, 2, 3, 3, dtype=torch.float64)])

    def test_cond_batchnorm_train_mode(self):
        torch.manual_seed(9)
        bn = CondBatchNorm(2, 3, spectral=True)
        set_stat_recompute_mode(bn)
        check_gradients(
            bn,
            [torch.randn(3, 2, 2, 3, 3, dtype=torch.float64),
             torch.randn(3, 3, dtype=torch.float64)],
        )

    def test_snlinear_and_snconv(self):
        torch.manual_seed(10)
        lin = snlinear(4, 3)
        lin.eval()
        check_gradients(lin, [torch.randn(2, 4, dtype=torch.float64)])
        conv = snconv2d(2, 3)
        conv.eval()
        check_gradients(conv, [torch.randn(1, 2, 4, 4, dtype=torch.float64)])


def test_spectral_norm_wrapper_state_dict_round_trip():
    torch.manual_seed(11)
    conv = snconv2d(3, 4)
    sd = conv.state_dict()
    assert set(sd) == {"weight_orig", "weight_u", "weight_v", "module.bias"}
    other = snconv2d(3, 4)
    other.load_state_dict(sd)
    other.eval()
    conv.eval()
    x = torch.randn(1, 3, 5, 5)
    assert torch.equal(conv(x), other(x))
