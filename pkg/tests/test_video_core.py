import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hvg.video import (
    CropWindow,
    build_pyramid,
    nearest_resize,
    replicate_frames,
    spatial_downsample,
    temporal_crop_pair,
    temporal_subsample,
)


def video(b=1, t=4, c=3, h=8, w=8, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(b, t, c, h, w, generator=gen) * 2 - 1


def box_oracle(v, k):
    """Independent float64 block-average oracle."""
    arr = v.double().numpy()
    b, t, c, h, w = arr.shape
    out = np.zeros((b, t, c, h // k, w // k))
    for i in range(h // k):
        for j in range(w // k):
            out[..., i, j] = arr[..., i * k : (i + 1) * k, j * k : (j + 1) * k].mean(axis=(-1, -2))
    return out


class TestSpatialDownsample:
    def test_paper_factor_four(self):
        v = video(t=12, h=128, w=128)
        out = spatial_downsample(v, 4)
        assert out.shape == (1, 12, 3, 32, 32)

    def test_constant_preserved_exactly(self):
        for k in (2, 4):
            c = torch.full((2, 3, 3, 8, 8), -0.3137255)
            out = spatial_downsample(c, k)
            assert torch.equal(out, torch.full_like(out, -0.3137255))

    def test_explicit_bilinear_weights(self):
        frame = torch.tensor([[0.0, 0.0], [2.0, 2.0]]).reshape(1, 1, 1, 2, 2)
        out = spatial_downsample(frame, 2)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.item() == pytest.approx(1.0, abs=0)

    def test_matches_box_oracle(self):
        v = video(b=2, t=3, h=12, w=12, seed=3)
        for k in (2, 3, 4):
            out = spatial_downsample(v, k)
            np.testing.assert_allclose(out.numpy(), box_oracle(v, k), atol=1e-6)

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            spatial_downsample(video(h=9, w=8), 2)

    def test_identity_factor(self):
        v = video()
        assert spatial_downsample(v, 1) is v


class TestTemporalSubsample:
    def test_phase_zero_indices(self):
        v = video(t=48)
        out = temporal_subsample(v, 8)
        assert out.shape[1] == 6
        assert torch.equal(out, v[:, [0, 8, 16, 24, 32, 40]])

    def test_factor_one_identity(self):
        v = video()
        assert torch.equal(temporal_subsample(v, 1), v)

    def test_phase_one(self):
        v = video(t=24)
        out = temporal_subsample(v, 2, phase=1)
        assert out.shape[1] == 12
        assert torch.equal(out, v[:, list(range(1, 24, 2))])

    def test_bad_phase(self):
        with pytest.raises(ValueError, match="phase"):
            temporal_subsample(video(), 2, phase=2)

    @settings(max_examples=60, deadline=None)
    @given(t=st.integers(1, 24), k=st.integers(1, 24))
    def test_ceil_length_law(self, t, k):
        if k > t:
            k = t
        out = temporal_subsample(video(t=t, h=2, w=2), k)
        assert out.shape[1] == -(-t // k)


class TestReplicateFrames:
    def test_order(self):
        v = video(t=2)
        out = replicate_frames(v, 2)
        assert out.shape[1] == 4
        assert torch.equal(out[:, 0], v[:, 0]) and torch.equal(out[:, 1], v[:, 0])
        assert torch.equal(out[:, 2], v[:, 1]) and torch.equal(out[:, 3], v[:, 1])

    def test_factor_one_identity(self):
        v = video()
        assert replicate_frames(v, 1) is v

    def test_matches_upsampler_length(self):
        assert replicate_frames(video(t=6, h=2, w=2), 2).shape[1] == 12

    @settings(max_examples=40, deadline=None)
    @given(t=st.integers(1, 10), k=st.integers(1, 6))
    def test_replicate_then_subsample_identity(self, t, k):
        v = video(t=t, h=2, w=2)
        assert torch.equal(temporal_subsample(replicate_frames(v, k), k), v)


class TestNearestResize:
    def test_upsample_duplicates_blocks(self):
        v = video(h=8, w=8, seed=1)
        out = nearest_resize(v, 16, 16)
        for di in range(2):
            for dj in range(2):
                assert torch.equal(out[..., di::2, dj::2], v)

    def test_identity(self):
        v = video()
        assert nearest_resize(v, 8, 8) is v

    def test_downsample_index_map(self):
        v = video(h=16, w=16, seed=2)
        out = nearest_resize(v, 8, 8)
        # representative index per cell: (i * in) // out
        rows = [(i * 16) // 8 for i in range(8)]
        assert torch.equal(out, v[:, :, :, rows][:, :, :, :, rows])


class TestPyramid:
    def test_desk_config(self):
        v = video(t=32, h=32, w=32)
        p = build_pyramid(v, [(2, 2), (2, 2)])
        shapes = [tuple(x.shape[1:]) for x in p.views]
        assert shapes == [(8, 3, 8, 8), (16, 3, 16, 16), (32, 3, 32, 32)]

    def test_empty_factors(self):
        v = video()
        p = build_pyramid(v, [])
        assert p.num_views == 1 and torch.equal(p.views[0], v)

    def test_bdd_shape_chain(self):
        v = video(t=48, h=256, w=256)
        p = build_pyramid(v, [(2, 2), (2, 2)])
        shapes = [tuple(x.shape[1:]) for x in p.views]
        assert shapes == [(12, 3, 64, 64), (24, 3, 128, 128), (48, 3, 256, 256)]

    def test_consistency_bit_exact(self):
        v = video(b=2, t=8, h=16, w=16, seed=5)
        p = build_pyramid(v, [(2, 2), (2, 2)])
        for lvl in range(p.num_views - 1):
            recomputed = spatial_downsample(
                temporal_subsample(p.views[lvl + 1], p.temporal_factors[lvl]),
                p.spatial_factors[lvl],
            )
            assert torch.equal(p.views[lvl], recomputed)

    def test_divisibility_failure(self):
        with pytest.raises(ValueError):
            build_pyramid(video(t=6, h=8, w=8), [(4, 2)])

    @settings(max_examples=25, deadline=None)
    @given(t=st.sampled_from([4, 8, 16]), seed=st.integers(0, 50))
    def test_consistency_property(self, t, seed):
        v = video(b=1, t=t, h=8, w=8, seed=seed)
        p = build_pyramid(v, [(2, 2)])
        assert torch.equal(
            p.views[0], spatial_downsample(temporal_subsample(v, 2), 2)
        )


class TestCropWindow:
    def test_alignment_law(self):
        w = CropWindow.from_low(2, 4, 2)
        assert (w.high_start, w.high_len) == (4, 8)

    def test_kinetics_window(self):
        w = CropWindow.from_low(0, 6, 2)
        assert w.high_len == 12

    def test_pair_extraction(self):
        v = video(t=16, h=8, w=8, seed=7)
        p = build_pyramid(v, [(2, 1)])
        low, high = temporal_crop_pair(p, 1, CropWindow.from_low(2, 4, 2))
        assert torch.equal(low, p.views[0][:, 2:6])
        assert torch.equal(high, p.views[1][:, 4:12])

    def test_full_length_window_is_identity(self):
        v = video(t=8, h=8, w=8)
        p = build_pyramid(v, [(2, 2)])
        low, high = temporal_crop_pair(p, 1, CropWindow.from_low(0, 4, 2))
        assert torch.equal(low, p.views[0]) and torch.equal(high, p.views[1])

    def test_misaligned_rejected(self):
        v = video(t=8, h=8, w=8)
        p = build_pyramid(v, [(2, 2)])
        with pytest.raises(ValueError, match="misaligned"):
            temporal_crop_pair(p, 1, CropWindow(0, 2, 1, 4))

    def test_out_of_range_rejected(self):
        v = video(t=8, h=8, w=8)
        p = build_pyramid(v, [(2, 2)])
        with pytest.raises(ValueError, match="outside"):
            temporal_crop_pair(p, 1, CropWindow.from_low(3, 2, 2))


def test_all_ops_finite_on_finite_input():
    v = video(b=2, t=8, h=8, w=8, seed=11)
    outs = [
        spatial_downsample(v, 2),
        temporal_subsample(v, 2),
        replicate_frames(v, 3),
        nearest_resize(v, 5, 11),
    ]
    for out in outs:
        assert torch.isfinite(out).all()
