import os
from pathlib import Path

import pytest
import torch

# Desk-scale tensors are tiny; multi-threaded kernels only add sync overhead
# (and measurable nondeterminism risk across thread counts).
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory) -> Path:
    """Root for expensive session artifacts (dataset, trained runs).

    Set HVG_TEST_CACHE to persist them across pytest invocations; artifacts
    are keyed by config hash + seed, so stale entries are never reused.
    """
    env = os.environ.get("HVG_TEST_CACHE")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("hvg-cache")


@pytest.fixture(scope="session")
def desk_dataset(cache_dir):
    """The canonical 512-video synthetic dataset, rendered once per session."""
    from hvg.data import VideoDataset, make_synthetic_dataset

    root = cache_dir / "dataset"
    if not (root / "manifest.json").exists():
        make_synthetic_dataset(root, num_videos=512, t=32, h=32, w=32, num_classes=4, seed=0)
    return VideoDataset(root)


@pytest.fixture(scope="session")
def micro_exp():
    """A minutes-scale 2-level config for machinery tests (not for quality)."""
    from hvg.config import from_dict

    return from_dict(
        {
            "name": "micro",
            "seed": 0,
            "dataset": {"num_videos": 48, "frames": 16, "height": 16, "width": 16,
                        "num_classes": 4},
            "data_reduce": [1, 1],
            "hierarchy": [
                {"role": "first", "frames": 8, "height": 8, "width": 8, "ch": 6,
                 "g_mults": [2, 1], "d_base": 6, "d_mults": [1, 2], "spatial_k": 4},
                {"role": "upsampler", "k_t": 2, "k_s": 2, "window": 4, "ch": 6,
                 "g_mults": [2, 1, 1], "d_base": 6, "d_mults": [1, 2], "spatial_k": 4},
            ],
            "optimizer": {"batch_size": 4},
            "training": {"steps_per_level": [4, 4], "checkpoint_every": 1000},
            "eval": {"n_samples": 16},
        }
    )


@pytest.fixture(scope="session")
def micro_dataset(cache_dir, micro_exp):
    from hvg.data import VideoDataset, make_synthetic_dataset

    root = cache_dir / "micro-dataset"
    if not (root / "manifest.json").exists():
        ds = micro_exp.dataset
        make_synthetic_dataset(root, num_videos=ds.num_videos, t=ds.frames, h=ds.height,
                               w=ds.width, num_classes=ds.num_classes, seed=1)
    return VideoDataset(root)
