"""Command-line driver: dataset creation, level training, sampling,
evaluation, spectra, the scaling sweep and the paired ablations.

Every command resolves its config (a JSON file or a preset name), validates
it against the schema, and writes a self-describing run.json (resolved
config, seeds, checkpoint content hashes) into its output directory.
Long-running commands hold a lock file per checkpoint directory. Paper-sized
presets are shape-check-only and refuse to run without --shapes-only.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, inference, io, training
from .config import ConfigError, resolve_config, to_dict
from .data import TrainingSampler, VideoDataset, make_synthetic_dataset
from .training import PrerequisiteError, TrainingDivergedError


class LockError(RuntimeError):
    pass


class DirLock:
    """Single-instance guard for a checkpoint directory."""

    def __init__(self, directory):
        self.path = Path(directory) / "lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"{self.path} exists; another run owns this directory "
                "(remove the lock file if that run is dead)"
            )
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _data_root(args, exp) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    if exp is not None and exp.dataset.root:
        return Path(exp.dataset.root)
    env = os.environ.get("HVG_DATA_DIR")
    if env:
        return Path(env)
    raise ConfigError("no dataset root: pass --data, set dataset.root, or set HVG_DATA_DIR")


def _shapes_dry_run(exp, frames_level1=None) -> list[tuple[int, int, int]]:
    train = exp.level_train_shapes()
    full = exp.level_full_shapes(frames_level1)
    print(f"{exp.name}: {exp.num_levels} levels")
    for i, ((tt, th, tw), (ft, fh, fw)) in enumerate(zip(train, full), start=1):
        print(f"  level {i}: trains on {tt}/{th}x{tw}, unrolled output {ft}/{fh}x{fw}")
    return full


def _guard_preset(exp, args) -> bool:
    """Returns True if the command should stop after the dry run."""
    if getattr(args, "shapes_only", False):
        _shapes_dry_run(exp, getattr(args, "frames", None))
        return True
    if exp.shapes_only:
        raise ConfigError(
            f"config {exp.name!r} is a shape-check preset; rerun with --shapes-only"
        )
    return False


def cmd_make_data(args) -> int:
    exp = resolve_config(args.config) if args.config else None
    root = _data_root(args, exp)
    ds = exp.dataset if exp else None
    manifest = make_synthetic_dataset(
        root,
        num_videos=args.num_videos or (ds.num_videos if ds else 512),
        t=ds.frames if ds else 32,
        h=ds.height if ds else 32,
        w=ds.width if ds else 32,
        num_classes=ds.num_classes if ds else 4,
        seed=args.seed,
        overwrite=args.overwrite,
    )
    io.write_run_json(root, "make-data", {
        "seeds": {"data": args.seed},
        "config": to_dict(exp) if exp else None,
        "num_videos": len(manifest.videos),
    })
    print(f"wrote {len(manifest.videos)} videos under {root}")
    return 0


def cmd_train(args) -> int:
    exp = resolve_config(args.config)
    if _guard_preset(exp, args):
        return 0
    if args.seed is not None:
        exp.seed = args.seed
    out_root = Path(args.out)
    dataset = VideoDataset(_data_root(args, exp))
    with DirLock(training.level_dir(out_root, args.level)):
        ckpt = training.train_level(
            exp, args.level, dataset, out_root,
            steps=args.steps, resume=args.resume, log=print,
        )
    io.write_run_json(out_root, "train", {
        "config": to_dict(exp),
        "level": args.level,
        "seeds": {"experiment": exp.seed},
        "checkpoints": {f"level_{args.level}": io.checkpoint_hashes(ckpt)},
        "deterministic": args.deterministic,
    })
    print(f"level {args.level} checkpoint at {ckpt}")
    return 0


def cmd_sample(args) -> int:
    exp = resolve_config(args.config)
    if _guard_preset(exp, args):
        return 0
    out_dir = Path(args.out)
    hier = inference.load_hierarchy(exp, args.runs)
    run = inference.SampleRun(
        seed=args.seed or 0, sigma=args.sigma, frames_level1=args.frames,
        batch=args.n, passes=args.passes,
    )
    inference.recompute_all(
        hier, run.frames_level1 or exp.hierarchy[0].frames, run.passes,
        sigma=run.sigma, seed=run.seed, batch=exp.eval.recompute_batch,
    )
    videos, labels = inference.sample_hierarchy(hier, run)
    for lvl, v in enumerate(videos, start=1):
        inference.export_samples(out_dir / f"level_{lvl}", v, fmt=args.format)
    io.write_run_json(out_dir, "sample", {
        "config": to_dict(exp),
        "seeds": {"sample": run.seed},
        "sigma": run.sigma,
        "frames_level1": run.frames_level1 or exp.hierarchy[0].frames,
        "labels": labels.tolist() if labels is not None else None,
        "checkpoints": {
            f"level_{l}": io.checkpoint_hashes(training.level_dir(args.runs, l))
            for l in range(1, exp.num_levels + 1)
        },
        "deterministic": args.deterministic,
    })
    print(f"wrote {args.n} samples per level under {out_dir}")
    return 0


def _extractor_for(exp, dataset, out_root):
    """Train (or reuse) the metric feature extractor on the finest views."""
    from .io import load_named_tensors, save_named_tensors

    sampler = TrainingSampler(dataset, exp.pyramid_factors(), exp.data_reduce)
    views = sampler.pyramid.views[-1]
    cache = Path(out_root) / "extractor" / "extractor.bin"
    model = evaluation.VideoFeatureExtractor(dataset.num_classes, input_hw=views.shape[-1])
    if cache.exists():
        tensors, meta = load_named_tensors(cache)
        model.load_state_dict(tensors)
        model.eval()
        return model, meta["accuracy"], sampler
    crop = min(8, views.shape[1])
    model, acc = evaluation.train_feature_extractor(
        views, sampler.labels, dataset.num_classes, seed=exp.seed,
        steps=exp.eval.extractor_steps, batch=exp.eval.extractor_batch, crop_frames=crop,
    )
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_named_tensors(cache, model.state_dict(), meta={"accuracy": acc})
    return model, acc, sampler


def _eval_hierarchy(exp, runs_root, dataset, out_root, n_samples, sigma, seed):
    extractor, acc, sampler = _extractor_for(exp, dataset, out_root)
    if acc <= 0.95:
        raise RuntimeError(
            f"feature extractor held-out accuracy {acc:.3f} <= 0.95; metrics would be meaningless"
        )
    hier = inference.load_hierarchy(exp, runs_root)
    inference.recompute_all(
        hier, exp.hierarchy[0].frames, exp.eval.recompute_passes,
        sigma=sigma, seed=seed, batch=exp.eval.recompute_batch,
    )
    report = evaluation.evaluate_generator(
        hier, sampler.pyramid.views[-1], sampler.labels, extractor,
        n_samples, modes=("window", "full"), sigma=sigma, seed=seed,
        per_class=dataset.num_classes > 1,
    )
    report["extractor_accuracy"] = acc
    return report


def cmd_eval(args) -> int:
    exp = resolve_config(args.config)
    if _guard_preset(exp, args):
        return 0
    out_root = Path(args.out)
    dataset = VideoDataset(_data_root(args, exp))
    report = _eval_hierarchy(
        exp, args.runs, dataset, out_root, args.n_samples or exp.eval.n_samples,
        args.sigma, args.seed or 0,
    )
    report["config_hashes"] = {
        f"level_{l}": io.checkpoint_hashes(training.level_dir(args.runs, l))
        for l in range(1, exp.num_levels + 1)
    }
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "metrics.json").write_text(json.dumps(report, indent=2))
    io.write_run_json(out_root, "eval", {
        "config": to_dict(exp), "seeds": {"eval": args.seed or 0},
        "checkpoints": report["config_hashes"],
    })
    print(json.dumps({m: v for m, v in report["modes"].items()}, indent=2))
    return 0


def cmd_psd(args) -> int:
    exp = resolve_config(args.config)
    if _guard_preset(exp, args):
        return 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = VideoDataset(_data_root(args, exp))
    sampler = TrainingSampler(dataset, exp.pyramid_factors(), exp.data_reduce)
    hier = inference.load_hierarchy(exp, args.runs)
    inference.recompute_all(
        hier, exp.hierarchy[0].frames, exp.eval.recompute_passes,
        sigma=args.sigma, seed=args.seed or 0, batch=exp.eval.recompute_batch,
    )
    gen_videos, _ = evaluation._generate(hier, "full", args.n, args.sigma, args.seed or 0)
    t_out = gen_videos.shape[1]
    data_videos = sampler.pyramid.views[-1][: args.n, :t_out]
    indices = args.frames or [0, t_out // 2, t_out - 1]
    data_curves = evaluation.radial_psd(data_videos, indices)
    gen_curves = evaluation.radial_psd(gen_videos, indices)
    with open(out_dir / "psd.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "bin", "data_mean", "data_std", "gen_mean", "gen_std"])
        for fi in indices:
            d, g = data_curves[fi], gen_curves[fi]
            for b in range(len(d["mean"])):
                writer.writerow([fi, b, d["mean"][b], d["std"][b], g["mean"][b], g["std"][b]])
    coverage = {
        str(fi): evaluation.psd_band_coverage(data_curves, gen_curves, fi) for fi in indices
    }
    (out_dir / "psd_coverage.json").write_text(json.dumps(coverage, indent=2))
    _plot_psd(out_dir / "psd.png", indices, data_curves, gen_curves)
    io.write_run_json(out_dir, "psd", {
        "config": to_dict(exp), "seeds": {"psd": args.seed or 0},
        "frames": list(indices), "coverage": coverage,
    })
    print(json.dumps(coverage, indent=2))
    return 0


def _plot_psd(path, indices, data_curves, gen_curves) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(indices), figsize=(4 * len(indices), 3), squeeze=False)
    for ax, fi in zip(axes[0], indices):
        d, g = data_curves[fi], gen_curves[fi]
        bins = d["bins"]
        ax.fill_between(
            bins, np.maximum(d["mean"] - 3 * d["std"], 1e-20), d["mean"] + 3 * d["std"],
            alpha=0.3, label="data +-3 std",
        )
        ax.plot(bins, np.maximum(d["mean"], 1e-20), label="data")
        ax.plot(bins, np.maximum(g["mean"], 1e-20), label="generated")
        ax.set_yscale("log")
        ax.set_title(f"frame {fi}")
        ax.set_xlabel("radial frequency bin")
    axes[0][0].set_ylabel("power")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_scaling(args) -> int:
    exp = resolve_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = evaluation.activation_accounting(exp, args.t)
    with open(out_dir / "scaling.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["t_total"] + [f"level_{i + 1}" for i in range(exp.num_levels)]
        header += ["hierarchy_total", "end_to_end", "ratio"]
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [row["t_total"], *row["levels"], row["hierarchy_total"],
                 row.get("end_to_end", ""), row.get("ratio", "")]
            )
    crossover = evaluation.scaling_crossover(exp) if exp.end_to_end else None
    io.write_run_json(out_dir, "scaling", {
        "config": to_dict(exp), "t_totals": list(args.t), "crossover": crossover,
    })
    for row in rows:
        ratio = f" ratio={row['ratio']:.2f}" if "ratio" in row else ""
        print(f"T={row['t_total']}: hierarchy={row['hierarchy_total']}{ratio}")
    if crossover is not None:
        print(f"hierarchy cheaper than end-to-end from T={crossover}")
    return 0


def _ablate_pair(exp, variant: str):
    """The paired configs of one ablation: (label, config) tuples."""
    import copy

    if variant == "matching-d":
        on = copy.deepcopy(exp)
        on.name = f"{exp.name}-md"
        off = copy.deepcopy(exp)
        off.name = f"{exp.name}-nomd"
        for lvl in off.hierarchy[1:]:
            lvl.matching_d = False
        return [("with_md", on), ("no_md", off)]
    if variant == "window":
        long = copy.deepcopy(exp)
        long.name = f"{exp.name}-win{long.hierarchy[1].window}"
        short = copy.deepcopy(exp)
        for lvl in short.hierarchy[1:]:
            if lvl.window < 2:
                raise ConfigError("window ablation needs window >= 2")
            lvl.window //= 2
            lvl.spatial_k = min(lvl.spatial_k, lvl.window * lvl.k_t)
        short.name = f"{exp.name}-win{short.hierarchy[1].window}"
        return [(f"window_{long.hierarchy[1].window}", long),
                (f"window_{short.hierarchy[1].window}", short)]
    raise ConfigError(f"unknown ablation {variant!r} (expected matching-d or window)")


def cmd_ablate(args) -> int:
    exp = resolve_config(args.config)
    if _guard_preset(exp, args):
        return 0
    if args.seed is not None:
        exp.seed = args.seed
    out_root = Path(args.out)
    dataset = VideoDataset(_data_root(args, exp))
    pairs = _ablate_pair(exp, args.variant)
    comparison = {"variant": args.variant, "arms": {}}
    # The first level is shared: train it once under the first arm's root.
    shared_root = out_root / "shared"
    if not training.checkpoint_exists(shared_root, 1):
        with DirLock(training.level_dir(shared_root, 1)):
            training.train_level(pairs[0][1], 1, dataset, shared_root, steps=args.steps_l1,
                                 log=print)
    for label, arm in pairs:
        arm_root = out_root / label
        arm_root.mkdir(parents=True, exist_ok=True)
        l1 = training.level_dir(arm_root, 1)
        if not training.checkpoint_exists(arm_root, 1):
            import shutil

            shutil.copytree(training.level_dir(shared_root, 1), l1, dirs_exist_ok=True)
        for lvl in range(2, arm.num_levels + 1):
            with DirLock(training.level_dir(arm_root, lvl)):
                training.train_level(arm, lvl, dataset, arm_root, steps=args.steps, log=print)
        report = _eval_hierarchy(
            arm, arm_root, dataset, out_root, args.n_samples or arm.eval.n_samples,
            arm.eval.sigma, arm.seed,
        )
        if args.variant == "matching-d":
            hier = inference.load_hierarchy(arm, arm_root)
            inference.recompute_all(hier, arm.hierarchy[0].frames, arm.eval.recompute_passes,
                                    sigma=arm.eval.sigma, seed=arm.seed,
                                    batch=arm.eval.recompute_batch)
            report["grounding_error"] = evaluation.grounding_error(
                hier, args.n_samples or arm.eval.n_samples, sigma=arm.eval.sigma, seed=arm.seed
            )
        comparison["arms"][label] = report
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "metrics.json").write_text(json.dumps(comparison, indent=2))
    io.write_run_json(out_root, "ablate", {
        "config": to_dict(exp), "variant": args.variant, "seeds": {"experiment": exp.seed},
    })
    print(json.dumps({k: {m: vv for m, vv in v["modes"].items()}
                      for k, v in comparison["arms"].items()}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hvg", description="hierarchical coarse-to-fine video generation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="config JSON path or preset name")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data", help="dataset root (default: config or HVG_DATA_DIR)")
        p.add_argument("--deterministic", action="store_true",
                       help="single-worker seed-deterministic mode (the default behavior)")
        p.add_argument("--shapes-only", action="store_true",
                       help="print the level shape walk and exit")

    p = sub.add_parser("make-data", help="render the synthetic dataset")
    common(p, config_required=False)
    p.add_argument("--num-videos", type=int, default=None)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(seed=0, func=cmd_make_data)

    p = sub.add_parser("train", help="train one hierarchy level")
    common(p)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--out", default="runs", help="checkpoint root")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample the full hierarchy")
    common(p)
    p.add_argument("--runs", default="runs", help="checkpoint root")
    p.add_argument("--out", default="samples")
    p.add_argument("--frames", type=int, default=None, help="level-1 frame count")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--passes", type=int, default=200)
    p.add_argument("--format", choices=["frames", "gif", "all"], default="all")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="Frechet/IS metrics at window and full length")
    common(p)
    p.add_argument("--runs", default="runs")
    p.add_argument("--out", default="eval")
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--sigma", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("psd", help="radially averaged power spectra, data vs samples")
    common(p)
    p.add_argument("--runs", default="runs")
    p.add_argument("--out", default="psd")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--frames", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_psd)

    p = sub.add_parser("scaling", help="analytic activation accounting sweep")
    common(p)
    p.add_argument("--t", type=int, nargs="+", default=[24, 48, 96])
    p.add_argument("--out", default="scaling")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("ablate", help="paired ablation runs")
    common(p)
    p.add_argument("variant", choices=["matching-d", "window"])
    p.add_argument("--out", default="ablation")
    p.add_argument("--steps", type=int, default=None, help="upsampler step budget override")
    p.add_argument("--steps-l1", type=int, default=None, help="first-level step budget override")
    p.add_argument("--n-samples", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PrerequisiteError, TrainingDivergedError, LockError,
            FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
