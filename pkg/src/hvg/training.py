"""Per-level hinge objectives, the greedy level trainer and checkpoints.

Levels train strictly in order. The first level plays the standard
generator/discriminator game on whole coarse clips; an upsampling level
trains on aligned temporal crop pairs: the real branch shows the
discriminators ground-truth (fine, coarse) pyramid windows, the fake branch
samples a coarse clip from the frozen lower levels, crops a window, refines
it and shows (refined, window). Gradients never reach frozen levels.

The discriminator takes `d_steps_per_g` updates (fresh reals and fresh noise
each) per generator update. Adam runs at 1e-4 (G) / 5e-4 (D) with betas
(0.0, 0.999). Non-finite losses abort with a diagnostic dump of the
offending batch and the RNG state.

A checkpoint directory holds config.json, weights.bin (named-tensor
manifest), optimizer.bin, bn_stats.json (per-timestep normalization arrays)
and meta.json (iteration, seed, counters, RNG state, metric history).
Reloading reproduces frozen forwards, and the next training step, bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import io
from .config import ExperimentConfig, to_dict
from .data import TrainingSampler
from .discriminators import LevelDiscriminator
from .generators import FirstLevelGenerator, UpsamplerGenerator
from .layers import cond_batchnorm_modules

CHECKPOINT_FILES = ("config.json", "weights.bin", "optimizer.bin", "bn_stats.json", "meta.json")


class PrerequisiteError(RuntimeError):
    """A level was requested before its lower levels were trained."""


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; a diagnostic dump was written."""


def d_hinge_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Hinge critic loss, averaged over samples and score outputs."""
    return torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()


def g_hinge_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Generator companion of the hinge loss: -mean score."""
    return -fake_scores.mean()


def derive_seed(seed: int, *salts: int) -> int:
    x = seed & 0x7FFFFFFF
    for s in salts:
        x = (x * 0x9E3779B1 + s + 1) & 0x7FFFFFFF
    return x


def level_dir(root, level_index: int) -> Path:
    return Path(root) / f"level_{level_index}"


def checkpoint_exists(root, level_index: int) -> bool:
    d = level_dir(root, level_index)
    return all((d / f).exists() for f in CHECKPOINT_FILES)


def build_generator(exp: ExperimentConfig, level_index: int, seed: int):
    """Deterministically construct one level's generator."""
    torch.manual_seed(derive_seed(seed, level_index, 0xBEEF))
    cfg = exp.hierarchy[level_index - 1]
    nc = exp.dataset.num_classes
    if cfg.role == "first":
        return FirstLevelGenerator(cfg, nc)
    prev_t, prev_h, prev_w = exp.level_train_shapes()[level_index - 2]
    return UpsamplerGenerator(cfg, nc, prev_h, prev_w)


def build_discriminator(exp: ExperimentConfig, level_index: int, seed: int):
    torch.manual_seed(derive_seed(seed, level_index, 0xD15C))
    cfg = exp.hierarchy[level_index - 1]
    shapes = exp.level_train_shapes()
    _, h, w = shapes[level_index - 1]
    cond_h = shapes[level_index - 2][1] if cfg.role == "upsampler" else None
    return LevelDiscriminator(cfg, exp.dataset.num_classes, h, w, cond_h)


@dataclass
class StepCounters:
    d_updates: int = 0
    g_updates: int = 0


class FrozenHierarchy:
    """Already-trained levels 1..l-1 in frozen mode, used only to sample
    conditions. No parameters require grad; sampling runs under no_grad."""

    def __init__(self, exp: ExperimentConfig, generators: list):
        self.exp = exp
        self.generators = generators
        for g in generators:
            g.eval()
            for p in g.parameters():
                p.requires_grad_(False)

    @classmethod
    def load(cls, exp: ExperimentConfig, root, through_level: int) -> "FrozenHierarchy":
        gens = []
        for lvl in range(1, through_level + 1):
            if not checkpoint_exists(root, lvl):
                raise PrerequisiteError(
                    f"level {lvl} has no checkpoint under {level_dir(root, lvl)}; "
                    f"train levels in order (level {lvl} first)"
                )
            g = build_generator(exp, lvl, exp.seed)
            load_model_state(level_dir(root, lvl), g, prefix="g.")
            gens.append(g)
        return cls(exp, gens)

    def sample(self, batch: int, generator: torch.Generator, sigma: float = 1.0,
               frames_level1: int | None = None, labels: torch.Tensor | None = None,
               return_all: bool = False):
        """Sample through all frozen levels without temporal cropping."""
        exp = self.exp
        conditional = exp.hierarchy[0].conditional
        if conditional and labels is None:
            labels = torch.randint(exp.dataset.num_classes, (batch,), generator=generator)
        outs = []
        with torch.no_grad():
            v = None
            for i, g in enumerate(self.generators):
                cfg = exp.hierarchy[i]
                z = torch.randn(batch, cfg.noise_dim, generator=generator) * sigma
                y = labels if cfg.conditional else None
                if i == 0:
                    v = g(z, y, frames=frames_level1)
                else:
                    v = g(v, z, y)
                outs.append(v)
        return (outs if return_all else outs[-1]), labels


def _crop_batch(video: torch.Tensor, starts: torch.Tensor, length: int) -> torch.Tensor:
    return torch.stack([video[b, s : s + length] for b, s in enumerate(starts.tolist())])


class LevelTrainer:
    """Owns one level's modules, optimizers and update schedule."""

    def __init__(self, exp: ExperimentConfig, level_index: int, sampler: TrainingSampler,
                 out_root, frozen: FrozenHierarchy | None = None, seed: int | None = None):
        if level_index > 1 and frozen is None:
            raise PrerequisiteError(
                f"training level {level_index} requires the frozen hierarchy of levels "
                f"1..{level_index - 1}"
            )
        self.exp = exp
        self.level_index = level_index
        self.cfg = exp.hierarchy[level_index - 1]
        self.opt_cfg = exp.optimizer
        self.sampler = sampler
        self.frozen = frozen
        self.out_dir = level_dir(out_root, level_index)
        self.seed = exp.seed if seed is None else seed
        self.g = build_generator(exp, level_index, self.seed)
        self.d = build_discriminator(exp, level_index, self.seed)
        self.opt_g = torch.optim.Adam(
            self.g.parameters(), lr=self.opt_cfg.lr_g,
            betas=(self.opt_cfg.beta1, self.opt_cfg.beta2), eps=self.opt_cfg.eps,
        )
        self.opt_d = torch.optim.Adam(
            self.d.parameters(), lr=self.opt_cfg.lr_d,
            betas=(self.opt_cfg.beta1, self.opt_cfg.beta2), eps=self.opt_cfg.eps,
        )
        self.step_gen = torch.Generator().manual_seed(derive_seed(self.seed, level_index, 0x57E9))
        self.counters = StepCounters()
        self.iteration = 0
        self.metric_history: list[dict] = []
        self.g.train()
        self.d.train()

    # -- batch assembly -----------------------------------------------------

    def _real_first(self):
        return self.sampler.sample_first(self.opt_cfg.batch_size, self.step_gen)

    def _fake_first(self, track_grad: bool):
        b = self.opt_cfg.batch_size
        z = torch.randn(b, self.cfg.noise_dim, generator=self.step_gen)
        y = (
            torch.randint(self.sampler.num_classes, (b,), generator=self.step_gen)
            if self.cfg.conditional
            else None
        )
        if track_grad:
            return self.g(z, y), y
        with torch.no_grad():
            return self.g(z, y), y

    def _real_pairs(self):
        return self.sampler.sample_pairs(
            self.level_index - 1, self.cfg.window, self.opt_cfg.batch_size, self.step_gen
        )

    def _fake_pairs(self, track_grad: bool):
        b = self.opt_cfg.batch_size
        cond_full, y = self.frozen.sample(b, self.step_gen)
        t_low = cond_full.shape[1]
        starts = torch.randint(t_low - self.cfg.window + 1, (b,), generator=self.step_gen)
        cond = _crop_batch(cond_full, starts, self.cfg.window)
        z = torch.randn(b, self.cfg.noise_dim, generator=self.step_gen)
        y = y if self.cfg.conditional else None
        if track_grad:
            return cond, self.g(cond, z, y), y
        with torch.no_grad():
            return cond, self.g(cond, z, y), y

    # -- updates ------------------------------------------------------------

    def d_step(self) -> dict:
        if self.cfg.role == "first":
            x_real, y_real = self._real_first()
            x_fake, y_fake = self._fake_first(track_grad=False)
            s_real = self.d(x_real, y_real, generator=self.step_gen)
            s_fake = self.d(x_fake, y_fake, generator=self.step_gen)
        else:
            low_r, high_r, y_real = self._real_pairs()
            cond, x_fake, y_fake = self._fake_pairs(track_grad=False)
            s_real = self.d(high_r, y_real, x_low=low_r, generator=self.step_gen)
            s_fake = self.d(x_fake, y_fake, x_low=cond, generator=self.step_gen)
        loss = d_hinge_loss(s_real, s_fake)
        self._check_finite(loss, {"real_scores": s_real, "fake_scores": s_fake})
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        self.counters.d_updates += 1
        return {
            "loss_d": float(loss.detach()),
            "score_real": float(s_real.detach().mean()),
            "score_fake": float(s_fake.detach().mean()),
        }

    def g_step(self) -> dict:
        if self.cfg.role == "first":
            x_fake, y_fake = self._fake_first(track_grad=True)
            scores = self.d(x_fake, y_fake, generator=self.step_gen)
        else:
            cond, x_fake, y_fake = self._fake_pairs(track_grad=True)
            scores = self.d(x_fake, y_fake, x_low=cond, generator=self.step_gen)
        loss = g_hinge_loss(scores)
        self._check_finite(loss, {"gen_scores": scores})
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_g.step()
        self.counters.g_updates += 1
        return {"loss_g": float(loss.detach())}

    def train_step(self) -> dict:
        metrics = {}
        for _ in range(self.opt_cfg.d_steps_per_g):
            metrics.update(self.d_step())
        metrics.update(self.g_step())
        self.iteration += 1
        return metrics

    def _check_finite(self, loss: torch.Tensor, batch: dict) -> None:
        if torch.isfinite(loss):
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump = self.out_dir / "diagnostic_dump.bin"
        io.save_named_tensors(
            dump,
            {k: v.detach() for k, v in batch.items()},
            meta={
                "iteration": self.iteration,
                "rng_state": io.encode_rng_state(self.step_gen),
                "loss": float(loss.detach()),
            },
        )
        raise TrainingDivergedError(
            f"non-finite loss at level {self.level_index} iteration {self.iteration}; "
            f"batch and rng state dumped to {dump}"
        )

    # -- checkpointing ------------------------------------------------------

    def save(self) -> Path:
        save_checkpoint(
            self.out_dir,
            exp=self.exp,
            level_index=self.level_index,
            g=self.g,
            d=self.d,
            opt_g=self.opt_g,
            opt_d=self.opt_d,
            step_gen=self.step_gen,
            iteration=self.iteration,
            counters=self.counters,
            seed=self.seed,
            metric_history=self.metric_history,
        )
        return self.out_dir

    def restore(self) -> None:
        meta = load_checkpoint(self.out_dir, self.g, self.d, self.opt_g, self.opt_d)
        self.iteration = meta["iteration"]
        self.counters = StepCounters(**meta["counters"])
        self.metric_history = meta["metric_history"]
        io.decode_rng_state(self.step_gen, meta["rng_state"])
        self.g.train()
        self.d.train()


# -- checkpoint files --------------------------------------------------------


def split_bn_stats(model: torch.nn.Module):
    """Partition a state dict into (weights, per-timestep stat arrays)."""
    stat_keys = set()
    stats = {}
    for name, m in cond_batchnorm_modules(model):
        stats[name] = m.stats_state()
        for suffix in ("running_mean", "running_var", "recorded"):
            stat_keys.add(f"{name}.{suffix}" if name else suffix)
    weights = {k: v for k, v in model.state_dict().items() if k not in stat_keys}
    return weights, stats


def load_model_state(ckpt_dir, model: torch.nn.Module, prefix: str) -> None:
    ckpt_dir = Path(ckpt_dir)
    tensors, _ = io.load_named_tensors(ckpt_dir / "weights.bin")
    own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    bn = json.loads((ckpt_dir / "bn_stats.json").read_text())
    for name, m in cond_batchnorm_modules(model):
        key = f"{prefix}{name}"
        if key in bn:
            m.load_stats_state(bn[key])
    missing, unexpected = model.load_state_dict(own, strict=False)
    stat_suffixes = ("running_mean", "running_var", "recorded")
    real_missing = [k for k in missing if not k.endswith(stat_suffixes)]
    if real_missing or unexpected:
        raise ValueError(
            f"checkpoint mismatch under {ckpt_dir}: missing {real_missing}, "
            f"unexpected {unexpected}"
        )


def _optimizer_tensors(opt: torch.optim.Optimizer, tag: str):
    tensors = {}
    meta = {"param_groups": [], "state_keys": {}}
    for gi, group in enumerate(opt.param_groups):
        meta["param_groups"].append({k: v for k, v in group.items() if k != "params"})
    for pi, (p, state) in enumerate(
        (p, opt.state.get(p, {})) for g in opt.param_groups for p in g["params"]
    ):
        keys = []
        for k, v in state.items():
            keys.append(k)
            if isinstance(v, torch.Tensor):
                tensors[f"{tag}.{pi}.{k}"] = v
            else:
                meta.setdefault("scalars", {})[f"{tag}.{pi}.{k}"] = v
        meta["state_keys"][str(pi)] = keys
    return tensors, meta


def _load_optimizer_tensors(opt: torch.optim.Optimizer, tensors, meta, tag: str) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    for gi, group in enumerate(opt.param_groups):
        group.update(meta["param_groups"][gi])
    scalars = meta.get("scalars", {})
    for pi, p in enumerate(params):
        keys = meta["state_keys"].get(str(pi), [])
        if not keys:
            continue
        state = {}
        for k in keys:
            tkey = f"{tag}.{pi}.{k}"
            state[k] = tensors[tkey].clone() if tkey in tensors else scalars[tkey]
        opt.state[p] = state


def save_checkpoint(out_dir, exp, level_index, g, d, opt_g, opt_d, step_gen,
                    iteration, counters, seed, metric_history) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    g_weights, g_stats = split_bn_stats(g)
    d_weights, d_stats = split_bn_stats(d)
    weights = {f"g.{k}": v for k, v in g_weights.items()}
    weights.update({f"d.{k}": v for k, v in d_weights.items()})
    io.save_named_tensors(out_dir / "weights.bin", weights, meta={"level": level_index})
    stats = {f"g.{k}": v for k, v in g_stats.items()}
    stats.update({f"d.{k}": v for k, v in d_stats.items()})
    (out_dir / "bn_stats.json").write_text(json.dumps(stats))
    opt_tensors_g, opt_meta_g = _optimizer_tensors(opt_g, "g")
    opt_tensors_d, opt_meta_d = _optimizer_tensors(opt_d, "d")
    io.save_named_tensors(
        out_dir / "optimizer.bin",
        {**opt_tensors_g, **opt_tensors_d},
        meta={"g": opt_meta_g, "d": opt_meta_d},
    )
    (out_dir / "config.json").write_text(
        json.dumps({"experiment": to_dict(exp), "level_index": level_index}, indent=2)
    )
    (out_dir / "meta.json").write_text(
        json.dumps(
            {
                "format_version": 1,
                "level_index": level_index,
                "iteration": iteration,
                "seed": seed,
                "counters": vars(counters),
                "metric_history": metric_history,
                "rng_state": io.encode_rng_state(step_gen),
            }
        )
    )


def load_checkpoint(ckpt_dir, g, d=None, opt_g=None, opt_d=None) -> dict:
    ckpt_dir = Path(ckpt_dir)
    load_model_state(ckpt_dir, g, "g.")
    if d is not None:
        load_model_state(ckpt_dir, d, "d.")
    if opt_g is not None or opt_d is not None:
        tensors, meta = io.load_named_tensors(ckpt_dir / "optimizer.bin")
        if opt_g is not None:
            _load_optimizer_tensors(opt_g, tensors, meta["g"], "g")
        if opt_d is not None:
            _load_optimizer_tensors(opt_d, tensors, meta["d"], "d")
    return json.loads((ckpt_dir / "meta.json").read_text())


# -- the level loop -----------------------------------------------------------


def train_level(exp: ExperimentConfig, level_index: int, dataset, out_root,
                steps: int | None = None, seed: int | None = None, resume: bool = False,
                log=None) -> Path:
    """Train one hierarchy level to its step budget and checkpoint it.

    All lower levels must already be checkpointed under `out_root`.
    Deterministic given the seed (single worker).
    """
    if not 1 <= level_index <= exp.num_levels:
        raise ValueError(f"level {level_index} out of range 1..{exp.num_levels}")
    for lvl in range(1, level_index):
        if not checkpoint_exists(out_root, lvl):
            raise PrerequisiteError(
                f"cannot train level {level_index}: level {lvl} has no checkpoint under "
                f"{level_dir(out_root, lvl)}; train levels in order"
            )
    sampler = TrainingSampler(dataset, exp.pyramid_factors(), exp.data_reduce)
    frozen = (
        FrozenHierarchy.load(exp, out_root, level_index - 1) if level_index > 1 else None
    )
    trainer = LevelTrainer(exp, level_index, sampler, out_root, frozen=frozen, seed=seed)
    if resume:
        trainer.restore()
    budget = exp.training.steps_per_level[level_index - 1] if steps is None else steps
    every = exp.training.checkpoint_every
    while trainer.iteration < budget:
        metrics = trainer.train_step()
        if trainer.iteration % exp.training.log_every == 0 or trainer.iteration == budget:
            trainer.metric_history.append({"iteration": trainer.iteration, **metrics})
            if log is not None:
                log(
                    f"level {level_index} step {trainer.iteration}/{budget} "
                    f"loss_d={metrics['loss_d']:.3f} loss_g={metrics['loss_g']:.3f}"
                )
        if trainer.iteration % every == 0:
            trainer.save()
    trainer.save()
    return trainer.out_dir
