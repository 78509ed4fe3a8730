"""Experiment configuration: dataclasses, JSON schema validation, presets.

An experiment is one dataset spec plus an ordered hierarchy of level configs
(the first level generates whole coarse clips; each upsampler refines by its
(K_T, K_S) factors, training on fixed-length windows), an optimizer block and
an evaluation block. `data_reduce` maps the dataset's native resolution down
to the finest modeled level, so a two-level model can train against the
middle views of a larger source.

Configs are plain JSON documents validated against SCHEMA (with field paths
in error messages) and then semantically: factor chains must reproduce the
dataset resolution, windows must fit the previous level, and the unit
schedules must reach their target resolutions exactly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .generators import first_level_plan, upsampler_plan


@dataclass
class LevelConfig:
    role: str
    ch: int
    g_mults: list[int]
    d_base: int
    d_mults: list[int]
    spatial_k: int = 8
    temporal_unit: str = ""
    noise_dim: int = 128
    embed_dim: int = 128
    conditional: bool = True
    # first level only
    frames: int = 0
    height: int = 0
    width: int = 0
    # upsampler only
    k_t: int = 1
    k_s: int = 1
    window: int = 0
    matching_d: bool = True

    def __post_init__(self):
        if self.role not in ("first", "upsampler"):
            raise ValueError(f"unknown level role {self.role!r}")
        if not self.temporal_unit:
            self.temporal_unit = "convgru" if self.role == "first" else "sep3d"


@dataclass
class OptimizerConfig:
    lr_g: float = 1e-4
    lr_d: float = 5e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    d_steps_per_g: int = 2
    batch_size: int = 16

    def __post_init__(self):
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be non-negative")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be >= 1")


@dataclass
class DatasetConfig:
    num_videos: int = 512
    frames: int = 32
    height: int = 32
    width: int = 32
    num_classes: int = 4
    root: str | None = None


@dataclass
class TrainingConfig:
    steps_per_level: list[int] = field(default_factory=lambda: [1000, 1000])
    checkpoint_every: int = 200
    log_every: int = 50


@dataclass
class EvalConfig:
    n_samples: int = 256
    sigma: float = 1.0
    recompute_passes: int = 200
    recompute_batch: int = 8
    extractor_steps: int = 800
    extractor_batch: int = 32


@dataclass
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    hierarchy: list[LevelConfig]
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data_reduce: tuple[int, int] = (1, 1)  # (K_T, K_S) dataset -> finest level
    seed: int = 0
    end_to_end: LevelConfig | None = None  # comparison config for the scaling harness
    shapes_only: bool = False

    @property
    def num_levels(self) -> int:
        return len(self.hierarchy)

    def pyramid_factors(self) -> list[tuple[int, int]]:
        return [(l.k_t, l.k_s) for l in self.hierarchy[1:]]

    def level_train_shapes(self) -> list[tuple[int, int, int]]:
        """(frames, H, W) of each level's training-time output."""
        first = self.hierarchy[0]
        shapes = [(first.frames, first.height, first.width)]
        h, w = first.height, first.width
        for lvl in self.hierarchy[1:]:
            h, w = h * lvl.k_s, w * lvl.k_s
            shapes.append((lvl.window * lvl.k_t, h, w))
        return shapes

    def level_full_shapes(self, frames_level1: int | None = None) -> list[tuple[int, int, int]]:
        """(frames, H, W) of each level's output when nothing is cropped."""
        first = self.hierarchy[0]
        t = first.frames if frames_level1 is None else frames_level1
        shapes = [(t, first.height, first.width)]
        h, w = first.height, first.width
        for lvl in self.hierarchy[1:]:
            t, h, w = t * lvl.k_t, h * lvl.k_s, w * lvl.k_s
            shapes.append((t, h, w))
        return shapes


_LEVEL_SCHEMA = {
    "type": "object",
    "properties": {
        "role": {"enum": ["first", "upsampler"]},
        "ch": {"type": "integer", "minimum": 1},
        "g_mults": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "d_base": {"type": "integer", "minimum": 1},
        "d_mults": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "spatial_k": {"type": "integer", "minimum": 1},
        "temporal_unit": {"enum": ["", "convgru", "sep3d"]},
        "noise_dim": {"type": "integer", "minimum": 1},
        "embed_dim": {"type": "integer", "minimum": 1},
        "conditional": {"type": "boolean"},
        "frames": {"type": "integer", "minimum": 0},
        "height": {"type": "integer", "minimum": 0},
        "width": {"type": "integer", "minimum": 0},
        "k_t": {"type": "integer", "minimum": 1},
        "k_s": {"type": "integer", "minimum": 1},
        "window": {"type": "integer", "minimum": 0},
        "matching_d": {"type": "boolean"},
    },
    "required": ["role", "ch", "g_mults", "d_base", "d_mults"],
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "shapes_only": {"type": "boolean"},
        "data_reduce": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "minItems": 2,
            "maxItems": 2,
        },
        "dataset": {
            "type": "object",
            "properties": {
                "num_videos": {"type": "integer", "minimum": 1},
                "frames": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "num_classes": {"type": "integer", "minimum": 1},
                "root": {"type": ["string", "null"]},
            },
            "additionalProperties": False,
        },
        "hierarchy": {"type": "array", "items": _LEVEL_SCHEMA, "minItems": 1},
        "end_to_end": {**_LEVEL_SCHEMA, "type": ["object", "null"]},
        "optimizer": {
            "type": "object",
            "properties": {
                "lr_g": {"type": "number", "minimum": 0},
                "lr_d": {"type": "number", "minimum": 0},
                "beta1": {"type": "number"},
                "beta2": {"type": "number"},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "d_steps_per_g": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "training": {
            "type": "object",
            "properties": {
                "steps_per_level": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "checkpoint_every": {"type": "integer", "minimum": 1},
                "log_every": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {
                "n_samples": {"type": "integer", "minimum": 2},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "recompute_passes": {"type": "integer", "minimum": 0},
                "recompute_batch": {"type": "integer", "minimum": 1},
                "extractor_steps": {"type": "integer", "minimum": 1},
                "extractor_batch": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
    },
    "required": ["name", "dataset", "hierarchy"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def _schema_check(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors[:5]:
            path = "$" + "".join(
                f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path
            )
            msgs.append(f"{path}: {e.message}")
        raise ConfigError("config schema violation(s): " + "; ".join(msgs))


def from_dict(raw: dict) -> ExperimentConfig:
    _schema_check(raw)
    raw = copy.deepcopy(raw)
    hierarchy = [LevelConfig(**l) for l in raw.pop("hierarchy")]
    dataset = DatasetConfig(**raw.pop("dataset"))
    optimizer = OptimizerConfig(**raw.pop("optimizer", {}))
    training = TrainingConfig(**raw.pop("training", {}))
    eval_cfg = EvalConfig(**raw.pop("eval", {}))
    e2e = raw.pop("end_to_end", None)
    exp = ExperimentConfig(
        name=raw.pop("name"),
        dataset=dataset,
        hierarchy=hierarchy,
        optimizer=optimizer,
        training=training,
        eval=eval_cfg,
        data_reduce=tuple(raw.pop("data_reduce", (1, 1))),
        seed=raw.pop("seed", 0),
        end_to_end=LevelConfig(**e2e) if e2e else None,
        shapes_only=raw.pop("shapes_only", False),
    )
    validate_experiment(exp)
    return exp


def to_dict(exp: ExperimentConfig) -> dict:
    def level(l: LevelConfig) -> dict:
        return {
            "role": l.role, "ch": l.ch, "g_mults": list(l.g_mults), "d_base": l.d_base,
            "d_mults": list(l.d_mults), "spatial_k": l.spatial_k, "temporal_unit": l.temporal_unit,
            "noise_dim": l.noise_dim, "embed_dim": l.embed_dim, "conditional": l.conditional,
            "frames": l.frames, "height": l.height, "width": l.width,
            "k_t": l.k_t, "k_s": l.k_s, "window": l.window, "matching_d": l.matching_d,
        }

    return {
        "name": exp.name,
        "seed": exp.seed,
        "shapes_only": exp.shapes_only,
        "data_reduce": list(exp.data_reduce),
        "dataset": {k: v for k, v in vars(exp.dataset).items()},
        "hierarchy": [level(l) for l in exp.hierarchy],
        "end_to_end": level(exp.end_to_end) if exp.end_to_end else None,
        "optimizer": {k: v for k, v in vars(exp.optimizer).items()},
        "training": {
            "steps_per_level": list(exp.training.steps_per_level),
            "checkpoint_every": exp.training.checkpoint_every,
            "log_every": exp.training.log_every,
        },
        "eval": {k: v for k, v in vars(exp.eval).items()},
    }


def validate_experiment(exp: ExperimentConfig) -> None:
    levels = exp.hierarchy
    if levels[0].role != "first":
        raise ConfigError("hierarchy[0] must have role 'first'")
    for i, lvl in enumerate(levels[1:], start=1):
        if lvl.role != "upsampler":
            raise ConfigError(f"hierarchy[{i}] must have role 'upsampler'")
        if lvl.window < 1:
            raise ConfigError(f"hierarchy[{i}].window must be >= 1")
    first = levels[0]
    if first.frames < 1 or first.height < 1 or first.width < 1:
        raise ConfigError("first level needs frames/height/width")
    # Unit schedules must reach their targets exactly.
    first_level_plan(first.ch, first.g_mults, first.height, first.width)
    h, w = first.height, first.width
    t = first.frames
    for i, lvl in enumerate(levels[1:], start=1):
        upsampler_plan(lvl.ch, lvl.g_mults, h, w, lvl.k_s)
        if lvl.window > t:
            raise ConfigError(
                f"hierarchy[{i}].window={lvl.window} exceeds the previous level's "
                f"{t} training frames"
            )
        if lvl.spatial_k > lvl.window * lvl.k_t:
            raise ConfigError(
                f"hierarchy[{i}].spatial_k={lvl.spatial_k} exceeds the level's "
                f"{lvl.window * lvl.k_t} output frames"
            )
        t, h, w = t * lvl.k_t, h * lvl.k_s, w * lvl.k_s
    if first.spatial_k > first.frames:
        raise ConfigError("hierarchy[0].spatial_k exceeds the first level's frame count")
    # Factor chain must reproduce the dataset resolution.
    rt, rs = exp.data_reduce
    ds = exp.dataset
    if (ds.frames // rt != t) or (ds.height // rs != h) or (ds.width // rs != w) or \
            ds.frames % rt or ds.height % rs or ds.width % rs:
        raise ConfigError(
            f"factor chain mismatch: dataset {ds.frames}/{ds.height}x{ds.width} with "
            f"data_reduce {exp.data_reduce} does not reach the finest level "
            f"{t}/{h}x{w}"
        )
    if exp.end_to_end is not None:
        e = exp.end_to_end
        first_level_plan(e.ch, e.g_mults, e.height, e.width)
    steps = exp.training.steps_per_level
    if steps and len(steps) != len(levels):
        raise ConfigError(
            f"training.steps_per_level has {len(steps)} entries for {len(levels)} levels"
        )


def load_config(path) -> ExperimentConfig:
    return from_dict(json.loads(Path(path).read_text()))


def _desk_common(name: str, ch: int, d_base: int, batch: int, steps: list[int]) -> dict:
    levels = [
        {
            "role": "first", "frames": 8, "height": 8, "width": 8,
            "ch": ch, "g_mults": [4, 2], "d_base": d_base, "d_mults": [1, 2],
            "spatial_k": 8, "temporal_unit": "convgru",
        },
        {
            "role": "upsampler", "k_t": 2, "k_s": 2, "window": 4,
            "ch": ch, "g_mults": [4, 2, 1], "d_base": d_base, "d_mults": [1, 2, 4],
            "spatial_k": 8, "temporal_unit": "sep3d",
        },
    ]
    return {
        "name": name,
        "seed": 0,
        "dataset": {"num_videos": 512, "frames": 32, "height": 32, "width": 32, "num_classes": 4},
        "data_reduce": [1, 1],
        "hierarchy": levels,
        "optimizer": {"batch_size": batch},
        "training": {"steps_per_level": steps, "checkpoint_every": 200},
        "eval": {"n_samples": 256, "sigma": 1.0},
    }


def _preset_desk3() -> dict:
    cfg = _desk_common("desk3", 32, 24, 16, [1500, 2000, 2000])
    cfg["hierarchy"].append(
        {
            "role": "upsampler", "k_t": 2, "k_s": 2, "window": 4,
            "ch": 32, "g_mults": [4, 2, 1], "d_base": 24, "d_mults": [1, 2, 4],
            "spatial_k": 8, "temporal_unit": "sep3d",
        }
    )
    cfg["end_to_end"] = {
        "role": "first", "frames": 32, "height": 32, "width": 32,
        "ch": 32, "g_mults": [8, 4, 2, 1], "d_base": 24, "d_mults": [1, 2, 4],
        "spatial_k": 8, "temporal_unit": "convgru",
    }
    return cfg


def _preset_desk2() -> dict:
    cfg = _desk_common("desk2", 16, 12, 8, [600, 900])
    cfg["data_reduce"] = [2, 2]
    cfg["end_to_end"] = {
        "role": "first", "frames": 16, "height": 16, "width": 16,
        "ch": 16, "g_mults": [4, 2, 1], "d_base": 12, "d_mults": [1, 2],
        "spatial_k": 8, "temporal_unit": "convgru",
    }
    return cfg


def _preset_kinetics() -> dict:
    return {
        "name": "paper-kinetics-128",
        "shapes_only": True,
        "training": {"steps_per_level": [300000, 300000]},
        "dataset": {"num_videos": 1, "frames": 48, "height": 128, "width": 128,
                    "num_classes": 600},
        "data_reduce": [1, 1],
        "hierarchy": [
            {
                "role": "first", "frames": 24, "height": 32, "width": 32,
                "ch": 128, "g_mults": [8, 8, 4, 2], "d_base": 128,
                "d_mults": [2, 4, 8, 16, 16], "spatial_k": 8, "temporal_unit": "convgru",
            },
            {
                "role": "upsampler", "k_t": 2, "k_s": 4, "window": 6,
                "ch": 128, "g_mults": [8, 8, 4, 2, 1], "d_base": 96,
                "d_mults": [1, 2, 4, 8, 16, 16], "spatial_k": 8, "temporal_unit": "sep3d",
            },
        ],
    }


def _preset_bdd() -> dict:
    return {
        "name": "paper-bdd-256",
        "shapes_only": True,
        "training": {"steps_per_level": [100000, 100000, 100000]},
        "dataset": {"num_videos": 1, "frames": 48, "height": 256, "width": 256,
                    "num_classes": 1},
        "data_reduce": [1, 1],
        "hierarchy": [
            {
                "role": "first", "frames": 12, "height": 64, "width": 64,
                "ch": 96, "g_mults": [8, 8, 4, 2, 1], "d_base": 96,
                "d_mults": [1, 2, 4, 8, 16], "spatial_k": 8, "temporal_unit": "convgru",
                "conditional": False,
            },
            {
                "role": "upsampler", "k_t": 2, "k_s": 2, "window": 6,
                "ch": 96, "g_mults": [8, 8, 4, 2, 1], "d_base": 96,
                "d_mults": [1, 2, 4, 8, 16, 16], "spatial_k": 8, "temporal_unit": "sep3d",
                "conditional": False,
            },
            {
                "role": "upsampler", "k_t": 2, "k_s": 2, "window": 6,
                "ch": 96, "g_mults": [8, 4, 4, 4, 2, 1], "d_base": 96,
                "d_mults": [1, 2, 4, 8, 8, 16, 16], "spatial_k": 8, "temporal_unit": "sep3d",
                "conditional": False,
            },
        ],
    }


PRESETS = {
    "desk3": _preset_desk3,
    "desk2": _preset_desk2,
    "paper-kinetics-128": _preset_kinetics,
    "paper-bdd-256": _preset_bdd,
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return from_dict(PRESETS[name]())


def resolve_config(path_or_preset: str) -> ExperimentConfig:
    if path_or_preset in PRESETS:
        return preset(path_or_preset)
    p = Path(path_or_preset)
    if not p.exists():
        raise ConfigError(f"{path_or_preset!r} is neither a preset name nor a config file")
    return load_config(p)
