"""Run configuration: dataclass sections, named profiles, strict YAML loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import yaml

from .encoders import ClassVocabulary, EncoderSpec, ValidationError
from .losses import LossWeights
from .model import SegDecoderConfig, SegModel
from .synthdata import SceneSpec
from .training import TrainConfig


class ConfigError(ValidationError):
    """Unknown keys, malformed values, or inconsistent sections."""


@dataclass
class PoolEncoderConfig:
    name: str
    stride: int
    out_dim: int
    seed: int = 0


@dataclass
class PoolConfig:
    encoders: list[PoolEncoderConfig] = field(default_factory=list)
    prompt_encoder: str = ""
    text_dim: int = 64
    text_seed: int = 11


@dataclass
class ModelConfig:
    width: int = 64
    num_queries: int = 20
    aligner_blocks: int = 1
    decoder_blocks: int = 6
    num_heads: int = 8
    ffn_dim: int = 256
    mask_mlp_depth: int = 3
    init_seed: int = 0
    dtype: str = "float32"


@dataclass
class LossConfig:
    class_weight: float = 2.0
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    no_object_weight: float = 0.1


@dataclass
class DataConfig:
    root: str = "data/shapes"
    image_size: int = 128
    n_images: int = 550
    n_instances: tuple[int, int] = (1, 3)
    shape_classes: tuple[str, ...] = ("circle", "square", "triangle")
    background_noise: float = 0.05
    overlap_allowed: bool = False
    seed: int = 0


@dataclass
class EvalConfig:
    score_threshold: float = 0.5
    mask_threshold: float = 0.5
    overlap_keep: float = 0.8
    fewshot_shots: int = 3
    vos_capacity: int = 8
    vos_frames: int = 10
    vos_videos: int = 5
    vos_score_threshold: float = 0.5


@dataclass
class RunConfig:
    profile: str = "desk"
    pool: PoolConfig = field(default_factory=PoolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def desk_profile() -> RunConfig:
    """CPU-scale defaults: small widths, short schedule, shapes benchmark."""
    return RunConfig(
        profile="desk",
        pool=PoolConfig(
            encoders=[
                PoolEncoderConfig(name="fine", stride=8, out_dim=64, seed=1),
                PoolEncoderConfig(name="coarse", stride=16, out_dim=64, seed=2),
            ],
            prompt_encoder="fine",
            text_dim=64,
            text_seed=11,
        ),
        model=ModelConfig(width=64, num_queries=20, aligner_blocks=1, decoder_blocks=4,
                          num_heads=8, ffn_dim=256, mask_mlp_depth=3, dtype="float32"),
        loss=LossConfig(),
        train=TrainConfig(steps=2000, batch_size=8, base_lr=3e-4, warmup_steps=100,
                          weight_decay=0.05, seed=0, scale_jitter=(0.8, 1.25),
                          crop_size=128, n_negatives=2),
        data=DataConfig(),
        eval=EvalConfig(),
    )


def paper_profile() -> RunConfig:
    """Full-scale reference hyperparameters; not runnable on a desk CPU."""
    return RunConfig(
        profile="paper",
        pool=PoolConfig(
            encoders=[
                PoolEncoderConfig(name="semantic", stride=14, out_dim=1024, seed=1),
                PoolEncoderConfig(name="boundary", stride=16, out_dim=768, seed=2),
            ],
            prompt_encoder="semantic",
            text_dim=768,
            text_seed=11,
        ),
        model=ModelConfig(width=256, num_queries=100, aligner_blocks=1, decoder_blocks=6,
                          num_heads=8, ffn_dim=2048, mask_mlp_depth=3, dtype="float32"),
        loss=LossConfig(),
        train=TrainConfig(steps=50000, batch_size=64, base_lr=1e-4, warmup_steps=100,
                          weight_decay=0.05, seed=0, scale_jitter=(0.1, 2.0),
                          crop_size=896, n_negatives=8),
        data=DataConfig(root="data/shapes-large", image_size=896, n_images=550),
        eval=EvalConfig(),
    )


_PROFILES = {"desk": desk_profile, "paper": paper_profile}


def profile_defaults(name: str) -> RunConfig:
    if name not in _PROFILES:
        raise ConfigError(f"unknown profile {name!r}; available: {sorted(_PROFILES)}")
    return _PROFILES[name]()


_TUPLE_FIELDS = {"n_instances", "scale_jitter", "shape_classes", "betas"}


def _apply_section(section_obj, section_name: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section_name!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(section_obj)}
    staged = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section {section_name!r}")
        if section_name == "pool" and key == "encoders":
            encs = []
            for i, e in enumerate(value):
                known = {f.name for f in dataclasses.fields(PoolEncoderConfig)}
                for k in e:
                    if k not in known:
                        raise ConfigError(f"unknown key {k!r} in pool.encoders[{i}]")
                encs.append(PoolEncoderConfig(**e))
            value = encs
        elif isinstance(value, list) and key in _TUPLE_FIELDS:
            value = tuple(value)
        staged[key] = value
    # one replace so per-field validation sees the final state, not a
    # half-applied one that depends on key order
    return replace(section_obj, **staged)


_SECTIONS = ("pool", "model", "loss", "train", "data", "eval")


def config_from_dict(raw: dict, profile_override: str | None = None) -> RunConfig:
    raw = dict(raw or {})
    profile = profile_override or raw.pop("profile", None) or "desk"
    if not profile_override:
        raw.pop("profile", None)
    cfg = profile_defaults(profile)
    for key, values in raw.items():
        if key == "profile":
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section {key!r}; expected one of {_SECTIONS}")
        cfg = replace(cfg, **{key: _apply_section(getattr(cfg, key), key, values)})
    validate_config(cfg)
    return cfg


def load_config(path: str | Path | None = None, profile: str | None = None,
                seed: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root in {path} must be a mapping")
        raw = loaded
    cfg = config_from_dict(raw, profile_override=profile)
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def validate_config(cfg: RunConfig):
    if not cfg.pool.encoders:
        raise ConfigError("pool.encoders must list at least one encoder")
    names = [e.name for e in cfg.pool.encoders]
    if len(set(names)) != len(names):
        raise ConfigError("pool encoder names must be unique")
    if cfg.pool.prompt_encoder not in names:
        raise ConfigError(
            f"pool.prompt_encoder {cfg.pool.prompt_encoder!r} not among encoders {names}")
    if cfg.model.dtype not in ("float32", "float64"):
        raise ConfigError(f"model.dtype must be float32 or float64, got {cfg.model.dtype!r}")
    if cfg.train.batch_size % 2:
        raise ConfigError(f"train.batch_size must be even, got {cfg.train.batch_size}")
    fine = min(e.stride for e in cfg.pool.encoders)
    if (cfg.train.crop_size * 4) % fine:
        raise ConfigError(
            f"crop_size {cfg.train.crop_size} times 4 must divide by finest stride {fine}")
    for e in cfg.pool.encoders:
        if cfg.data.image_size % e.stride:
            raise ConfigError(
                f"data.image_size {cfg.data.image_size} not divisible by stride "
                f"{e.stride} of encoder {e.name!r}")


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def build_pool(cfg: RunConfig) -> tuple[list[EncoderSpec], EncoderSpec]:
    pool = [EncoderSpec(name=e.name, stride=e.stride, out_dim=e.out_dim, seed=e.seed)
            for e in cfg.pool.encoders]
    by_name = {s.name: s for s in pool}
    return pool, by_name[cfg.pool.prompt_encoder]


def build_model(cfg: RunConfig) -> SegModel:
    pool, prompt_encoder = build_pool(cfg)
    m = cfg.model
    decoder_cfg = SegDecoderConfig(
        width=m.width, num_queries=m.num_queries, aligner_blocks=m.aligner_blocks,
        decoder_blocks=m.decoder_blocks, num_heads=m.num_heads, ffn_dim=m.ffn_dim,
        mask_mlp_depth=m.mask_mlp_depth, visual_dim=prompt_encoder.out_dim,
        text_dim=cfg.pool.text_dim)
    return SegModel(decoder_cfg, pool, prompt_encoder, init_seed=m.init_seed,
                    dtype=torch_dtype(m.dtype))


def build_loss_weights(cfg: RunConfig) -> LossWeights:
    l = cfg.loss
    return LossWeights(class_weight=l.class_weight, bce_weight=l.bce_weight,
                       dice_weight=l.dice_weight, no_object_weight=l.no_object_weight)


def build_scene_spec(cfg: RunConfig) -> SceneSpec:
    d = cfg.data
    return SceneSpec(image_size=d.image_size, n_instances=d.n_instances,
                     shape_classes=d.shape_classes, background_noise=d.background_noise,
                     overlap_allowed=d.overlap_allowed, seed=d.seed)


def build_vocabulary(cfg: RunConfig) -> ClassVocabulary:
    return ClassVocabulary(names=list(cfg.data.shape_classes))
