"""Run configuration: presets, strict nested loading, serialization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .objectives import ObjectiveConfig
from .posenc import PosEncConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_feats: int = 64
    n_resblocks: int = 8
    mlp_hidden: tuple = (256, 256, 256, 256)
    hf_dim: int = 64
    d_z: int = 64
    enc_width: int = 128
    enc_heads: int = 4
    enc_self_blocks: int = 2
    enc_cross_blocks: int = 1
    feat_unfold: bool = True
    local_ensemble: bool = True
    cell_decode: bool = True


@dataclass(frozen=True)
class DataConfig:
    lr_patch: int = 48
    n_queries: int = 48 * 48
    n_tokens: int = 48 * 48
    ref_patch: int = 48
    scale_range: tuple = (1.0, 4.0)
    max_redraws: int = 8
    augment: bool = False
    noise_scale: str = "8bit"

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad scale_range {self.scale_range}")
        if self.noise_scale not in ("8bit", "unit"):
            raise ConfigError("noise_scale must be '8bit' or 'unit'")


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "paper"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    posenc: PosEncConfig = field(default_factory=lambda: PosEncConfig(10, 2))
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    lr_rate: float = 1e-4
    batch_size: int = 32
    total_iters: int = 100_000
    seed: int = 0
    checkpoint_every: int = 5000
    fakes_per_real: int = 1
    add_total_loss: bool = True
    val_scales: tuple = (2.0, 4.0)
    debug_phase_isolation: bool = False

    def __post_init__(self):
        for name in ("lr_rate", "batch_size", "total_iters", "checkpoint_every", "fakes_per_real"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.posenc.input_dim != 2:
            raise ConfigError("posenc.input_dim must be 2 for image coordinates")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")

    @property
    def scale_range(self):
        return self.data.scale_range

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


def _toy_overrides():
    return {
        "preset": "toy",
        "posenc": {"degree_L": 6},
        "model": {
            "n_feats": 16,
            "n_resblocks": 2,
            "mlp_hidden": [64, 64],
            "hf_dim": 16,
            "d_z": 16,
            "enc_width": 32,
            "enc_heads": 4,
            "enc_self_blocks": 1,
            "enc_cross_blocks": 1,
        },
        # 24-pixel LR patches let 96-pixel images supply the whole U(1, 4) scale range
        "data": {"lr_patch": 24, "n_queries": 24 * 24, "ref_patch": 24, "n_tokens": 64},
        "lr_rate": 5e-4,
        "batch_size": 8,
        "total_iters": 20_000,
        "checkpoint_every": 1000,
    }


PRESETS = {"paper": dict, "toy": _toy_overrides}


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _build(cls, values: dict, base, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, f in names.items():
        current = getattr(base, name)
        if name not in values:
            kwargs[name] = current
            continue
        v = values[name]
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), v, current, f"{path}{name}.")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(v)
        elif isinstance(current, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{path}{name}: expected a boolean")
            kwargs[name] = v
        elif isinstance(current, float):
            kwargs[name] = float(v)
        elif isinstance(current, int):
            if isinstance(v, bool) or int(v) != v:
                raise ConfigError(f"{path}{name}: expected an integer")
            kwargs[name] = int(v)
        else:
            kwargs[name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(values: dict) -> TrainConfig:
    """Build a config: start from the named preset, then apply ``values``."""
    values = dict(values or {})
    preset = values.get("preset", "paper")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    merged = _merge(PRESETS[preset](), values)
    merged["preset"] = preset
    return _build(TrainConfig, merged, TrainConfig(), "")


def preset(name: str, **overrides) -> TrainConfig:
    return from_dict({"preset": name, **overrides})


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        values = yaml.safe_load(fh) or {}
    return from_dict(values)


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
