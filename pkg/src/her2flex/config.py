"""Run configuration: nested dataclasses persisted as INI files.

Example::

    [run]
    seed = 7

    [data]
    n_per_grade = 500
    size = 64

    [optim]
    lr = 1e-4
    epochs = 30
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import AugmentConfig
from .fusion import NetConfig


@dataclass
class DataConfig:
    root: Optional[str] = None
    n_per_grade: int = 500
    size: int = 64


@dataclass
class ModelConfig:
    shared_widths: tuple = (16, 32, 64, 64)
    shared_strides: tuple = (2, 2, 2, 1)
    specific_widths: tuple = (16, 32, 32)
    specific_strides: tuple = (2, 2, 2)
    reduced_channels: int = 64
    reduction: int = 8
    gen_base: int = 8
    gen_depth: int = 3
    disc_base: int = 8
    disc_layers: int = 2
    selector_widths: tuple = (8, 16, 32)

    def net_config(self, attention: bool = True) -> NetConfig:
        return NetConfig(
            shared_widths=tuple(self.shared_widths),
            shared_strides=tuple(self.shared_strides),
            specific_widths=tuple(self.specific_widths),
            specific_strides=tuple(self.specific_strides),
            reduced_channels=self.reduced_channels,
            reduction=self.reduction,
            attention=attention,
        )


@dataclass
class LossConfig:
    lambda_domain: float = 1.0
    lambda_align: float = 0.1
    lambda_gan: float = 1.0
    lambda_l1: float = 100.0
    pyramid_levels: int = 3
    class_weights: str = "inverse_frequency"

    def __post_init__(self):
        for name in ("lambda_domain", "lambda_align", "lambda_gan", "lambda_l1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.class_weights not in ("inverse_frequency", "uniform"):
            raise ValueError(f"unknown class weight mode {self.class_weights!r}")


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    poly_power: float = 0.9
    batch_size: int = 16
    epochs: int = 30
    gan_epochs: int = 30
    gan_lr: float = 1e-4
    selector_epochs: int = 5
    selector_lr: float = 1e-3
    joint_epochs: int = 5


@dataclass
class EvalConfig:
    arms: tuple = ("he_only_baseline", "ihc_only_baseline", "he_plus_fake_ihc", "ihc_plus_fake_he",
                   "dual_concat_baseline", "dual_full", "dual_no_attention")
    corrupt_modality: str = "none"
    corrupt_brightness: float = -0.3
    corrupt_noise: float = 0.1
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000
    figures: bool = True


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {"run": {"seed": self.seed}}
        for name in _SECTIONS:
            out[name] = {f.name: _plain(getattr(getattr(self, name), f.name))
                         for f in fields(getattr(self, name))}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "seed" not in d.get("run", {}):
            raise ValueError("config must set [run] seed")
        kwargs = {"seed": int(d["run"]["seed"])}
        for name, typ in _SECTIONS.items():
            section = d.get(name, {})
            known = {f.name: f for f in fields(typ)}
            unknown = set(section) - set(known)
            if unknown:
                raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
            defaults = typ()
            vals = {k: _coerce(v, getattr(defaults, k)) for k, v in section.items()}
            kwargs[name] = typ(**vals)
        return cls(**kwargs)

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for k, v in values.items():
                if isinstance(v, list):
                    v = ", ".join(str(x) for x in v)
                elif v is None:
                    v = ""
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        return cls.from_dict({s: dict(parser[s]) for s in parser.sections()})

    def replace(self, **sections) -> "RunConfig":
        """Copy with section fields overridden, e.g. ``replace(optim={"epochs": 2})``."""
        d = self.to_dict()
        for name, vals in sections.items():
            if name == "seed":
                d["run"]["seed"] = vals
            else:
                d[name].update(vals)
        return RunConfig.from_dict(d)


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "augment": AugmentConfig,
    "eval": EvalConfig,
}


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _coerce(value, default):
    """Parse INI strings (and JSON-ish values) to the type of the default."""
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    s = value.strip()
    if isinstance(default, bool):
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(s)
    if isinstance(default, float):
        return float(s)
    if isinstance(default, tuple):
        items = [x.strip() for x in s.split(",") if x.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(x) for x in items)
        return tuple(items)
    if default is None:
        return s or None
    return s


def default_config(seed: int = 0) -> RunConfig:
    return RunConfig(seed=seed)


__all__ = [
    "RunConfig",
    "DataConfig",
    "ModelConfig",
    "LossConfig",
    "OptimConfig",
    "EvalConfig",
    "default_config",
]
