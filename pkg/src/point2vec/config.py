"""Run configuration: nested dataclasses loaded from JSON (``//`` comments allowed).

Defaults are the full-scale hyperparameters; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending key path."""


@dataclass
class AugmentationSpec:
    scale: tuple[float, float] | None = None  # uniform scale range
    anisotropic: float = 0.0  # per-axis factor drawn from [1 - f, 1 + f]
    rotate: bool = False  # rotation about the gravity axis
    unit_sphere: bool = False  # center on centroid, rescale max norm to 1
    gravity_axis: int = 2

    def __post_init__(self):
        if self.scale is not None:
            lo, hi = self.scale
            if not 0 < lo <= hi:
                raise ConfigError(f"scale needs 0 < lo <= hi, got {self.scale}")
        if not 0.0 <= self.anisotropic < 1.0:
            raise ConfigError(f"anisotropic must lie in [0, 1), got {self.anisotropic}")
        if self.gravity_axis not in (0, 1, 2):
            raise ConfigError(f"gravity_axis must be 0, 1 or 2, got {self.gravity_axis}")


@dataclass
class ModelConfig:
    embed_first: tuple[int, int] = (128, 256)
    embed_second: tuple[int, int] = (512, 384)
    pos_hidden: int = 128
    depth: int = 12
    dim: int = 384
    heads: int = 6
    mlp_ratio: float = 4.0
    qkv_bias: bool = True

    def __post_init__(self):
        if self.embed_second[1] != self.dim:
            raise ConfigError(f"embed_second[-1] ({self.embed_second[1]}) must equal model.dim ({self.dim})")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by model.heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")


@dataclass
class DataConfig:
    manifest: str | None = None
    source_points: int = 8192
    num_points: int = 1024
    num_centers: int = 64
    group_size: int = 32
    resample_per_epoch: bool = True


@dataclass
class PretrainConfig:
    mode: str = "point2vec"
    mask_strategy: str = "random"
    mask_ratio: float = 0.65
    target_layers: int = 6
    beta: float = 2.0
    decoder_depth: int | None = None  # 4 in point2vec mode; must be absent for data2vec_pc
    batch_size: int | None = None  # 512 (point2vec) / 2048 (data2vec_pc)
    lr: float | None = None  # 1e-3 (point2vec) / 2e-3 (data2vec_pc)
    epochs: int = 800
    warmup_epochs: int = 80
    weight_decay: float = 0.05
    min_lr: float = 0.0
    tau_start: float = 0.9998
    tau_end: float = 0.99999
    tau_warmup_epochs: int = 200
    drop_path: float = 0.0
    save_every: int = 100
    augment: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(scale=(0.8, 1.2), rotate=True))

    def __post_init__(self):
        if self.mode not in ("point2vec", "data2vec_pc"):
            raise ConfigError(f"mode must be 'point2vec' or 'data2vec_pc', got {self.mode!r}")
        if self.mask_strategy not in ("random", "block"):
            raise ConfigError(f"mask_strategy must be 'random' or 'block', got {self.mask_strategy!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.mode == "point2vec":
            if self.decoder_depth is None:
                self.decoder_depth = 4
            if self.decoder_depth < 1:
                raise ConfigError("decoder_depth must be >= 1 in point2vec mode")
        elif self.decoder_depth is not None:
            raise ConfigError("decoder_depth is not allowed in data2vec_pc mode (no decoder)")
        if self.batch_size is None:
            self.batch_size = 512 if self.mode == "point2vec" else 2048
        if self.lr is None:
            self.lr = 1e-3 if self.mode == "point2vec" else 2e-3
        if self.target_layers < 1:
            raise ConfigError("target_layers must be >= 1")


@dataclass
class FinetuneConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = 3e-4
    scratch_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    min_lr: float = 0.0
    freeze_epochs: int = 100
    drop_path: float = 0.2
    head_dims: tuple[int, int] = (256, 256)
    head_dropout: float = 0.5
    label_smoothing: float = 0.2
    augment: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(anisotropic=0.4, unit_sphere=True))


@dataclass
class PartSegConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    min_lr: float = 0.0
    freeze_epochs: int = 0
    drop_path: float = 0.2
    num_points: int = 2048
    num_centers: int = 128
    group_size: int = 32
    feature_layers: tuple[int, ...] = (4, 8, 12)
    interp_k: int = 3
    head_dims: tuple[int, int] = (512, 256)
    head_dropout: float = 0.5
    augment: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(unit_sphere=True))


@dataclass
class FewShotConfig:
    way: int = 5
    shot: int = 10
    query: int = 20
    runs: int = 10


@dataclass
class AnalysisConfig:
    strategies: tuple[str, ...] = ("random", "block")
    ratios: tuple[float, ...] = (0.4, 0.5, 0.65, 0.8, 0.9)
    samples: int = 8
    export: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    strict: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    partseg: PartSegConfig = field(default_factory=PartSegConfig)
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)


def strip_comments(text: str) -> str:
    """Drop ``//`` line comments that are outside JSON strings."""
    out = []
    for line in text.splitlines():
        in_str = False
        escaped = False
        cut = len(line)
        for i, ch in enumerate(line):
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = not in_str
            elif not in_str and line.startswith("//", i):
                cut = i
                break
        out.append(line[:cut])
    return "\n".join(out)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}" if path else str(exc)) from None


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(strip_comments(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(RunConfig, raw)
