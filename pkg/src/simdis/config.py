"""Experiment configuration: schemes, view target sets, and the YAML file format."""

from __future__ import annotations

import dataclasses
import enum
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import torch
import yaml

RUN_DIR_ENV = "SIMDIS_RUN_DIR"


class ConfigError(ValueError):
    """Raised when a configuration file cannot be parsed or fails validation."""


class Scheme(str, enum.Enum):
    TEACHER_ONLY = "teacher_only"
    SIMDIS_OFF = "simdis_off"
    SIMDIS_ON = "simdis_on"
    SIMDIS_ON_7V = "simdis_on_7v"
    CUSTOM = "custom"


class View(str, enum.Enum):
    """The seven projections a student prediction from S-v can be asked to match."""

    S_VP = "S_vp"
    SHAT_V = "Shat_v"
    SHAT_VP = "Shat_vp"
    T_V = "T_v"
    T_VP = "T_vp"
    THAT_V = "That_v"
    THAT_VP = "That_vp"

    @property
    def family(self) -> str:
        return "student" if self.value.startswith("S") else "teacher"

    @property
    def branch(self) -> str:
        """``online`` or ``target``."""
        return "target" if "hat" in self.value else "online"

    @property
    def view(self) -> str:
        """``v`` or ``vp``."""
        return self.value.rsplit("_", 1)[1]


VIEW_ORDER = tuple(View)


@dataclass(frozen=True)
class ViewTargetSet:
    """One row of the view-combination grid.

    ``Shat_vp`` is the BYOL target and is always implied; listing it never adds
    a second copy of that term to the distillation sum.
    """

    members: frozenset

    def __init__(self, members: Iterable[View | str] = ()):
        items = list(members)
        parsed = []
        for m in items:
            try:
                parsed.append(View(m))
            except ValueError:
                raise ConfigError(f"view_targets: unknown view {m!r}") from None
        if len(set(parsed)) != len(parsed):
            raise ConfigError(f"view_targets: duplicate members in {items}")
        object.__setattr__(self, "members", frozenset(parsed))

    def __iter__(self):
        return (v for v in VIEW_ORDER if v in self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, item) -> bool:
        return View(item) in self.members

    @property
    def distill_members(self) -> tuple[View, ...]:
        """Targets that contribute to the distillation term (everything but the BYOL target)."""
        return tuple(v for v in self if v is not View.SHAT_VP)

    @property
    def uses_teacher(self) -> bool:
        return any(v.family == "teacher" for v in self.members)

    @property
    def num_views(self) -> int:
        """Views predicted in total, counting the implicit BYOL target once."""
        return len(self.members | {View.SHAT_VP})

    def to_list(self) -> list[str]:
        return [v.value for v in self]

    def __repr__(self) -> str:
        return f"ViewTargetSet({self.to_list()})"


ALL_VIEWS = ViewTargetSet(VIEW_ORDER)


def canonical_scheme_targets(scheme: Scheme | str) -> ViewTargetSet:
    scheme = Scheme(scheme)
    if scheme in (Scheme.SIMDIS_ON, Scheme.SIMDIS_OFF):
        return ViewTargetSet([View.THAT_VP])
    if scheme is Scheme.SIMDIS_ON_7V:
        return ALL_VIEWS
    raise ConfigError(f"scheme {scheme.value!r} has no canonical distillation targets")


@dataclass
class DataConfig:
    name: str = "shapes_mono"
    root: str = "data"
    image_size: int = 16
    num_classes: int = 10
    # Subsample the training split (0 keeps everything).
    max_train: int = 0
    # Multiplier on every augmentation magnitude; 0 gives the identity pipeline.
    strength: float = 1.0
    crop_scale: tuple = (0.3, 1.0)
    crop_ratio: tuple = (0.75, 1.3333333333333333)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    # Max hue rotation as a fraction of the colour circle.
    hue: float = 0.5
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.0
    # Online mode: teacher and student see the same (v, v') pair.
    shared_views: bool = True


@dataclass
class ModelConfig:
    teacher_encoder: str = "resnet_w32"
    student_encoder: str = "resnet_w16"
    proj_hidden: int = 256
    proj_dim: int = 64


@dataclass
class OptimConfig:
    lr_reference_batch: int = 256
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: float = 2.0


@dataclass
class ProbeConfig:
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 256
    momentum: float = 0.9
    knn_k: int = 20


@dataclass
class SchemeConfig:
    scheme: Scheme = Scheme.TEACHER_ONLY
    view_targets: Optional[ViewTargetSet] = None
    epochs: int = 20
    batch_size: int = 64
    # Peak lr is base_lr * batch_size / optim.lr_reference_batch.
    base_lr: float = 0.4
    tau_base: float = 0.99
    seed: int = 0
    distill_weight: float = 1.0
    byol_weight: float = 1.0
    # Also predict swapped targets from S-v' and average both directions.
    symmetric_distill: bool = False
    teacher_checkpoint: Optional[str] = None
    pretrain_teacher: bool = False
    checkpoint_every: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        self.validate()

    @property
    def is_distilling(self) -> bool:
        return self.scheme is not Scheme.TEACHER_ONLY and bool(self.view_targets.distill_members)

    @property
    def has_student(self) -> bool:
        return self.scheme is not Scheme.TEACHER_ONLY

    def validate(self) -> None:
        try:
            self.scheme = Scheme(self.scheme)
        except ValueError:
            raise ConfigError(f"scheme: unknown value {self.scheme!r}") from None
        if self.view_targets is not None and not isinstance(self.view_targets, ViewTargetSet):
            self.view_targets = ViewTargetSet(self.view_targets)
        for name in ("epochs", "batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {v!r}")
        if not (self.base_lr > 0):
            raise ConfigError(f"base_lr: must be positive, got {self.base_lr!r}")
        if not (0.0 <= self.tau_base < 1.0):
            raise ConfigError(f"tau_base: must lie in [0, 1), got {self.tau_base!r}")
        for name in ("distill_weight", "byol_weight"):
            if not (getattr(self, name) >= 0):
                raise ConfigError(f"{name}: must be nonnegative, got {getattr(self, name)!r}")

        if self.scheme is Scheme.TEACHER_ONLY:
            if self.view_targets is not None and len(self.view_targets):
                raise ConfigError("view_targets: teacher_only runs have no student targets")
            self.view_targets = ViewTargetSet()
        elif self.scheme is Scheme.CUSTOM:
            if self.view_targets is None or not len(self.view_targets):
                raise ConfigError("view_targets: custom scheme needs a nonempty target set")
        elif self.scheme is Scheme.SIMDIS_ON_7V:
            if self.view_targets is not None and self.view_targets != ALL_VIEWS:
                raise ConfigError("view_targets: simdis_on_7v uses all 7 views")
            self.view_targets = ALL_VIEWS
        elif self.view_targets is None:
            self.view_targets = canonical_scheme_targets(self.scheme)
        elif not self.view_targets.distill_members:
            raise ConfigError(f"view_targets: {self.scheme.value} needs a distillation target")

        if self.scheme is Scheme.SIMDIS_OFF:
            if not self.teacher_checkpoint and not self.pretrain_teacher:
                raise ConfigError(
                    "teacher_checkpoint: simdis_off needs a teacher checkpoint or pretrain_teacher: true"
                )
        if self.model.proj_dim < 1 or self.model.proj_hidden < 1:
            raise ConfigError("model: projector widths must be positive")
        if not (0.0 <= self.data.strength):
            raise ConfigError("data.strength: must be nonnegative")

    def replace(self, **changes) -> "SchemeConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, ViewTargetSet):
                v = v.to_list()
            elif dataclasses.is_dataclass(v):
                v = {k: list(x) if isinstance(x, tuple) else x for k, x in dataclasses.asdict(v).items()}
            out[f.name] = v
        return out


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "optim": OptimConfig, "probe": ProbeConfig}


def _build_section(name: str, cls, raw: Any):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> SchemeConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    raw = dict(raw)
    known = {f.name for f in dataclasses.fields(SchemeConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    for name, cls in _SECTIONS.items():
        raw[name] = _build_section(name, cls, raw.get(name))
    if raw.get("view_targets") is not None:
        if not isinstance(raw["view_targets"], (list, tuple)):
            raise ConfigError("view_targets: expected a list of view names")
        raw["view_targets"] = ViewTargetSet(raw["view_targets"])
    try:
        return SchemeConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None


def load_config(path: str | os.PathLike) -> SchemeConfig:
    """Read and validate a YAML experiment config, filling defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: could not parse YAML: {exc}") from None
    return config_from_dict(raw)


def write_config(cfg: SchemeConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def derive_seed(seed: int, *keys: int | str) -> int:
    """Stable 63-bit seed for a named sub-stream of a run."""
    words = [seed & 0xFFFFFFFF]
    for k in keys:
        words.extend(k.encode() if isinstance(k, str) else [int(k) & 0xFFFFFFFF])
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0]) >> 1


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (1 << 32))
    torch.manual_seed(seed)
