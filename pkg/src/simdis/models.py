"""Encoders, projector/predictor heads, the online/target pairing and its EMA dynamics."""

from __future__ import annotations

import copy
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .config import Scheme, SchemeConfig, derive_seed

CHECKPOINT_FORMAT = "simdis-checkpoint"
CHECKPOINT_VERSION = 1


class ModelError(RuntimeError):
    pass


class ScheduleError(ValueError):
    pass


# --------------------------------------------------------------------------- building blocks


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    """Three-stage residual CNN for small images; output dim is 4 * width."""

    def __init__(self, width: int, in_channels: int = 3, blocks: int = 1):
        super().__init__()
        layers = [nn.Conv2d(in_channels, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU()]
        cin = width
        for i, mult in enumerate((1, 2, 4)):
            for b in range(blocks):
                stride = 2 if (i > 0 and b == 0) else 1
                layers.append(BasicBlock(cin, width * mult, stride))
                cin = width * mult
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.out_dim = cin

    def forward(self, x):
        return self.flatten(self.pool(self.body(x)))


_ENCODER_RE = re.compile(r"^resnet(?:(\d+)x)?_w(\d+)$")


def build_encoder(name: str, in_channels: int = 3) -> ResNetEncoder:
    """``resnet_w<width>`` or ``resnet<blocks>x_w<width>``, e.g. ``resnet_w32``, ``resnet2x_w16``."""
    m = _ENCODER_RE.match(name)
    if not m:
        raise ModelError(f"unknown encoder {name!r}; expected e.g. 'resnet_w32' or 'resnet2x_w16'")
    blocks = int(m.group(1) or 1)
    width = int(m.group(2))
    if width < 1 or blocks < 1:
        raise ModelError(f"encoder {name!r}: width and depth must be positive")
    return ResNetEncoder(width, in_channels, blocks)


def mlp_head(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    """Linear + BN + ReLU + Linear, the projector/predictor shape at reduced width."""
    return nn.Sequential(nn.Linear(d_in, hidden), nn.BatchNorm1d(hidden), nn.ReLU(), nn.Linear(hidden, d_out))


class Branch(nn.Module):
    """Encoder f, projector g, and (online branches only) predictor q."""

    def __init__(self, encoder: nn.Module, projector: nn.Module, predictor: Optional[nn.Module] = None):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor

    def backbone_parameters(self):
        """Parameters shared in shape with the target branch (encoder + projector)."""
        yield from self.encoder.parameters()
        yield from self.projector.parameters()

    def forward(self, x):
        y = self.encoder(x)
        return y, self.projector(y)


# --------------------------------------------------------------------------- EMA schedule


@dataclass
class TauSchedule:
    tau_base: float = 0.99
    total_steps: int = 1
    current_step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau_base < 1.0:
            raise ScheduleError(f"tau_base must lie in [0, 1), got {self.tau_base}")
        if self.total_steps < 1:
            raise ScheduleError("total_steps must be positive")


def tau_at(schedule: TauSchedule, k: int) -> float:
    """Cosine ramp of the target decay rate from ``tau_base`` at k=0 to 1 at k=K."""
    K = schedule.total_steps
    if not 0 <= k <= K:
        raise ScheduleError(f"step {k} outside [0, {K}]")
    if k == K:
        return 1.0
    return 1.0 - (1.0 - schedule.tau_base) * (math.cos(math.pi * k / K) + 1.0) / 2.0


class SiameseModel(nn.Module):
    """An online branch, its EMA target, and (for distilling students) a second predictor."""

    def __init__(self, online: Branch, schedule: TauSchedule, extra_predictor: Optional[nn.Module] = None):
        super().__init__()
        if online.predictor is None:
            raise ModelError("online branch needs a predictor")
        self.online = online
        self.target = Branch(copy.deepcopy(online.encoder), copy.deepcopy(online.projector))
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.extra_predictor = extra_predictor
        self.tau_schedule = schedule
        self.frozen = False

    @property
    def encoder(self) -> nn.Module:
        return self.online.encoder

    def trainable_parameters(self):
        params = list(self.online.parameters())
        if self.extra_predictor is not None:
            params += list(self.extra_predictor.parameters())
        return params

    def freeze(self) -> "SiameseModel":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        return super().train(mode and not self.frozen)


@torch.no_grad()
def ema_update(model: SiameseModel) -> float:
    """Move the target toward the online weights: xi <- tau * xi + (1 - tau) * theta.

    Returns the tau used and advances the schedule by one step.
    """
    if model.frozen:
        raise ModelError("cannot EMA-update a frozen model")
    sched = model.tau_schedule
    tau = tau_at(sched, sched.current_step)
    online = list(model.online.backbone_parameters())
    target = list(model.target.parameters())
    if len(online) != len(target):
        raise ModelError("online and target branches have different parameter counts")
    for xi, theta in zip(target, online):
        if xi.shape != theta.shape:
            raise ModelError(f"parameter shape mismatch {tuple(xi.shape)} vs {tuple(theta.shape)}")
        xi.mul_(tau).add_(theta, alpha=1.0 - tau)
    sched.current_step += 1
    return tau


# --------------------------------------------------------------------------- bundles


@dataclass
class ViewBundle:
    """Everything one siamese model computes for a pair of views.

    Keys are ``"v"`` and ``"vp"``. ``target_z`` is computed without gradient;
    ``distill`` is filled only for models carrying a second predictor.
    """

    y: dict
    z: dict
    pred: dict
    target_z: dict
    distill: dict = field(default_factory=dict)

    def projection(self, branch: str, view: str) -> torch.Tensor:
        """Gradient-stopped projection of ``view`` on the online or target branch."""
        src = self.z if branch == "online" else self.target_z
        return src[view].detach()

    def swapped(self) -> "ViewBundle":
        sw = lambda d: {"v": d["vp"], "vp": d["v"]} if d else {}  # noqa: E731
        return ViewBundle(sw(self.y), sw(self.z), sw(self.pred), sw(self.target_z), sw(self.distill))


def forward_views(model: SiameseModel, pair) -> ViewBundle:
    """Run both views through the online branch (all heads) and the target branch.

    The two views are concatenated so normalization layers see them as one batch.
    """
    v, vp = pair.v, pair.v_prime
    if v.dim() == 3:
        v, vp = v[None], vp[None]
    if v.shape != vp.shape:
        raise ModelError(f"view shapes differ: {tuple(v.shape)} vs {tuple(vp.shape)}")
    b = v.shape[0]
    x = torch.cat([v, vp])
    try:
        y, z = model.online(x)
    except RuntimeError as exc:
        raise ModelError(f"forward failed for input {tuple(x.shape)}: {exc}") from exc
    split = lambda t: {"v": t[:b], "vp": t[b:]}  # noqa: E731
    pred = model.online.predictor(z)
    distill = model.extra_predictor(z) if model.extra_predictor is not None else None
    with torch.no_grad():
        _, zt = model.target(x)
    return ViewBundle(
        y=split(y),
        z=split(z),
        pred=split(pred),
        target_z=split(zt.detach()),
        distill=split(distill) if distill is not None else {},
    )


# --------------------------------------------------------------------------- construction


def _seeded(seed: int, fn):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


def _build(cfg: SchemeConfig, encoder_name: str, role: str, total_steps: int, in_channels: int, heads: int):
    mc = cfg.model

    def online():
        enc = build_encoder(encoder_name, in_channels)
        proj = mlp_head(enc.out_dim, mc.proj_hidden, mc.proj_dim)
        pred = mlp_head(mc.proj_dim, mc.proj_hidden, mc.proj_dim)
        return Branch(enc, proj, pred)

    branch = _seeded(derive_seed(cfg.seed, role), online)
    extra = None
    if heads == 2:
        extra = _seeded(
            derive_seed(cfg.seed, role, "distill-head"), lambda: mlp_head(mc.proj_dim, mc.proj_hidden, mc.proj_dim)
        )
    return SiameseModel(branch, TauSchedule(cfg.tau_base, total_steps), extra)


def build_teacher(cfg: SchemeConfig, total_steps: int = 1, in_channels: int = 3) -> SiameseModel:
    return _build(cfg, cfg.model.teacher_encoder, "teacher", total_steps, in_channels, heads=1)


def build_student(cfg: SchemeConfig, total_steps: int = 1, in_channels: int = 3) -> SiameseModel:
    """Smaller encoder; a second predictor head whenever the scheme distills."""
    if cfg.scheme is Scheme.TEACHER_ONLY:
        raise ModelError("teacher_only runs have no student")
    heads = 2 if cfg.is_distilling else 1
    return _build(cfg, cfg.model.student_encoder, "student", total_steps, in_channels, heads=heads)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- checkpoints


def model_state(model: SiameseModel) -> dict:
    return {
        "weights": model.state_dict(),
        "tau_base": model.tau_schedule.tau_base,
        "total_steps": model.tau_schedule.total_steps,
        "current_step": model.tau_schedule.current_step,
        "has_extra_predictor": model.extra_predictor is not None,
    }


def restore_model(model: SiameseModel, state: dict) -> SiameseModel:
    if (model.extra_predictor is not None) != state["has_extra_predictor"]:
        raise ModelError("checkpoint and model disagree on the distillation head")
    model.load_state_dict(state["weights"])
    model.tau_schedule = TauSchedule(state["tau_base"], state["total_steps"], state["current_step"])
    return model


def save_checkpoint(path: str | Path, **payload) -> Path:
    """Write a versioned checkpoint; ``teacher``/``student`` entries may be SiameseModels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    for k, v in payload.items():
        out[k] = model_state(v) if isinstance(v, SiameseModel) else v
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(out, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"{path}: not a simdis checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt
