"""Normalized-MSE losses: BYOL's symmetric term and the multi-view distillation term."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .config import SchemeConfig, View, ViewTargetSet
from .models import ViewBundle

EPS = 1e-12


class LossError(ValueError):
    pass


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / (torch.linalg.vector_norm(x, dim=-1, keepdim=True) + EPS)


def normalized_mse(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Squared distance between l2-normalized ``p`` and ``z``, i.e. 2 - 2 cos(p, z).

    ``z`` is a target and never receives gradient. Batched inputs (..., D) are
    averaged over the leading dimensions.
    """
    if p.shape[-1] != z.shape[-1]:
        raise LossError(f"dimension mismatch: {p.shape[-1]} vs {z.shape[-1]}")
    d = _unit(p) - _unit(z.detach())
    return (d * d).sum(dim=-1).mean()


@dataclass
class LossReport:
    byol_term: torch.Tensor
    distill_term: torch.Tensor
    total: torch.Tensor
    per_target_terms: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {
            "byol_term": self.byol_term.item(),
            "distill_term": self.distill_term.item(),
            "total": self.total.item(),
            "per_target": {k: v.item() for k, v in self.per_target_terms.items()},
        }


def byol_loss(bundle: ViewBundle) -> torch.Tensor:
    """Prediction of v against the target projection of v', plus the swapped term."""
    if not bundle.pred:
        raise LossError("bundle has no predictor outputs")
    return normalized_mse(bundle.pred["v"], bundle.target_z["vp"]) + normalized_mse(
        bundle.pred["vp"], bundle.target_z["v"]
    )


def _target_tensor(view: View, student: ViewBundle, teacher: Optional[ViewBundle], swap: bool) -> torch.Tensor:
    bundle = student if view.family == "student" else teacher
    if bundle is None:
        raise LossError(f"target {view.value} needs a teacher, but none is part of this run")
    which = view.view
    if swap:
        which = "v" if which == "vp" else "vp"
    return bundle.projection(view.branch, which)


def single_view_distill_term(student: ViewBundle, teacher: ViewBundle) -> torch.Tensor:
    """The plain SimDis distillation term: S-v through the second head against T-hat's v'."""
    if not student.distill:
        raise LossError("student bundle has no distillation head outputs")
    return normalized_mse(student.distill["v"], teacher.target_z["vp"])


def distill_loss(
    student: ViewBundle,
    teacher: Optional[ViewBundle],
    targets: ViewTargetSet,
    symmetric: bool = False,
) -> tuple[torch.Tensor, dict]:
    """Unweighted sum over ``targets`` of the distillation head's normalized MSE.

    The prediction always comes from S on view v. ``Shat_vp`` is skipped because
    the BYOL term already covers it. With ``symmetric`` each term is the mean of
    the S-v prediction and the S-v' prediction against the view-swapped target.
    Returns ``(distill_term, per_target_terms)``.
    """
    members = targets.distill_members
    if not members:
        raise LossError("no distillation targets")
    if not student.distill:
        raise LossError("student bundle has no distillation head outputs")
    per_target = {}
    total = None
    for view in members:
        term = normalized_mse(student.distill["v"], _target_tensor(view, student, teacher, swap=False))
        if symmetric:
            swapped = normalized_mse(student.distill["vp"], _target_tensor(view, student, teacher, swap=True))
            term = 0.5 * (term + swapped)
        per_target[view.value] = term
        total = term if total is None else total + term
    return total, per_target


def total_student_loss(
    cfg: SchemeConfig, student: ViewBundle, teacher: Optional[ViewBundle] = None
) -> LossReport:
    """byol_weight * BYOL + distill_weight * distillation over the configured targets."""
    byol = byol_loss(student)
    if cfg.is_distilling:
        distill, per_target = distill_loss(student, teacher, cfg.view_targets, cfg.symmetric_distill)
    else:
        distill, per_target = torch.zeros((), dtype=byol.dtype), {}
    total = cfg.byol_weight * byol + cfg.distill_weight * distill
    return LossReport(byol, distill, total, per_target)


def teacher_loss(bundle: ViewBundle) -> LossReport:
    byol = byol_loss(bundle)
    return LossReport(byol, torch.zeros((), dtype=byol.dtype), byol, {})
