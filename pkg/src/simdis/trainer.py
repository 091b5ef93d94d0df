"""Training loops for teacher pretraining, offline distillation and online distillation.

A run directory holds everything needed to inspect or resume a run::

    config.yaml       config echo
    metrics.jsonl     one JSON object per step (and per epoch)
    checkpoint.pt     latest state (models, optimizers, schedules, position)
    summary.json      run metadata plus evaluation results appended later
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .config import RUN_DIR_ENV, ConfigError, Scheme, SchemeConfig, config_from_dict, derive_seed, write_config
from .data import DatasetSpec, iterate_epoch, load_split, num_batches
from .losses import teacher_loss, total_student_loss
from .models import (
    SiameseModel,
    build_student,
    build_teacher,
    ema_update,
    forward_views,
    load_checkpoint,
    param_digest,
    restore_model,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LRSchedule:
    base_lr: float
    batch_size: int
    total_steps: int
    warmup_steps: int = 0
    reference_batch: int = 256

    @property
    def peak(self) -> float:
        return self.base_lr * self.batch_size / self.reference_batch


def step_lr(schedule: LRSchedule, k: int) -> float:
    """Linear warm-up from 0 to the batch-scaled peak, then cosine decay to 0."""
    K, W = schedule.total_steps, min(schedule.warmup_steps, schedule.total_steps)
    k = min(max(k, 0), K)
    if k < W:
        return schedule.peak * k / W
    if K == W:
        return schedule.peak
    return schedule.peak * 0.5 * (1.0 + math.cos(math.pi * (k - W) / (K - W)))


def default_runs_root() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


class MetricsSink:
    """Append-only JSON-lines writer."""

    def __init__(self, path: Path, truncate_from_step: Optional[int] = None):
        self.path = Path(path)
        if truncate_from_step is not None and self.path.exists():
            keep = [
                line
                for line in self.path.read_text().splitlines()
                if line.strip() and json.loads(line)["step"] < truncate_from_step
            ]
            self.path.write_text("".join(line + "\n" for line in keep))
        self._fh = open(self.path, "a")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def strip_wallclock(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall"} for r in records]


def _make_optimizer(model: SiameseModel, cfg: SchemeConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.trainable_parameters(), lr=0.0, momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay
    )


def _check_finite(value: torch.Tensor, what: str, state_fn, run_dir: Path) -> None:
    if not torch.isfinite(value):
        path = save_checkpoint(run_dir / "diverged.pt", **state_fn())
        raise TrainingError(f"non-finite {what} loss; diagnostic checkpoint written to {path}")


def _write_summary(run_dir: Path, **fields) -> dict:
    path = run_dir / "summary.json"
    summary = json.loads(path.read_text()) if path.exists() else {}
    summary.update(fields)
    path.write_text(json.dumps(summary, indent=2))
    return summary


class _Loop:
    """One training stage: teacher alone, student alone (teacher frozen or absent), or both."""

    def __init__(
        self,
        cfg: SchemeConfig,
        run_dir: Path,
        stage: str,
        teacher: Optional[SiameseModel],
        student: Optional[SiameseModel],
        train_teacher: bool,
        extra: Optional[dict] = None,
    ):
        self.cfg = cfg
        self.run_dir = run_dir
        self.stage = stage
        self.teacher = teacher
        self.student = student
        self.train_teacher = train_teacher
        self.extra = extra or {}
        self.spec = DatasetSpec.from_config(cfg.data, "train")
        self.steps_per_epoch = num_batches(len(load_split(self.spec)), cfg.batch_size)
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self.lr = LRSchedule(
            cfg.base_lr,
            cfg.batch_size,
            self.total_steps,
            int(round(cfg.optim.warmup_epochs * self.steps_per_epoch)),
            cfg.optim.lr_reference_batch,
        )
        self.t_opt = _make_optimizer(teacher, cfg) if train_teacher else None
        self.s_opt = _make_optimizer(student, cfg) if student is not None else None
        self.epoch = 0
        self.global_step = 0

    def state(self) -> dict:
        return dict(
            config=self.cfg.to_dict(),
            stage=self.stage,
            epoch=self.epoch,
            global_step=self.global_step,
            teacher=self.teacher,
            student=self.student,
            train_teacher=self.train_teacher,
            teacher_opt=self.t_opt.state_dict() if self.t_opt else None,
            student_opt=self.s_opt.state_dict() if self.s_opt else None,
            **self.extra,
        )

    def load_state(self, ckpt: dict) -> None:
        self.epoch = ckpt["epoch"]
        self.global_step = ckpt["global_step"]
        if self.t_opt and ckpt.get("teacher_opt"):
            self.t_opt.load_state_dict(ckpt["teacher_opt"])
        if self.s_opt and ckpt.get("student_opt"):
            self.s_opt.load_state_dict(ckpt["student_opt"])

    def _batches(self, epoch: int):
        main = iterate_epoch(self.spec, self.cfg.batch_size, self.cfg.seed, epoch, self.cfg.data)
        if self.teacher is None or self.student is None or self.cfg.data.shared_views:
            for pair in main:
                yield pair, pair
            return
        alt_seed = derive_seed(self.cfg.seed, "student-views")
        alt = iterate_epoch(self.spec, self.cfg.batch_size, alt_seed, epoch, self.cfg.data)
        yield from zip(main, alt)

    def run(self, stop_after_epochs: Optional[int] = None) -> Path:
        cfg = self.cfg
        sink = MetricsSink(self.run_dir / "metrics.jsonl", truncate_from_step=self.global_step)
        last = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, stop_after_epochs)
        try:
            for epoch in range(self.epoch, last):
                if self.train_teacher:
                    self.teacher.train()
                if self.teacher is not None and not self.train_teacher:
                    self.teacher.eval()
                if self.student is not None:
                    self.student.train()
                sums: dict = {}
                t0 = time.time()
                for t_pair, s_pair in self._batches(epoch):
                    self._step(epoch, t_pair, s_pair, sink, sums)
                self.epoch = epoch + 1
                for model, (total, n) in sums.items():
                    sink.write(
                        {
                            "kind": "epoch",
                            "step": self.global_step - 1,
                            "epoch": epoch,
                            "model": model,
                            "scheme": cfg.scheme.value,
                            "mean_total": total / n,
                            "wall": time.time() - t0,
                        }
                    )
                log.info("%s epoch %d/%d done in %.1fs", self.stage, epoch + 1, cfg.epochs, time.time() - t0)
                if self.epoch % cfg.checkpoint_every == 0 or self.epoch == cfg.epochs:
                    save_checkpoint(self.run_dir / "checkpoint.pt", **self.state())
        finally:
            sink.close()
        return self.run_dir / "checkpoint.pt"

    def _record(self, sink, sums, model: str, epoch: int, lr: float, tau: float, rep) -> None:
        rec = {
            "kind": "step",
            "step": self.global_step,
            "epoch": epoch,
            "model": model,
            "scheme": self.cfg.scheme.value,
            "lr": lr,
            "tau": tau,
            **rep.as_floats(),
            "wall": time.time(),
        }
        sink.write(rec)
        total, n = sums.get(model, (0.0, 0))
        sums[model] = (total + rec["total"], n + 1)

    def _step(self, epoch: int, t_pair, s_pair, sink, sums) -> None:
        k = self.global_step
        lr = step_lr(self.lr, k)
        t_bundle = None
        t_rep = None
        if self.teacher is not None:
            if self.train_teacher:
                t_bundle = forward_views(self.teacher, t_pair)
                t_rep = teacher_loss(t_bundle)
                _check_finite(t_rep.total, "teacher", self.state, self.run_dir)
                self.t_opt.zero_grad(set_to_none=True)
                t_rep.total.backward()
                for g in self.t_opt.param_groups:
                    g["lr"] = lr
                self.t_opt.step()
            elif self.student is not None and self.cfg.view_targets.uses_teacher:
                with torch.no_grad():
                    t_bundle = forward_views(self.teacher, s_pair)
        s_rep = None
        if self.student is not None:
            s_bundle = forward_views(self.student, s_pair)
            s_rep = total_student_loss(self.cfg, s_bundle, t_bundle)
            _check_finite(s_rep.total, "student", self.state, self.run_dir)
            self.s_opt.zero_grad(set_to_none=True)
            s_rep.total.backward()
            for g in self.s_opt.param_groups:
                g["lr"] = lr
            self.s_opt.step()
        # EMA strictly after both optimizer steps.
        if t_rep is not None:
            tau = ema_update(self.teacher)
            self._record(sink, sums, "teacher", epoch, lr, tau, t_rep)
        if s_rep is not None:
            tau = ema_update(self.student)
            self._record(sink, sums, "student", epoch, lr, tau, s_rep)
        self.global_step += 1


def _prepare_run_dir(cfg: SchemeConfig, run_dir: Optional[str | Path]) -> Path:
    if run_dir is None:
        run_dir = default_runs_root() / f"{cfg.scheme.value}-seed{cfg.seed}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.yaml")
    return run_dir


def _steps(cfg: SchemeConfig) -> int:
    n = len(load_split(DatasetSpec.from_config(cfg.data, "train")))
    return num_batches(n, cfg.batch_size) * cfg.epochs


def _base_summary(cfg: SchemeConfig, **extra) -> dict:
    return dict(
        scheme=cfg.scheme.value,
        seed=cfg.seed,
        epochs=cfg.epochs,
        view_targets=cfg.view_targets.to_list(),
        num_views=cfg.view_targets.num_views if cfg.has_student else 0,
        evals=[],
        **extra,
    )


def train_teacher(cfg: SchemeConfig, run_dir=None, stop_after_epochs: Optional[int] = None) -> Path:
    """BYOL-train the teacher alone for ``cfg.epochs`` epochs; returns the checkpoint path."""
    tcfg = cfg.replace(scheme=Scheme.TEACHER_ONLY, view_targets=None, teacher_checkpoint=None, pretrain_teacher=False)
    run_dir = _prepare_run_dir(tcfg, run_dir)
    teacher = build_teacher(tcfg, _steps(tcfg))
    _write_summary(run_dir, **_base_summary(tcfg, stage="teacher", backbone="teacher"))
    loop = _Loop(tcfg, run_dir, "teacher", teacher, None, train_teacher=True)
    return loop.run(stop_after_epochs)


def teacher_from_checkpoint(ckpt: dict) -> tuple[SiameseModel, SchemeConfig]:
    """Rebuild the teacher stored in a loaded checkpoint dict."""
    if ckpt.get("teacher") is None:
        raise ConfigError("checkpoint holds no teacher")
    raw = ckpt.get("teacher_config") or ckpt["config"]
    tcfg = config_from_dict(raw).replace(
        scheme=Scheme.TEACHER_ONLY, view_targets=None, teacher_checkpoint=None, pretrain_teacher=False
    )
    teacher = build_teacher(tcfg, ckpt["teacher"]["total_steps"])
    restore_model(teacher, ckpt["teacher"])
    return teacher, tcfg


def load_teacher(ckpt_path: str | Path) -> tuple[SiameseModel, SchemeConfig]:
    return teacher_from_checkpoint(load_checkpoint(ckpt_path))


def train_offline_student(
    cfg: SchemeConfig, teacher_ckpt=None, run_dir=None, stop_after_epochs: Optional[int] = None
) -> Path:
    """Stage 2 of offline distillation: the teacher is frozen, the student learns BYOL + distillation.

    With ``pretrain_teacher`` and no checkpoint, stage 1 runs first in ``<run_dir>/teacher``.
    """
    teacher_ckpt = teacher_ckpt or cfg.teacher_checkpoint
    run_dir = _prepare_run_dir(cfg, run_dir)
    if teacher_ckpt is None:
        if not cfg.pretrain_teacher:
            raise ConfigError("teacher_checkpoint: offline distillation needs a teacher")
        teacher_ckpt = train_teacher(cfg, run_dir / "teacher")
    teacher, tcfg = load_teacher(teacher_ckpt)
    if tcfg.model.proj_dim != cfg.model.proj_dim:
        raise ConfigError(
            f"model.proj_dim: teacher projects to {tcfg.model.proj_dim}, student to {cfg.model.proj_dim}"
        )
    teacher.freeze()
    student = build_student(cfg, _steps(cfg))
    digest = param_digest(teacher)
    _write_summary(
        run_dir,
        **_base_summary(cfg, stage="student", backbone="student", teacher_checkpoint=str(teacher_ckpt)),
        teacher_digest_before=digest,
    )
    loop = _Loop(
        cfg, run_dir, "student", teacher, student, train_teacher=False,
        extra={"teacher_checkpoint": str(teacher_ckpt), "teacher_config": tcfg.to_dict()},
    )
    path = loop.run(stop_after_epochs)
    _write_summary(run_dir, teacher_digest_after=param_digest(teacher))
    return path


def train_student_only(cfg: SchemeConfig, run_dir=None, stop_after_epochs: Optional[int] = None) -> Path:
    """Student trained with BYOL (and any student-family targets), no teacher involved."""
    if cfg.view_targets.uses_teacher:
        raise ConfigError("view_targets: teacher targets need online or offline distillation")
    run_dir = _prepare_run_dir(cfg, run_dir)
    student = build_student(cfg, _steps(cfg))
    _write_summary(run_dir, **_base_summary(cfg, stage="student", backbone="student"))
    loop = _Loop(cfg, run_dir, "student", None, student, train_teacher=False)
    return loop.run(stop_after_epochs)


def train_online(cfg: SchemeConfig, run_dir=None, stop_after_epochs: Optional[int] = None) -> Path:
    """Teacher and student trained together; the student's loss never reaches the teacher."""
    run_dir = _prepare_run_dir(cfg, run_dir)
    steps = _steps(cfg)
    teacher = build_teacher(cfg, steps)
    student = build_student(cfg, steps)
    _write_summary(run_dir, **_base_summary(cfg, stage="joint", backbone="student"))
    loop = _Loop(cfg, run_dir, "joint", teacher, student, train_teacher=True)
    return loop.run(stop_after_epochs)


def run_scheme(cfg: SchemeConfig, run_dir=None, stop_after_epochs: Optional[int] = None) -> Path:
    if cfg.scheme is Scheme.TEACHER_ONLY:
        return train_teacher(cfg, run_dir, stop_after_epochs)
    if cfg.scheme is Scheme.SIMDIS_OFF:
        return train_offline_student(cfg, None, run_dir, stop_after_epochs)
    if cfg.scheme is Scheme.CUSTOM and not cfg.view_targets.uses_teacher:
        return train_student_only(cfg, run_dir, stop_after_epochs)
    return train_online(cfg, run_dir, stop_after_epochs)


def resume(run_dir: str | Path, stop_after_epochs: Optional[int] = None) -> Path:
    """Continue a run from its latest checkpoint; finished runs are returned unchanged."""
    run_dir = Path(run_dir)
    ckpt = load_checkpoint(run_dir / "checkpoint.pt")
    cfg = config_from_dict(ckpt["config"])
    if ckpt["epoch"] >= cfg.epochs:
        return run_dir / "checkpoint.pt"
    teacher = student = None
    steps = _steps(cfg)
    if ckpt.get("teacher") is not None:
        if ckpt["train_teacher"]:
            teacher = restore_model(build_teacher(cfg, steps), ckpt["teacher"])
        else:
            teacher, _ = teacher_from_checkpoint(ckpt)
            teacher.freeze()
    if ckpt.get("student") is not None:
        student = restore_model(build_student(cfg, steps), ckpt["student"])
    extra = {k: ckpt[k] for k in ("teacher_checkpoint", "teacher_config") if k in ckpt}
    loop = _Loop(cfg, run_dir, ckpt["stage"], teacher, student, ckpt["train_teacher"], extra)
    loop.load_state(ckpt)
    path = loop.run(stop_after_epochs)
    if teacher is not None and teacher.frozen:
        _write_summary(run_dir, teacher_digest_after=param_digest(teacher))
    return path
