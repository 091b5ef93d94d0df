import json

import pytest
import torch

from simdis import trainer
from simdis.config import RUN_DIR_ENV, ConfigError, ModelConfig
from simdis.losses import LossReport
from simdis.models import build_teacher, load_checkpoint, param_digest
from simdis.trainer import LRSchedule, TrainingError, read_metrics, step_lr, strip_wallclock


def test_lr_schedule_examples():
    s = LRSchedule(base_lr=0.4, batch_size=64, total_steps=110, warmup_steps=10)
    assert s.peak == pytest.approx(0.1)
    assert step_lr(s, 0) == 0.0
    assert step_lr(s, 5) == pytest.approx(0.05)
    assert step_lr(s, 10) == pytest.approx(0.1)
    assert step_lr(s, 60) == pytest.approx(0.05)
    assert step_lr(s, 110) == pytest.approx(0.0, abs=1e-15)


def test_lr_schedule_without_warmup_starts_at_peak():
    s = LRSchedule(0.2, 256, 10)
    assert step_lr(s, 0) == pytest.approx(0.2)
    vals = [step_lr(s, k) for k in range(11)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_teacher_init_ignores_student_settings(make_cfg):
    a = make_cfg(scheme="simdis_on")
    b = make_cfg(scheme="simdis_on", model=ModelConfig("resnet_w8", "resnet_w8", 16, 8))
    assert param_digest(build_teacher(a)) == param_digest(build_teacher(b))


def _student_records(run_dir, key="byol_term"):
    return [r[key] for r in read_metrics(run_dir) if r["kind"] == "step" and r["model"] == "student"]


def test_online_run_layout(make_cfg, tmp_path):
    run = tmp_path / "on"
    trainer.run_scheme(make_cfg(scheme="simdis_on"), run)
    assert {p.name for p in run.iterdir()} >= {"config.yaml", "metrics.jsonl", "checkpoint.pt", "summary.json"}
    recs = read_metrics(run)
    steps = [r for r in recs if r["kind"] == "step"]
    assert {r["model"] for r in steps} == {"teacher", "student"}
    assert len(steps) == 2 * 2 * 3  # two models, two epochs, three batches of 16 from 40 images
    assert all(r["distill_term"] >= 0 for r in steps if r["model"] == "student")
    assert json.loads((run / "summary.json").read_text())["num_views"] == 2


def test_offline_teacher_untouched(make_cfg, tmp_path):
    run = tmp_path / "off"
    trainer.run_scheme(make_cfg(scheme="simdis_off", pretrain_teacher=True), run)
    summary = json.loads((run / "summary.json").read_text())
    assert summary["teacher_digest_before"] == summary["teacher_digest_after"]
    teacher_ckpt = load_checkpoint(run / "teacher" / "checkpoint.pt")
    final = load_checkpoint(run / "checkpoint.pt")["teacher"]["weights"]
    assert all(torch.equal(final[k], v) for k, v in teacher_ckpt["teacher"]["weights"].items())
    assert not [r for r in read_metrics(run) if r.get("model") == "teacher"]


def test_offline_rejects_projection_mismatch(make_cfg, tmp_path):
    ckpt = trainer.train_teacher(make_cfg(epochs=1), tmp_path / "t")
    cfg = make_cfg(scheme="simdis_off", teacher_checkpoint=str(ckpt),
                   model=ModelConfig("resnet_w8", "resnet_w4", 16, 4))
    with pytest.raises(ConfigError, match="proj_dim"):
        trainer.run_scheme(cfg, tmp_path / "s")


@pytest.mark.parametrize("scheme", ["teacher_only", "simdis_on", "simdis_on_7v"])
def test_resume_reproduces_uninterrupted_run(make_cfg, tmp_path, scheme):
    cfg = make_cfg(scheme=scheme, epochs=3)
    full, split = tmp_path / "full", tmp_path / "split"
    trainer.run_scheme(cfg, full)
    trainer.run_scheme(cfg, split, stop_after_epochs=1)
    trainer.resume(split, stop_after_epochs=2)
    trainer.resume(split)
    assert strip_wallclock(read_metrics(full)) == strip_wallclock(read_metrics(split))
    a, b = load_checkpoint(full / "checkpoint.pt"), load_checkpoint(split / "checkpoint.pt")
    for role in ("teacher", "student"):
        if a.get(role) is not None:
            assert all(torch.equal(v, b[role]["weights"][k]) for k, v in a[role]["weights"].items())


def test_resume_of_finished_run_is_noop(make_cfg, tmp_path):
    run = tmp_path / "r"
    trainer.run_scheme(make_cfg(epochs=1), run)
    before = (run / "metrics.jsonl").read_text()
    trainer.resume(run)
    assert (run / "metrics.jsonl").read_text() == before


def test_zero_distill_weight_matches_byol_only_student(make_cfg, tmp_path):
    trainer.run_scheme(make_cfg(scheme="simdis_on", distill_weight=0.0), tmp_path / "on")
    trainer.run_scheme(make_cfg(scheme="custom", view_targets=["Shat_vp"]), tmp_path / "byol")
    assert _student_records(tmp_path / "on") == _student_records(tmp_path / "byol")


def test_student_only_custom_run_has_no_teacher(make_cfg, tmp_path):
    trainer.run_scheme(make_cfg(scheme="custom", view_targets=["Shat_vp", "S_vp"]), tmp_path / "c")
    ckpt = load_checkpoint(tmp_path / "c" / "checkpoint.pt")
    assert ckpt["teacher"] is None and ckpt["student"] is not None


def test_non_finite_loss_aborts_with_diagnostic(make_cfg, tmp_path, monkeypatch):
    real = trainer.teacher_loss

    def broken(bundle):
        rep = real(bundle)
        return LossReport(rep.byol_term, rep.distill_term, rep.total * float("nan"), rep.per_target_terms)

    monkeypatch.setattr(trainer, "teacher_loss", broken)
    with pytest.raises(TrainingError, match="non-finite"):
        trainer.run_scheme(make_cfg(), tmp_path / "nan")
    assert (tmp_path / "nan" / "diverged.pt").exists()


def test_default_run_dir_honours_env(make_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv(RUN_DIR_ENV, str(tmp_path / "root"))
    path = trainer.run_scheme(make_cfg(epochs=1))
    assert path.parent.parent == tmp_path / "root"


def test_shared_views_off_changes_student_stream(make_cfg, tmp_path):
    trainer.run_scheme(make_cfg(scheme="simdis_on"), tmp_path / "a")
    cfg = make_cfg(scheme="simdis_on")
    cfg.data.shared_views = False
    trainer.run_scheme(cfg, tmp_path / "b")
    teacher = lambda d: [r["total"] for r in read_metrics(d) if r.get("model") == "teacher" and r["kind"] == "step"]
    assert teacher(tmp_path / "a") == teacher(tmp_path / "b")
    assert _student_records(tmp_path / "a") != _student_records(tmp_path / "b")
