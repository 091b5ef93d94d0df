import json

import pytest
import torch

from simdis import trainer
from simdis.config import ProbeConfig
from simdis.evaluation import (
    EvalError,
    evaluate_run,
    knn_features,
    linear_probe,
    linear_probe_features,
    load_backbone,
)
from simdis.data import DatasetSpec
from simdis.models import param_digest


def _blobs(n, num_classes=5, dim=16, seed=0, spread=0.3):
    g = torch.Generator().manual_seed(seed)
    centres = torch.randn(num_classes, dim, generator=torch.Generator().manual_seed(99)) * 3
    y = torch.randint(0, num_classes, (n,), generator=g)
    return centres[y] + spread * torch.randn(n, dim, generator=g), y


def test_knn_self_match_is_perfect():
    x, y = _blobs(50, spread=1.0)
    assert knn_features(x, y, x, y, k=1) == 100.0


def test_knn_k_bounds():
    x, y = _blobs(10)
    with pytest.raises(EvalError):
        knn_features(x, y, x, y, k=0)
    with pytest.raises(EvalError):
        knn_features(x, y, x, y, k=10)


def test_linear_probe_separable_and_top5_dominates():
    tx, ty = _blobs(400)
    ex, ey = _blobs(200, seed=1)
    res = linear_probe_features(tx, ty, ex, ey, 5, ProbeConfig(epochs=30, batch_size=32), seed=0)
    assert res["top1"] > 95.0
    assert res["top5"] >= res["top1"]


def test_linear_probe_without_signal_is_near_chance():
    g = torch.Generator().manual_seed(3)
    tx, ex = torch.randn(2000, 32, generator=g), torch.randn(2000, 32, generator=g)
    ty, ey = torch.randint(0, 10, (2000,), generator=g), torch.randint(0, 10, (2000,), generator=g)
    res = linear_probe_features(tx, ty, ex, ey, 10, ProbeConfig(epochs=20), seed=0)
    # Binomial sd at p=0.1, n=2000 is 0.67 points.
    assert abs(res["top1"] - 10.0) < 3.0


def test_probe_is_deterministic():
    tx, ty = _blobs(200, spread=2.0)
    ex, ey = _blobs(100, seed=1, spread=2.0)
    cfg = ProbeConfig(epochs=5, batch_size=32)
    assert linear_probe_features(tx, ty, ex, ey, 5, cfg, 7) == linear_probe_features(tx, ty, ex, ey, 5, cfg, 7)


def test_probe_rejects_out_of_range_labels():
    x, y = _blobs(20)
    with pytest.raises(EvalError):
        linear_probe_features(x, y + 10, x, y, 5, ProbeConfig(epochs=1))


@pytest.fixture(scope="module")
def online_run(tmp_path_factory, data_root):
    from tests.conftest import tiny_config

    run = tmp_path_factory.mktemp("runs") / "on"
    trainer.run_scheme(tiny_config(data_root, scheme="simdis_on"), run)
    return run


def test_probe_leaves_encoder_untouched(online_run):
    encoder, cfg, _ = load_backbone(online_run)
    before = param_digest(encoder)
    spec = DatasetSpec.from_config(cfg.data, "train")
    linear_probe(encoder, spec, DatasetSpec.from_config(cfg.data, "eval"), cfg.probe)
    assert param_digest(encoder) == before


def test_backbone_selection(online_run):
    student, _, meta = load_backbone(online_run)
    teacher, _, tmeta = load_backbone(online_run, "teacher")
    assert meta["backbone"] == "student" and tmeta["backbone"] == "teacher"
    assert sum(p.numel() for p in teacher.parameters()) > sum(p.numel() for p in student.parameters())
    with pytest.raises(EvalError):
        load_backbone(online_run, "bogus")


def test_evaluate_run_records_once_per_backbone_epoch(online_run):
    a = evaluate_run(online_run)
    b = evaluate_run(online_run)
    evaluate_run(online_run, "teacher")
    assert a == b
    evals = json.loads((online_run / "summary.json").read_text())["evals"]
    assert sorted(e["backbone"] for e in evals) == ["student", "teacher"]
    assert 0.0 <= a["top1"] <= a["top5"] <= 100.0
