"""Frozen-backbone evaluation: linear probe and k-NN on encoder outputs."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import ProbeConfig, SchemeConfig, config_from_dict, derive_seed
from .data import DatasetSpec, load_split
from .models import build_student, load_checkpoint, param_digest, restore_model
from .trainer import teacher_from_checkpoint


class EvalError(RuntimeError):
    pass


def load_backbone(path: str | Path, which: str = "auto") -> tuple[nn.Module, SchemeConfig, dict]:
    """Encoder of the student (or teacher, for teacher-only runs) from a run dir or checkpoint."""
    path = Path(path)
    ckpt_path = path / "checkpoint.pt" if path.is_dir() else path
    ckpt = load_checkpoint(ckpt_path)
    cfg = config_from_dict(ckpt["config"])
    if which == "auto":
        which = "student" if ckpt.get("student") is not None else "teacher"
    if which == "student":
        if ckpt.get("student") is None:
            raise EvalError(f"{ckpt_path}: no student in checkpoint")
        model = restore_model(build_student(cfg, ckpt["student"]["total_steps"]), ckpt["student"])
    elif which == "teacher":
        model, _ = teacher_from_checkpoint(ckpt)
    else:
        raise EvalError(f"unknown backbone {which!r}")
    encoder = model.online.encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder, cfg, {"backbone": which, "epoch": ckpt["epoch"], "step": ckpt["global_step"]}


@torch.no_grad()
def extract_features(encoder: nn.Module, spec: DatasetSpec, batch_size: int = 512):
    ds = load_split(spec)
    was_training = encoder.training
    encoder.eval()
    feats = [encoder(ds.normalize(ds.images[i : i + batch_size])) for i in range(0, len(ds), batch_size)]
    encoder.train(was_training)
    return torch.cat(feats), ds.labels.clone()


def _topk(logits: torch.Tensor, labels: torch.Tensor, k: int) -> float:
    k = min(k, logits.shape[1])
    hit = (logits.topk(k, dim=1).indices == labels[:, None]).any(dim=1)
    return 100.0 * hit.float().mean().item()


def fit_linear_probe(
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    num_classes: int,
    cfg: ProbeConfig,
    seed: int = 0,
) -> nn.Linear:
    """Softmax regression on standardized features with momentum SGD."""
    if int(train_y.max()) >= num_classes or int(train_y.min()) < 0:
        raise EvalError(f"labels outside [0, {num_classes})")
    g = torch.Generator().manual_seed(derive_seed(seed, "probe"))
    clf = nn.Linear(train_x.shape[1], num_classes)
    with torch.no_grad():
        nn.init.normal_(clf.weight, std=0.01, generator=g)
        clf.bias.zero_()
    opt = torch.optim.SGD(clf.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    n = train_x.shape[0]
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=g)
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = F.cross_entropy(clf(train_x[idx]), train_y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return clf


def _standardize(train_x: torch.Tensor, test_x: torch.Tensor):
    mu = train_x.mean(0, keepdim=True)
    sd = train_x.std(0, keepdim=True).clamp_min(1e-6)
    return (train_x - mu) / sd, (test_x - mu) / sd


def linear_probe_features(
    train_x, train_y, test_x, test_y, num_classes: int, cfg: Optional[ProbeConfig] = None, seed: int = 0
) -> dict:
    cfg = cfg or ProbeConfig()
    train_x, test_x = _standardize(train_x, test_x)
    clf = fit_linear_probe(train_x, train_y, num_classes, cfg, seed)
    with torch.no_grad():
        logits = clf(test_x)
    if int(test_y.max()) >= num_classes:
        raise EvalError(f"eval labels exceed the probe's {num_classes} classes")
    return {"top1": _topk(logits, test_y, 1), "top5": _topk(logits, test_y, 5)}


def linear_probe(
    encoder: nn.Module,
    train_spec: DatasetSpec,
    eval_spec: DatasetSpec,
    cfg: Optional[ProbeConfig] = None,
    seed: int = 0,
) -> dict:
    """Train a linear classifier on frozen encoder features; top-1/top-5 (%) on the eval split."""
    if train_spec.num_classes != eval_spec.num_classes:
        raise EvalError("train and eval splits disagree on the class count")
    digest = param_digest(encoder)
    tx, ty = extract_features(encoder, train_spec)
    ex, ey = extract_features(encoder, eval_spec)
    out = linear_probe_features(tx, ty, ex, ey, train_spec.num_classes, cfg, seed)
    if param_digest(encoder) != digest:
        raise EvalError("encoder parameters changed during probing")
    return out


def knn_features(gallery_x, gallery_y, query_x, query_y, k: int) -> float:
    """Majority vote among the k most cosine-similar gallery items; ties go to the nearer class."""
    n = gallery_x.shape[0]
    if not 1 <= k < n:
        raise EvalError(f"k={k} must satisfy 1 <= k < gallery size {n}")
    g = F.normalize(gallery_x, dim=1)
    q = F.normalize(query_x, dim=1)
    num_classes = int(max(gallery_y.max(), query_y.max())) + 1
    correct = 0
    for i in range(0, q.shape[0], 1024):
        sim = q[i : i + 1024] @ g.T
        top_sim, top_idx = sim.topk(k, dim=1)
        votes = F.one_hot(gallery_y[top_idx], num_classes).float()
        # Vote count dominates; similarity only breaks ties.
        score = votes.sum(1) + 1e-3 * (votes * top_sim[..., None]).sum(1) / k
        correct += (score.argmax(1) == query_y[i : i + 1024]).sum().item()
    return 100.0 * correct / q.shape[0]


def knn_probe(encoder: nn.Module, train_spec: DatasetSpec, eval_spec: DatasetSpec, k: int = 20) -> float:
    gx, gy = extract_features(encoder, train_spec)
    qx, qy = extract_features(encoder, eval_spec)
    return knn_features(gx, gy, qx, qy, k)


def evaluate_run(run_dir: str | Path, which: str = "auto", probe: Optional[ProbeConfig] = None) -> dict:
    """Probe a run's backbone and append the result to its ``summary.json``."""
    run_dir = Path(run_dir)
    encoder, cfg, meta = load_backbone(run_dir, which)
    probe = probe or cfg.probe
    # The probe always sees the full labelled train split.
    train_spec = dataclasses.replace(DatasetSpec.from_config(cfg.data, "train"), max_examples=0)
    eval_spec = DatasetSpec.from_config(cfg.data, "eval")
    res = linear_probe(encoder, train_spec, eval_spec, probe, cfg.seed)
    res["knn_top1"] = knn_probe(encoder, train_spec, eval_spec, probe.knn_k)
    res.update(meta)
    res["epochs"] = meta["epoch"]
    summary_path = run_dir / "summary.json"
    if run_dir.is_dir():
        summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
        evals = [e for e in summary.get("evals", []) if (e["backbone"], e["epoch"]) != (res["backbone"], res["epoch"])]
        summary["evals"] = evals + [res]
        summary_path.write_text(json.dumps(summary, indent=2))
    return res
