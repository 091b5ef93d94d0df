"""View-target grid: every row trained online and offline across seeds, then probed."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .config import ALL_VIEWS, Scheme, SchemeConfig, ViewTargetSet, config_from_dict
from .evaluation import evaluate_run
from .report import TABLE2_ROWS, write_table2
from . import trainer

MODES = ("online", "offline")


@dataclass(frozen=True)
class Job:
    row: int
    mode: str
    seed: int
    config: dict
    run_dir: str


def row_config(base: SchemeConfig, row: int, mode: str, seed: int, teacher_ckpt: Optional[str] = None) -> Optional[SchemeConfig]:
    """Config for one grid cell, or None when the cell is undefined (BYOL-only offline)."""
    targets = ViewTargetSet(TABLE2_ROWS[row][0])
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    common = dict(seed=seed, view_targets=targets, teacher_checkpoint=None, pretrain_teacher=False)
    if not targets.uses_teacher:
        if mode == "offline":
            return None
        return base.replace(scheme=Scheme.CUSTOM, **common)
    if mode == "online":
        scheme = Scheme.SIMDIS_ON_7V if targets == ALL_VIEWS else Scheme.SIMDIS_ON
        return base.replace(scheme=scheme, **common)
    common["teacher_checkpoint"] = teacher_ckpt
    return base.replace(scheme=Scheme.SIMDIS_OFF, **common)


def _run_job(job: Job) -> dict:
    cfg = config_from_dict(job.config)
    run_dir = Path(job.run_dir)
    done = run_dir / "summary.json"
    if done.exists() and json.loads(done.read_text()).get("evals"):
        res = json.loads(done.read_text())["evals"][-1]
    else:
        trainer.run_scheme(cfg, run_dir)
        res = evaluate_run(run_dir)
    return {"row": job.row, "mode": job.mode, "seed": job.seed, "top1": res["top1"], "top5": res["top5"],
            "knn_top1": res["knn_top1"], "run": str(run_dir)}


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _teacher_job(args) -> str:
    base, seed, out = args
    path = Path(out) / f"teacher-seed{seed}"
    ckpt = path / "checkpoint.pt"
    if ckpt.exists():
        return str(trainer.resume(path))
    cfg = base.replace(scheme=Scheme.TEACHER_ONLY, view_targets=None, seed=seed, teacher_checkpoint=None,
                       pretrain_teacher=False)
    return str(trainer.train_teacher(cfg, path))


def run_grid(
    base: SchemeConfig,
    out_dir: str | Path,
    rows: Iterable[int] = range(len(TABLE2_ROWS)),
    modes: Iterable[str] = MODES,
    seeds: Iterable[int] = (0,),
    jobs: int = 1,
    teacher_epochs: Optional[int] = None,
) -> list[dict]:
    """Train and probe each (row, mode, seed) cell; finished cells are reused on rerun.

    Offline cells share one pretrained teacher per seed, stored under ``out_dir``.
    """
    out_dir = Path(out_dir)
    rows, modes, seeds = list(rows), list(modes), list(seeds)
    teachers = {}
    if "offline" in modes and any(ViewTargetSet(TABLE2_ROWS[r][0]).uses_teacher for r in rows):
        tbase = base.replace(epochs=teacher_epochs or base.epochs)
        paths = _map(_teacher_job, [(tbase, s, str(out_dir)) for s in seeds], jobs)
        teachers = dict(zip(seeds, paths))
    work = []
    for seed in seeds:
        for row in rows:
            for mode in modes:
                cfg = row_config(base, row, mode, seed, teachers.get(seed))
                if cfg is None:
                    continue
                run_dir = out_dir / f"row{row + 1}-{mode}-seed{seed}"
                work.append(Job(row, mode, seed, cfg.to_dict(), str(run_dir)))
    results = _map(_run_job, work, jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Cells from earlier calls on the same directory stay in the table.
    path = out_dir / "results.json"
    fresh = {(r["row"], r["mode"], r["seed"]) for r in results}
    kept = [r for r in json.loads(path.read_text()) if (r["row"], r["mode"], r["seed"]) not in fresh] if path.exists() else []
    merged = sorted(kept + results, key=lambda r: (r["row"], r["mode"], r["seed"]))
    path.write_text(json.dumps(merged, indent=2))
    write_table2(merged, out_dir)
    return results
