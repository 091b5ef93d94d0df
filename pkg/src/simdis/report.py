"""Summaries of finished runs: CSV tables and figures, read purely from run directories."""

from __future__ import annotations

import csv
import json
import statistics
from collections import defaultdict
from pathlib import Path

from .accounting import measure_forward_flops, scheme_formula, format_flops
from .config import Scheme, SchemeConfig, load_config
from .models import build_student, build_teacher
from . import plotting

# Reference top-1 (%) reported for full-scale ImageNet runs; printed beside toy results, never asserted.
REFERENCE_TABLE1 = {
    "simdis_off": {100: 61.76, 300: 65.15, 1000: 67.18},
    "simdis_on": {100: 58.08, 300: 64.49, 1000: 66.78},
    "simdis_on_7v": {100: 60.65, 300: 64.58, 1000: 66.14},
}

# View-target rows in grid order, with reference (online, offline) top-1.
TABLE2_ROWS = [
    (("Shat_vp",), 55.96, None),
    (("Shat_vp", "T_v"), 58.20, 59.67),
    (("Shat_vp", "T_vp"), 58.29, 62.08),
    (("Shat_vp", "That_v"), 59.25, 59.72),
    (("Shat_vp", "That_vp"), 58.84, 62.66),
    (("Shat_vp", "T_v", "T_vp"), 58.74, 62.06),
    (("Shat_vp", "That_v", "That_vp"), 59.55, 63.27),
    (("Shat_vp", "T_v", "T_vp", "That_v", "That_vp"), 59.06, 59.12),
    (("S_vp", "Shat_v", "Shat_vp", "T_v", "T_vp", "That_v", "That_vp"), 63.52, 63.14),
]

SUMMARY_COLUMNS = ["scheme", "views", "flops_formula", "top1", "top5", "epochs", "knn_top1", "view_targets", "seed", "run"]


class ReportError(RuntimeError):
    pass


def _input_shape(cfg: SchemeConfig):
    return (3, cfg.data.image_size, cfg.data.image_size)


def run_costs(cfg: SchemeConfig) -> dict:
    """Per-image forward FLOPs of the run's teacher, student and distillation head."""
    shape = _input_shape(cfg)
    out = {"c_T": measure_forward_flops(build_teacher(cfg).online, shape)}
    if cfg.has_student:
        student = build_student(cfg)
        out["c_S"] = measure_forward_flops(student.online, shape)
        if student.extra_predictor is not None:
            out["c_heads"] = measure_forward_flops(student.extra_predictor, (cfg.model.proj_dim,))
    return out


def run_formula(cfg: SchemeConfig, costs: dict) -> str:
    """Cost-table bracket for a run, using the desk-scale per-image costs."""
    s = cfg.scheme
    if s is Scheme.TEACHER_ONLY:
        return f"({format_flops(costs['c_T'])}) x M x N"
    if s is Scheme.CUSTOM and not cfg.view_targets.uses_teacher:
        terms = [costs["c_S"]] + ([costs["c_heads"]] if "c_heads" in costs else [])
        return "(" + " + ".join(format_flops(t) for t in terms) + ") x M x N"
    if s is Scheme.CUSTOM or (s is Scheme.SIMDIS_ON and len(cfg.view_targets.distill_members) > 1):
        s = Scheme.SIMDIS_ON_7V
    return scheme_formula(s, costs["c_T"], costs["c_S"], costs.get("c_heads", 0))


def collect_runs(run_dirs) -> list[dict]:
    """One row per (run, evaluation). Raises if any run lacks an evaluation summary."""
    rows, missing = [], []
    for d in map(Path, run_dirs):
        summary_path = d / "summary.json"
        if not summary_path.exists() or not (d / "config.yaml").exists():
            missing.append(str(d))
            continue
        summary = json.loads(summary_path.read_text())
        if not summary.get("evals"):
            missing.append(str(d))
            continue
        cfg = load_config(d / "config.yaml")
        formula = run_formula(cfg, run_costs(cfg))
        for ev in summary["evals"]:
            rows.append(
                {
                    "scheme": cfg.scheme.value,
                    "views": cfg.view_targets.num_views if cfg.has_student else 0,
                    "flops_formula": formula,
                    "top1": round(ev["top1"], 3),
                    "top5": round(ev["top5"], 3),
                    "epochs": ev.get("epochs", cfg.epochs),
                    "knn_top1": round(ev.get("knn_top1", float("nan")), 3),
                    "view_targets": "+".join(cfg.view_targets.to_list()),
                    "seed": cfg.seed,
                    "run": str(d),
                }
            )
    if missing:
        raise ReportError("runs without evaluation summaries: " + ", ".join(missing))
    return rows


def _write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _label(row: dict) -> str:
    if row["scheme"] == "custom":
        return f"custom [{row['view_targets']}]"
    return row["scheme"]


def table1(rows: list[dict]) -> tuple[list[str], list[dict]]:
    """Mean top-1 per scheme (rows) and pretraining epochs (columns)."""
    epochs = sorted({int(r["epochs"]) for r in rows})
    cells = defaultdict(list)
    meta = {}
    for r in rows:
        key = _label(r)
        cells[(key, int(r["epochs"]))].append(r["top1"])
        meta[key] = r
    out = []
    for key in sorted(meta):
        rec = {"scheme": key, "views": meta[key]["views"], "flops_formula": meta[key]["flops_formula"]}
        for n in epochs:
            vals = cells.get((key, n))
            rec[f"N={n}"] = round(statistics.mean(vals), 2) if vals else ""
            ref = REFERENCE_TABLE1.get(meta[key]["scheme"], {}).get(n)
            if ref is not None:
                rec[f"ref N={n}"] = ref
        out.append(rec)
    columns = ["scheme", "views", "flops_formula"] + [f"N={n}" for n in epochs]
    columns += sorted({k for rec in out for k in rec if k.startswith("ref ")})
    return columns, out


def emit_plots(run_dirs, out_dir: str | Path) -> dict:
    """Write summary.csv, table1.csv and accuracy-vs-epochs figures for ``run_dirs``."""
    out_dir = Path(out_dir)
    rows = collect_runs(run_dirs)
    paths = {"summary": _write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, rows)}
    cols, t1 = table1(rows)
    paths["table1"] = _write_csv(out_dir / "table1.csv", cols, t1)
    grouped = defaultdict(lambda: defaultdict(list))
    for r in rows:
        grouped[_label(r)][int(r["epochs"])].append((r["top1"], r["top5"]))
    series = {
        label: [(n, statistics.mean(a for a, _ in v), statistics.mean(b for _, b in v)) for n, v in by_n.items()]
        for label, by_n in grouped.items()
    }
    paths["accuracy_plot"] = plotting.accuracy_curves(series, out_dir / "accuracy_vs_epochs.png")
    return paths


def table2(results: list[dict]) -> list[dict]:
    """Median top-1 per view-target row and mode from ablation results.

    ``results`` items carry ``row`` (index into TABLE2_ROWS), ``mode`` and ``top1``.
    """
    out = []
    for i, (targets, ref_on, ref_off) in enumerate(TABLE2_ROWS):
        rec = {"row": i + 1, "targets": "+".join(targets), "num_views": len(targets)}
        for mode in ("online", "offline"):
            vals = [r["top1"] for r in results if r["row"] == i and r["mode"] == mode]
            rec[mode] = round(statistics.median(vals), 2) if vals else None
        rec["ref_online"], rec["ref_offline"] = ref_on, ref_off
        out.append(rec)
    return out


def write_table2(results: list[dict], out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    rows = table2(results)
    cols = ["row", "targets", "num_views", "online", "offline", "ref_online", "ref_offline"]
    printable = [{k: ("-" if v is None else v) for k, v in r.items()} for r in rows]
    return {
        "table2": _write_csv(out_dir / "table2.csv", cols, printable),
        "table2_plot": plotting.view_ablation_bars([r for r in rows if r["online"] or r["offline"]], out_dir / "table2.png"),
    }
