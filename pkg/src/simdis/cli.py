"""Command-line entry point: ``simdis <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import yaml

from .accounting import REF_C_HEADS, REF_C_S, REF_C_T, AccountingError, CostModel, scheme_cost, scheme_formula
from .config import RUN_DIR_ENV, ConfigError, Scheme, SchemeConfig, config_from_dict, load_config
from .data import DataError, fetch_dataset, load_split, DatasetSpec
from .evaluation import EvalError, evaluate_run
from .models import ModelError
from .report import TABLE2_ROWS, ReportError, emit_plots, run_costs
from .trainer import TrainingError, default_runs_root
from . import ablation, trainer

KNOWN_ERRORS = (ConfigError, DataError, ModelError, TrainingError, EvalError, ReportError, AccountingError,
                FileNotFoundError)


def _set_path(raw: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def build_config(args, **forced) -> SchemeConfig:
    """Config file (or defaults) + ``--set key=value`` overrides + command-implied fields."""
    raw = load_config(args.config).to_dict() if args.config else SchemeConfig().to_dict()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(raw, key, yaml.safe_load(value))
    for key, value in forced.items():
        _set_path(raw, key, value)
    # An empty target list (the teacher-only default) falls back to the scheme's canonical set.
    if raw.get("scheme") in ("teacher_only", "simdis_on_7v") or not raw.get("view_targets"):
        raw["view_targets"] = None
    return config_from_dict(raw)


def _run_dir(args, cfg: SchemeConfig, tag: str) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    return default_runs_root() / f"{tag}-seed{cfg.seed}"


def cmd_fetch_data(args) -> int:
    out = fetch_dataset(args.name, args.root, image_size=args.image_size, num_classes=args.num_classes,
                        n_train=args.n_train, n_eval=args.n_eval, seed=args.seed, overwrite=args.overwrite)
    print(out)
    return 0


def cmd_train_teacher(args) -> int:
    cfg = build_config(args, scheme="teacher_only")
    print(trainer.train_teacher(cfg, _run_dir(args, cfg, "teacher"), args.stop_after_epochs))
    return 0


def cmd_train_online(args) -> int:
    cfg = build_config(args)
    if args.scheme:
        cfg = build_config(args, scheme=args.scheme)
    if cfg.scheme in (Scheme.TEACHER_ONLY, Scheme.SIMDIS_OFF):
        raise ConfigError(f"scheme: train-online cannot run {cfg.scheme.value!r}")
    print(trainer.run_scheme(cfg, _run_dir(args, cfg, cfg.scheme.value), args.stop_after_epochs))
    return 0


def cmd_distill_offline(args) -> int:
    forced = {"scheme": "simdis_off"}
    if args.teacher:
        forced["teacher_checkpoint"] = str(args.teacher)
    cfg = build_config(args, **forced)
    print(trainer.train_offline_student(cfg, None, _run_dir(args, cfg, "simdis_off"), args.stop_after_epochs))
    return 0


def cmd_resume(args) -> int:
    print(trainer.resume(args.run_dir, args.stop_after_epochs))
    return 0


def cmd_evaluate(args) -> int:
    probe = None
    if args.probe_epochs is not None:
        probe = load_config(Path(args.run_dir) / "config.yaml").probe
        probe.epochs = args.probe_epochs
    res = evaluate_run(args.run_dir, args.backbone, probe)
    print(json.dumps({k: res[k] for k in ("backbone", "epoch", "top1", "top5", "knn_top1")}))
    return 0


def flops_rows(cfg: SchemeConfig, M: int, N: int) -> list[dict]:
    """Cost table for the three schemes, with reference and desk-measured per-image costs."""
    desk = run_costs(cfg.replace(scheme=Scheme.SIMDIS_ON_7V, view_targets=None, teacher_checkpoint=None,
                                 pretrain_teacher=False))
    rows = []
    for source, (cT, cS, ch) in (("reference", (REF_C_T, REF_C_S, REF_C_HEADS)),
                                 ("desk", (desk["c_T"], desk["c_S"], desk["c_heads"]))):
        model = CostModel(cT, cS, ch, M, N)
        for scheme, views in (("simdis_off", 2), ("simdis_on", 2), ("simdis_on_7v", 7)):
            rows.append({"costs": source, "scheme": scheme, "views": views,
                         "flops_formula": scheme_formula(scheme, cT, cS, ch), "M": M, "N": N,
                         "total_flops": scheme_cost(model, scheme)})
    return rows


def cmd_flops(args) -> int:
    cfg = build_config(args)
    M = args.M
    if M is None:
        M = len(load_split(DatasetSpec.from_config(cfg.data, "train")))
    rows = flops_rows(cfg, M, args.N if args.N is not None else cfg.epochs)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), delimiter=args.delimiter)
    w.writeheader()
    w.writerows(rows)
    return 0


def cmd_report(args) -> int:
    paths = emit_plots(args.run_dirs, args.out)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _modes(text: str) -> list[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in modes if m not in ablation.MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"modes must be from {ablation.MODES}, got {text!r}")
    return modes


def cmd_ablate_views(args) -> int:
    cfg = build_config(args, scheme="simdis_on")
    rows = [r - 1 for r in args.rows] if args.rows else range(len(TABLE2_ROWS))
    if any(not 0 <= r < len(TABLE2_ROWS) for r in rows):
        raise ConfigError(f"--rows: valid rows are 1..{len(TABLE2_ROWS)}")
    out = Path(args.out) if args.out else default_runs_root() / "ablate-views"
    results = ablation.run_grid(cfg, out, rows, args.modes, args.seeds, args.jobs, args.teacher_epochs)
    print(f"{len(results)} runs; table at {out / 'table2.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simdis", description="Siamese self-distillation experiments at desk scale.")
    parser.add_argument("--runs-root", help=f"default parent for run directories (also ${RUN_DIR_ENV})")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, fn, help_text, config=True, run_dir=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        if config:
            p.add_argument("--config", type=Path, help="YAML config; defaults are used when omitted")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config field, e.g. --set data.image_size=8 (repeatable)")
        if run_dir:
            p.add_argument("--run-dir", type=Path)
            p.add_argument("--stop-after-epochs", type=int)
        return p

    p = add("fetch-data", cmd_fetch_data, "generate or download a dataset into the data root", False, False)
    p.add_argument("--name", default="shapes_mono", choices=["shapes", "shapes_mono", "digits"])
    p.add_argument("--root", default="data")
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-eval", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")

    add("train-teacher", cmd_train_teacher, "BYOL-pretrain the teacher alone")
    p = add("train-online", cmd_train_online, "joint teacher and student training")
    p.add_argument("--scheme", choices=[s.value for s in Scheme if s not in (Scheme.TEACHER_ONLY, Scheme.SIMDIS_OFF)])
    p = add("distill-offline", cmd_distill_offline, "distill a frozen pretrained teacher into the student")
    p.add_argument("--teacher", type=Path, help="teacher checkpoint (else teacher_checkpoint in the config)")

    p = add("resume", cmd_resume, "continue a run from its checkpoint", False, False)
    p.add_argument("run_dir", type=Path)
    p.add_argument("--stop-after-epochs", type=int)

    p = add("evaluate", cmd_evaluate, "linear and k-NN probes of a run's backbone", False, False)
    p.add_argument("run_dir", type=Path)
    p.add_argument("--backbone", default="auto", choices=["auto", "student", "teacher"])
    p.add_argument("--probe-epochs", type=int)

    p = add("flops", cmd_flops, "print the training-cost table", True, False)
    p.add_argument("--M", type=int, help="images per epoch (default: the configured train split)")
    p.add_argument("--N", type=int, help="epochs (default: config epochs)")
    p.add_argument("--delimiter", default=",")

    p = add("report", cmd_report, "tables and figures from evaluated runs", False, False)
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = add("ablate-views", cmd_ablate_views, "view-target grid, online and offline", True, False)
    p.add_argument("--out", type=Path)
    p.add_argument("--rows", type=_int_list, help="1-based rows, e.g. 1,5,9 (default: all)")
    p.add_argument("--modes", type=_modes, default=list(ablation.MODES))
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--teacher-epochs", type=int, help="offline teacher budget (default: config epochs)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.runs_root:
        os.environ[RUN_DIR_ENV] = str(args.runs_root)
    try:
        return args.fn(args)
    except KNOWN_ERRORS as exc:
        print(f"simdis {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
