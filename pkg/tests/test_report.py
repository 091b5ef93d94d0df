import json

import pytest

from simdis import trainer
from simdis.config import ALL_VIEWS, ViewTargetSet
from simdis.evaluation import evaluate_run
from simdis.report import (
    SUMMARY_COLUMNS,
    TABLE2_ROWS,
    ReportError,
    collect_runs,
    emit_plots,
    read_csv,
    run_costs,
    run_formula,
    table2,
)
from simdis.ablation import row_config


def test_table2_rows_are_valid_target_sets():
    sets = [ViewTargetSet(t) for t, _, _ in TABLE2_ROWS]
    assert all("Shat_vp" in s.to_list() for s in sets)
    assert sets[-1] == ALL_VIEWS
    assert len(set(sets)) == len(sets) == 9


def test_row_configs(make_cfg):
    base = make_cfg(scheme="simdis_on")
    assert row_config(base, 0, "online", 0).scheme.value == "custom"
    assert row_config(base, 0, "offline", 0) is None
    assert row_config(base, 4, "online", 1).scheme.value == "simdis_on"
    assert row_config(base, 8, "online", 1).scheme.value == "simdis_on_7v"
    off = row_config(base, 8, "offline", 2, "t.pt")
    assert off.scheme.value == "simdis_off" and off.view_targets == ALL_VIEWS and off.teacher_checkpoint == "t.pt"


def test_table2_medians():
    results = [{"row": 4, "mode": "online", "top1": v} for v in (50.0, 10.0, 30.0)]
    rows = table2(results)
    assert rows[4]["online"] == 30.0 and rows[4]["offline"] is None
    assert rows[0]["ref_offline"] is None


def test_formulas_follow_scheme(make_cfg):
    for scheme, expected_terms in (("simdis_off", 2), ("simdis_on", 2), ("simdis_on_7v", 3)):
        cfg = make_cfg(scheme=scheme, pretrain_teacher=scheme == "simdis_off")
        formula = run_formula(cfg, run_costs(cfg))
        assert formula.endswith("x M x N") and formula.count("+") == expected_terms - 1
    costs = run_costs(make_cfg(scheme="simdis_on"))
    assert costs["c_T"] > costs["c_S"] > costs["c_heads"] > 0


@pytest.fixture(scope="module")
def evaluated_runs(tmp_path_factory, data_root):
    from tests.conftest import tiny_config

    root = tmp_path_factory.mktemp("report")
    runs = []
    for scheme in ("simdis_on", "simdis_on_7v"):
        run = root / scheme
        trainer.run_scheme(tiny_config(data_root, scheme=scheme, epochs=1), run, stop_after_epochs=1)
        evaluate_run(run)
        runs.append(run)
    return runs


def test_emit_plots_writes_tables_and_figure(evaluated_runs, tmp_path):
    paths = emit_plots(evaluated_runs, tmp_path / "out")
    summary = read_csv(paths["summary"])
    assert list(summary[0])[:5] == ["scheme", "views", "flops_formula", "top1", "top5"]
    assert list(summary[0]) == SUMMARY_COLUMNS
    assert {r["scheme"]: r["views"] for r in summary} == {"simdis_on": "2", "simdis_on_7v": "7"}
    assert paths["accuracy_plot"].stat().st_size > 0
    t1 = read_csv(paths["table1"])
    assert {r["scheme"] for r in t1} == {"simdis_on", "simdis_on_7v"} and "N=1" in t1[0]


def test_report_names_unevaluated_runs(evaluated_runs, tmp_path, data_root):
    from tests.conftest import tiny_config

    bare = tmp_path / "bare"
    trainer.run_scheme(tiny_config(data_root, epochs=1), bare)
    with pytest.raises(ReportError, match="bare"):
        collect_runs(evaluated_runs + [bare])
    with pytest.raises(ReportError, match="nowhere"):
        collect_runs([tmp_path / "nowhere"])
    assert json.loads((bare / "summary.json").read_text())["evals"] == []
