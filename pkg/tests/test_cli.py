import csv
import io
import json

import pytest

from simdis.cli import main
from simdis.config import RUN_DIR_ENV

TINY = [
    "--set", "data.name=shapes", "--set", "data.image_size=8", "--set", "data.num_classes=4",
    "--set", "epochs=1", "--set", "batch_size=16", "--set", "model.teacher_encoder=resnet_w8",
    "--set", "model.student_encoder=resnet_w4", "--set", "model.proj_hidden=16", "--set", "model.proj_dim=8",
    "--set", "probe.epochs=3", "--set", "probe.knn_k=3",
]


def tiny(data_root):
    return TINY + ["--set", f"data.root={data_root}"]


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["flops", "--no-such-flag"], ["ablate-views", "--modes", "sideways"]])
def test_bad_invocations_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_config_errors_exit_1(capsys, tmp_path):
    assert main(["flops", "--set", "tau_base=2"]) == 1
    assert "tau_base" in capsys.readouterr().err
    assert main(["flops", "--set", "data.bogus=1"]) == 1
    assert main(["evaluate", str(tmp_path / "missing")]) == 1


def test_flops_table(capsys):
    assert main(["flops", "--M", "1000", "--N", "10"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    ref = {r["scheme"]: r for r in rows if r["costs"] == "reference"}
    assert ref["simdis_off"]["flops_formula"] == "(8.2G + 1.8G) x M x N"
    assert int(ref["simdis_on"]["total_flops"]) == 5_900_000_000 * 1000 * 10
    desk = {r["scheme"]: int(r["total_flops"]) for r in rows if r["costs"] == "desk"}
    assert desk["simdis_off"] > desk["simdis_on_7v"] > desk["simdis_on"]


def test_pipeline_through_report(tmp_path, data_root, capsys, monkeypatch):
    monkeypatch.setenv(RUN_DIR_ENV, str(tmp_path / "runs"))
    assert main(["train-teacher", *tiny(data_root)]) == 0
    teacher_ckpt = capsys.readouterr().out.strip()
    assert teacher_ckpt.startswith(str(tmp_path / "runs"))
    off = tmp_path / "off"
    assert main(["distill-offline", *tiny(data_root), "--teacher", teacher_ckpt, "--run-dir", str(off)]) == 0
    on = tmp_path / "on"
    assert main(["train-online", *tiny(data_root), "--scheme", "simdis_on_7v", "--run-dir", str(on),
                 "--set", "epochs=2", "--stop-after-epochs", "1"]) == 0
    assert main(["resume", str(on)]) == 0
    capsys.readouterr()
    for run in (off, on):
        assert main(["evaluate", str(run)]) == 0
        res = json.loads(capsys.readouterr().out)
        assert res["backbone"] == "student" and res["epoch"] == (2 if run == on else 1)
    assert main(["report", str(off), str(on), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.csv").exists() and (tmp_path / "rep" / "accuracy_vs_epochs.png").exists()


def test_train_online_refuses_offline_scheme(data_root, tmp_path):
    assert main(["train-online", *tiny(data_root), "--set", "scheme=teacher_only", "--run-dir", str(tmp_path)]) == 1


def test_ablate_views_subset(tmp_path, data_root, capsys):
    out = tmp_path / "abl"
    argv = ["ablate-views", *tiny(data_root), "--rows", "1,5", "--seeds", "0", "--out", str(out)]
    assert main(argv) == 0
    results = json.loads((out / "results.json").read_text())
    assert [(r["row"], r["mode"]) for r in results] == [(0, "online"), (4, "offline"), (4, "online")]
    table = list(csv.DictReader(open(out / "table2.csv")))
    assert table[0]["offline"] == "-" and table[4]["online"] != "-"
    # A rerun reuses finished cells.
    assert main(argv) == 0
    assert json.loads((out / "results.json").read_text()) == results
    # A later call adds cells without dropping earlier ones.
    assert main(["ablate-views", *tiny(data_root), "--rows", "9", "--modes", "online", "--out", str(out)]) == 0
    rows = [(r["row"], r["mode"]) for r in json.loads((out / "results.json").read_text())]
    assert rows == [(0, "online"), (4, "offline"), (4, "online"), (8, "online")]
    assert main(["ablate-views", *tiny(data_root), "--rows", "12", "--out", str(out)]) == 1
