import re
from decimal import Decimal

import pytest

from dait.errors import ContractError
from dait.pipeline import RunRecord
from dait.report import emit_report, shown_percent

TAG = "synthetic-N4"


def rec(method, top1, ratio=1.0, seed=0, dataset=TAG, epochs=None, status="ok"):
    rows = epochs if epochs is not None or top1 is None else [
        {"epoch": 0, "lam": 0.0, "cls": 1.2, "total": 1.0, "train_top1": 0.4, "test_top1": top1 / 2, "lr": 1e-3},
        {"epoch": 1, "lam": 0.5, "cls": 0.8, "total": 0.7, "train_top1": 0.7, "test_top1": top1, "lr": 1e-3},
    ]
    return RunRecord(method=method, stage="x", dataset=dataset, ratio=ratio, seed=seed, config={},
                     epochs=rows, top1=top1, status=status)


def table_rows(markdown):
    return [line for line in markdown.splitlines() if line.startswith("| ") and not line.startswith("| method")]


def test_single_record_has_no_delta_column(tmp_path):
    report = emit_report([rec("DAIT-F", 0.9)], tmp_path)
    assert "delta" not in report.markdown
    assert len(table_rows(report.markdown)) == 1
    assert (tmp_path / "report.md").read_text() == report.markdown
    assert len(report.plots) == 2 and all(p.is_file() for p in report.plots)


def test_delta_is_difference_of_top1(tmp_path):
    report = emit_report([rec("DAIT-F", 0.9125), rec("w/o KD", 0.8375)], tmp_path, plots=False)
    cell = report.cell("DAIT-F", 1.0)
    assert cell.delta == 0.9125 - 0.8375
    assert report.cell("w/o KD", 1.0).delta is None
    rows = {r.split("|")[1].strip(): r for r in table_rows(report.markdown)}
    assert "| 91.2500 |" in rows["DAIT-F"] and "+7.5000" in rows["DAIT-F"]


def test_seeds_are_averaged(tmp_path):
    records = [rec("DAIT-F", v, seed=s) for s, v in enumerate((0.9, 0.95, 1.0))]
    records += [rec("w/o KD", v, seed=s) for s, v in enumerate((0.8, 0.85, 0.75))]
    report = emit_report(records, tmp_path, plots=False)
    assert report.cell("DAIT-F", 1.0).runs == 3
    assert report.cell("DAIT-F", 1.0).top1 == pytest.approx(0.95)
    assert report.cell("DAIT-F", 1.0).delta == report.cell("DAIT-F", 1.0).top1 - report.cell("w/o KD", 1.0).top1


def test_three_ratios_give_three_sections(tmp_path):
    records = [rec(m, 0.5 + r / 3, ratio=r) for r in (0.3, 0.5, 1.0) for m in ("DAIT-F", "w/o KD")]
    report = emit_report(records, tmp_path, plots=False)
    headings = re.findall(r"^## (.+)$", report.markdown, flags=re.M)
    assert headings == ["100% training data", "50% training data", "30% training data"]


def test_mismatched_datasets_are_grouped_separately(tmp_path):
    records = [rec("DAIT-F", 0.9), rec("w/o KD", 0.8), rec("DAIT-F", 0.7, dataset="birds")]
    report = emit_report(records, tmp_path, plots=False)
    assert report.markdown.count("Dataset: ") == 2
    assert any("2 datasets" in n for n in report.notes)
    assert any("birds" in n for n in report.notes)
    assert report.cell("DAIT-F", 1.0, "birds").delta is None


def test_failed_runs_are_noted_not_counted(tmp_path):
    records = [rec("DAIT-F", 0.9), rec("DAIT-F", None, seed=1, status="failed")]
    report = emit_report(records, tmp_path, plots=False)
    assert report.cell("DAIT-F", 1.0).runs == 1
    assert any("failed" in n for n in report.notes)


def test_no_successful_record(tmp_path):
    with pytest.raises(ContractError):
        emit_report([], tmp_path)


def test_printed_deltas_are_exact_differences_of_printed_values(tmp_path):
    records = [rec("DAIT-F", 1 / 3), rec("w/o KD", 0.1 + 0.2)]
    report = emit_report(records, tmp_path, plots=False)
    for row in table_rows(report.markdown):
        cells = [c.strip() for c in row.strip("|").split("|")]
        if cells[0] == "DAIT-F":
            assert Decimal(cells[3]) == shown_percent(1 / 3) - shown_percent(0.1 + 0.2)
