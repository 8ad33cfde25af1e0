"""Comparison tables and training-curve plots from a set of run records."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from decimal import ROUND_HALF_EVEN, Decimal
from statistics import mean

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dait.errors import ContractError  # noqa: E402

logger = logging.getLogger(__name__)

LOSS_KEYS = ("sia", "ira", "cls", "sra", "logit_kd", "total")


@dataclass
class ReportCell:
    method: str
    dataset: str
    ratio: float
    top1: float
    runs: int
    delta: float | None = None


@dataclass
class Report:
    """Result of :func:`emit_report`.

    Attributes:
        cells: One cell per (ratio, dataset, method), ``top1`` averaged over seeds.
        markdown: Rendered table text, also written to ``report.md``.
        plots: Image files written, one loss curve and one accuracy curve per run.
        notes: Remarks about grouping, e.g. datasets present for only some methods.
    """

    cells: list[ReportCell]
    markdown: str
    baseline: str | None
    plots: list[Path] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def cell(self, method: str, ratio: float, dataset: str | None = None) -> ReportCell:
        for c in self.cells:
            if c.method == method and c.ratio == ratio and (dataset is None or c.dataset == dataset):
                return c
        raise KeyError((method, ratio, dataset))


# top-1 is shown as a percentage with this many decimals
DECIMALS = 4


def shown_percent(value: float) -> Decimal:
    """The exact decimal printed for a top-1 fraction."""
    return (Decimal(repr(value)) * 100).quantize(Decimal(1).scaleb(-DECIMALS), rounding=ROUND_HALF_EVEN)


def summarize(records, baseline: str | None = "w/o KD") -> tuple[list[ReportCell], list[str]]:
    """Average top-1 over seeds per (ratio, dataset, method) and attach deltas.

    The delta is ``top1(method) - top1(baseline)`` within the same ratio and
    dataset. It is left ``None`` when the baseline is absent from that group
    or when only one method is present.
    """
    ok = [r for r in records if r.status == "ok" and r.top1 is not None]
    if not ok:
        raise ContractError("emit_report needs at least one successful record")
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in ok:
        groups[(float(r.ratio), r.dataset or "unknown", r.method)].append(float(r.top1))
    cells = [
        ReportCell(method=m, dataset=d, ratio=ratio, top1=mean(vals), runs=len(vals))
        for (ratio, d, m), vals in groups.items()
    ]
    notes = []
    by_section: dict[tuple, list[ReportCell]] = defaultdict(list)
    for c in cells:
        by_section[(c.ratio, c.dataset)].append(c)
    methods_per_dataset: dict[str, set] = defaultdict(set)
    for c in cells:
        methods_per_dataset[c.dataset].add(c.method)
    if len(methods_per_dataset) > 1:
        notes.append(
            f"records span {len(methods_per_dataset)} datasets; each is tabulated separately"
        )
    for (ratio, dataset), section in by_section.items():
        base = next((c for c in section if c.method == baseline), None)
        if base is None:
            if baseline is not None and len(cells) > 1:
                notes.append(f"no {baseline!r} record for dataset {dataset} at ratio {ratio:g}; deltas omitted")
            continue
        for c in section:
            if c is not base:
                c.delta = c.top1 - base.top1
    failed = [r for r in records if r.status != "ok"]
    for r in failed:
        notes.append(f"failed run skipped: {r.method} seed {r.seed} ratio {r.ratio:g} ({r.error})")
    return cells, notes


def render_markdown(cells: list[ReportCell], baseline: str | None, notes=()) -> str:
    """Markdown table, one section per (ratio, dataset).

    The delta column is the exact difference of the printed top-1 values, so
    every row can be checked by hand from the table alone.
    """
    lines = ["# Comparison", ""]
    has_delta = any(c.delta is not None for c in cells)
    for ratio in sorted({c.ratio for c in cells}, reverse=True):
        lines.append(f"## {100 * ratio:g}% training data")
        lines.append("")
        for dataset in sorted({c.dataset for c in cells if c.ratio == ratio}):
            section = [c for c in cells if c.ratio == ratio and c.dataset == dataset]
            section.sort(key=lambda c: (c.method != baseline, c.method))
            lines.append(f"Dataset: `{dataset}`")
            lines.append("")
            header = "| method | runs | top-1 (%) |"
            rule = "|---|---:|---:|"
            if has_delta:
                header += f" delta vs {baseline} |"
                rule += "---:|"
            lines += [header, rule]
            base = next((c for c in section if c.method == baseline), None)
            for c in section:
                row = f"| {c.method} | {c.runs} | {shown_percent(c.top1)} |"
                if has_delta:
                    delta = "" if c.delta is None else f"{shown_percent(c.top1) - shown_percent(base.top1):+}"
                    row += f" {delta} |"
                lines.append(row)
            lines.append("")
    if notes:
        lines.append("Notes:")
        lines.append("")
        lines += [f"- {n}" for n in notes]
        lines.append("")
    return "\n".join(lines)


def _run_label(record, index: int) -> str:
    return f"{index:03d}_{record.method}_r{record.ratio:g}_s{record.seed}".replace(" ", "").replace("/", "")


def plot_curves(record, out_dir: Path, label: str) -> list[Path]:
    """Loss and lambda curves in one figure, accuracy curves in another."""
    if not record.epochs:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = record.series("epoch")
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in LOSS_KEYS:
        values = record.series(key)
        if any(v is not None for v in values):
            ax.plot(epochs, values, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    lam = record.series("lam")
    if any(v is not None for v in lam):
        twin = ax.twinx()
        twin.plot(epochs, lam, "k--", label="lambda")
        twin.set_ylabel("lambda")
        twin.set_ylim(-0.05, 1.05)
        twin.legend(loc="upper right")
    ax.legend(loc="upper left")
    ax.set_title(f"{record.method} (ratio {record.ratio:g}, seed {record.seed})")
    fig.tight_layout()
    path = out_dir / f"{label}_loss.png"
    fig.savefig(path)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("train_top1", "test_top1"):
        ax.plot(epochs, record.series(key), label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title(f"{record.method} (ratio {record.ratio:g}, seed {record.seed})")
    fig.tight_layout()
    path = out_dir / f"{label}_accuracy.png"
    fig.savefig(path)
    plt.close(fig)
    paths.append(path)
    return paths


def emit_report(records, out_dir, baseline: str | None = "w/o KD", plots: bool = True) -> Report:
    """Write ``report.md`` plus per-run curve images under ``out_dir``.

    Args:
        records: RunRecord objects; at least one must have succeeded.
        out_dir: Destination directory.
        baseline: Method name the delta column is computed against.
        plots: Set False to skip the image files.

    Returns:
        The :class:`Report`, whose cells carry the exact float deltas shown
        (rounded) in the table.
    """
    records = list(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells, notes = summarize(records, baseline)
    text = render_markdown(cells, baseline, notes)
    (out / "report.md").write_text(text)
    written = []
    if plots:
        for i, r in enumerate(records):
            written += plot_curves(r, out / "curves", _run_label(r, i))
    logger.info("report written to %s", out / "report.md")
    return Report(cells=cells, markdown=text, baseline=baseline, plots=written, notes=notes)
