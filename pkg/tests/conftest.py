import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dait.config import RunConfig, apply_overrides  # noqa: E402

REPO = Path(__file__).resolve().parents[1]
DESK_CONFIG = REPO / "configs" / "desk.yaml"


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    """A run that finishes in about a second: 8 images per class, 2 epochs."""
    return apply_overrides(RunConfig(), {
        "run.epochs": 2,
        "run.batch_size": 8,
        "run.out_dir": str(tmp_path / "run"),
        "optimizer.lr": 1e-3,
        "data.per_class": 10,
        "encoders.fit_epochs": 10,
        "encoders.fit_views": 1,
        "encoders.intermediate.channels": [8, 16],
        "encoders.student.channels": [4, 8],
    })


def pytest_terminal_summary(terminalreporter):
    """Print one pass/fail line per acceptance criterion that ran."""
    from acceptance_log import CRITERIA

    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
