import math

import pytest
import torch

from dait import pipeline
from dait.checkpoint import load_checkpoint
from dait.config import apply_overrides
from dait.encoders import ParameterGroups, module_checksum
from dait.errors import ConfigError, ContractError, TrainingError
from dait.pipeline import (
    RunRecord,
    evaluate,
    expand_grid,
    load_datasets,
    run_config,
    sweep,
    top1_accuracy,
)
from dait.schedule import lambda_at


class RecordingGroups(ParameterGroups):
    """ParameterGroups that remembers every instance built during a run."""

    instances: list = []

    def __init__(self, groups):
        super().__init__(groups)
        RecordingGroups.instances.append(self)


@pytest.fixture
def recorded_groups(monkeypatch):
    RecordingGroups.instances = []
    monkeypatch.setattr(pipeline, "ParameterGroups", RecordingGroups)
    return RecordingGroups.instances


@pytest.fixture
def stage1_run(tiny_config):
    cfg = apply_overrides(tiny_config, {"run.out_dir": str(tiny_config.out_path / "s1")})
    return cfg, run_config(cfg)


def _states_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# --------------------------------------------------------------------------
# stage 1


def test_stage1_first_epoch_is_pure_alignment(stage1_run):
    _, record = stage1_run
    first = record.epochs[0]
    assert first["lam"] == 0.0
    assert first["total"] == pytest.approx((first["sia"] + first["ira"]) / 2, rel=1e-6)


def test_stage1_outputs(stage1_run):
    cfg, record = stage1_run
    out = cfg.out_path
    for name in ("resolved_config.yaml", "epochs.csv", "summary.json", "stage1.pt", "stage1.json"):
        assert (out / name).is_file(), name
    assert record.method == "intermediate" and record.status == "ok"
    assert len(record.epochs) == cfg.run.epochs
    ckpt = load_checkpoint(record.checkpoint)
    assert ckpt.kind == "stage1"
    assert ckpt.tensors["anchors"].shape == (cfg.data.num_classes, cfg.encoders.dim)
    assert len(ckpt.tensors["fit_history"]) == cfg.encoders.fit_epochs + 1


def test_stage1_keeps_vlm_frozen(tiny_config, recorded_groups):
    run_config(tiny_config)
    (groups,) = recorded_groups
    assert sorted(groups.frozen_groups()) == ["f_vlm", "vlm_image", "vlm_text"]
    for name in groups.frozen_groups():
        assert groups.assert_frozen(name)
    assert module_checksum(groups.groups["vlm_image"]) == module_checksum(pipeline.build_vlm(tiny_config).image_encoder)


def test_checkpoint_reproduces_recorded_accuracy(stage1_run):
    cfg, record = stage1_run
    _, test = load_datasets(cfg)
    assert evaluate(record.checkpoint, test) == record.top1


def test_record_round_trip(stage1_run):
    cfg, record = stage1_run
    loaded = RunRecord.load(cfg.out_path)
    assert loaded.top1 == record.top1 and loaded.method == record.method
    assert loaded.series("total") == pytest.approx(record.series("total"), rel=1e-12)
    assert loaded.series("epoch") == record.series("epoch")


# --------------------------------------------------------------------------
# stage 2


@pytest.mark.parametrize("mode,distill_key", [("feature", "sra"), ("logit", "logit_kd")])
def test_stage2_keeps_teachers_frozen(stage1_run, recorded_groups, mode, distill_key):
    cfg1, rec1 = stage1_run
    cfg = apply_overrides(cfg1, {"run.stage": "stage2", "run.mode": mode, "run.stage1_checkpoint": rec1.checkpoint,
                                 "run.out_dir": str(cfg1.out_path.parent / f"s2_{mode}")})
    record = run_config(cfg)
    (groups,) = recorded_groups
    assert sorted(groups.frozen_groups()) == ["f_vlm", "intermediate", "vlm_image", "vlm_text"]
    assert all(groups.assert_frozen(n) for n in groups.frozen_groups())
    before, after = load_checkpoint(rec1.checkpoint).state, load_checkpoint(record.checkpoint).state
    for name in ("vlm_image", "vlm_text", "f_vlm", "intermediate"):
        assert _states_equal(before[name], after[name]), name
    assert record.method == ("DAIT-F" if mode == "feature" else "DAIT-L")
    assert distill_key in record.epochs[0]


def test_stage2_lambda_trace_matches_schedule(stage1_run):
    cfg1, rec1 = stage1_run
    cfg = apply_overrides(cfg1, {"run.stage": "stage2", "run.stage1_checkpoint": rec1.checkpoint, "run.epochs": 4,
                                 "schedule.k": 0.4, "schedule.b": 0.1,
                                 "run.out_dir": str(cfg1.out_path.parent / "s2_lam")})
    record = run_config(cfg)
    params = cfg.schedule_params()
    assert record.series("lam") == [lambda_at(params, e) for e in range(4)]
    assert record.series("lam")[-1] == 1.0


def test_stage2_auto_trains_stage1(tiny_config):
    cfg = apply_overrides(tiny_config, {"run.stage": "stage2", "run.stage1_checkpoint": "auto",
                                        "stage1_overrides.run.epochs": 1})
    record = run_config(cfg)
    s1 = RunRecord.load(cfg.out_path / "stage1")
    assert len(s1.epochs) == 1
    assert load_checkpoint(record.checkpoint).manifest["metrics"]["stage1_checkpoint"] == s1.checkpoint


def test_stage2_rejects_student_checkpoint_as_teacher(tiny_config, tmp_path):
    base = run_config(apply_overrides(tiny_config, {"run.stage": "baseline_nokd"}))
    cfg = apply_overrides(tiny_config, {"run.stage": "stage2", "run.stage1_checkpoint": base.checkpoint,
                                        "run.out_dir": str(tmp_path / "bad")})
    with pytest.raises(ConfigError, match="intermediate"):
        run_config(cfg)


# --------------------------------------------------------------------------
# baselines


def test_nokd_baseline_has_only_classification(tiny_config):
    record = run_config(apply_overrides(tiny_config, {"run.stage": "baseline_nokd"}))
    assert record.method == "w/o KD"
    for row in record.epochs:
        assert set(row) == {"epoch", "cls", "total", "train_top1", "test_top1", "lr"}
        assert row["cls"] == row["total"]


def test_direct_baseline_with_lambda_one_matches_nokd(tiny_config, tmp_path):
    nokd = run_config(apply_overrides(tiny_config, {"run.stage": "baseline_nokd", "run.out_dir": str(tmp_path / "n")}))
    direct = run_config(apply_overrides(tiny_config, {
        "run.stage": "baseline_direct", "schedule.k": 0.0, "schedule.b": 1.0, "run.out_dir": str(tmp_path / "d"),
    }))
    assert direct.method == "KD (T: VLM)"
    assert set(direct.epochs[0]) >= {"sia", "ira", "cls", "lam"}
    assert direct.series("total") == pytest.approx(direct.series("cls"), rel=1e-12)
    assert direct.series("cls") == pytest.approx(nokd.series("cls"), rel=1e-5)
    assert direct.top1 == nokd.top1


def test_run_baseline_rejects_other_stages(tiny_config):
    with pytest.raises(ConfigError):
        pipeline.run_baseline(tiny_config)


# --------------------------------------------------------------------------
# failures


def test_non_finite_loss_reports_last_good_checkpoint(tiny_config, monkeypatch):
    real = pipeline.losses.cls_loss
    calls = {"n": 0}
    batches_per_epoch = math.ceil(tiny_config.data.per_class * tiny_config.data.num_classes * 0.8 / tiny_config.run.batch_size)

    def flaky(logits, labels):
        calls["n"] += 1
        value = real(logits, labels)
        return value * float("nan") if calls["n"] > batches_per_epoch else value

    monkeypatch.setattr(pipeline.losses, "cls_loss", flaky)
    cfg = apply_overrides(tiny_config, {"run.stage": "baseline_nokd", "run.checkpoint_select": "last"})
    with pytest.raises(TrainingError) as info:
        run_config(cfg)
    assert "epoch 1" in str(info.value)
    assert info.value.last_checkpoint is not None
    assert load_checkpoint(info.value.last_checkpoint).manifest["epoch"] == 0


# --------------------------------------------------------------------------
# evaluation


def test_top1_examples():
    labels = torch.tensor([0, 1, 2, 3])
    assert top1_accuracy(torch.eye(4), labels) == 1.0
    constant = torch.tensor([[1.0, 0, 0, 0]]).repeat(4, 1)
    assert top1_accuracy(constant, labels) == 0.25
    logits = torch.eye(5)
    assert top1_accuracy(logits, torch.tensor([0, 1, 2, 0, 0])) == pytest.approx(0.6)
    with pytest.raises(ContractError):
        top1_accuracy(torch.zeros(0, 2), torch.zeros(0, dtype=torch.long))


def test_evaluate_class_mismatch(stage1_run):
    from dait.data import generate_synthetic

    _, record = stage1_run
    _, other = generate_synthetic(3, 5, 32)
    with pytest.raises(ContractError):
        evaluate(record.checkpoint, other)


# --------------------------------------------------------------------------
# sweeps


def test_grid_cardinality():
    assert len(expand_grid({"schedule.k": [0, 1 / 30], "schedule.b": [0, 0.3]})) == 4
    assert expand_grid({}) == []
    ratios = expand_grid({"data.ratio": [0.3, 0.5, 1.0]})
    assert [d["data.ratio"] for d in ratios] == [0.3, 0.5, 1.0]


def test_empty_sweep(tiny_config):
    assert sweep(tiny_config, []) == []


def test_sweep_runs_every_variant_and_survives_failures(tiny_config, tmp_path):
    base = apply_overrides(tiny_config, {"run.stage": "baseline_nokd", "run.epochs": 1})
    grid = expand_grid({"schedule.k": [0.0, 0.5], "schedule.b": [0.0, 0.3]}) + [{"data.ratio": 2.0}]
    records = sweep(base, grid, tmp_path / "sw")
    assert len(records) == 5
    assert [r.status for r in records] == ["ok"] * 4 + ["failed"]
    assert "ConfigError" in records[-1].error
    rows = (tmp_path / "sw" / "sweep_summary.csv").read_text().strip().splitlines()
    assert len(rows) == 6
    assert len({r.out_dir for r in records}) == 5
