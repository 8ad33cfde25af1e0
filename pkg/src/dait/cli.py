"""Batch command-line front end.

Every command resolves its configuration, writes ``resolved_config.yaml`` to
the output directory, and only then starts work. Exit codes: 0 success,
1 runtime or training failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from dait.errors import ConfigError, DaitError

logger = logging.getLogger("dait")

OUT_ROOT_ENV = "DAIT_OUT_ROOT"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override applied after the config file (repeatable)")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ROOT_ENV}/<command> or run.out_dir)")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    p.add_argument("--jobs", type=int, default=1, help="parallel child runs for sweep")
    p.add_argument("--determinism", choices=("strict", "fast"))
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dait", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-projection", help="fit and freeze the VLM projection head")
    _common(p)
    p = sub.add_parser("stage1", help="distil the VLM into the intermediate teacher")
    _common(p)
    p = sub.add_parser("stage2", help="distil the intermediate teacher into the student")
    _common(p)
    p.add_argument("--stage1-checkpoint", help='stage-1 checkpoint path, or "auto"')
    p.add_argument("--mode", choices=("feature", "logit"))
    p = sub.add_parser("baseline", help="train a reference student")
    _common(p)
    p.add_argument("--kind", choices=("nokd", "direct"), default="nokd")
    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = sub.add_parser("sweep", help="run a grid of config variants")
    _common(p)
    p.add_argument("--grid", type=Path, help="YAML mapping of dotted keys to value lists")
    p.add_argument("--axis", action="append", default=[], metavar="KEY=[V1,V2]",
                   help="one grid axis (repeatable)")
    p.add_argument("--baseline", default="w/o KD", help="method the report deltas refer to")
    p = sub.add_parser("analyze-cka", help="linear CKA between two feature dumps")
    _common(p)
    p.add_argument("--a", required=True, type=Path)
    p.add_argument("--b", required=True, type=Path)
    p = sub.add_parser("analyze-simmat", help="class-mean cosine similarity matrix of a dump")
    _common(p)
    p.add_argument("--dump", required=True, type=Path)
    p = sub.add_parser("export-features", help="write pooled features of one encoder")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--role", required=True, choices=("vlm_image", "intermediate", "student"))
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--file", type=Path, help="dump path (default: <out>/features_<role>_<split>.csv)")
    p = sub.add_parser("make-fixture", help="write the synthetic dataset as an image folder")
    _common(p)
    p = sub.add_parser("report", help="comparison table and curves from finished runs")
    _common(p)
    p.add_argument("--runs", nargs="+", required=True, type=Path,
                   help="run directories, searched recursively for summary.json")
    p.add_argument("--baseline", default="w/o KD")
    return parser


def _out_dir(args, cfg_out: str) -> Path:
    if args.out is not None:
        return args.out
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / args.command
    return Path(cfg_out)


def resolve(args, extra: dict | None = None):
    """Parse ``--config``/``--set``/flags into a RunConfig and echo it to the output dir."""
    from dait.config import parse_config

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.determinism is not None:
        overrides.append(f"run.determinism={args.determinism}")
    for key, value in (extra or {}).items():
        overrides.append(f"{key}={json.dumps(value)}")
    probe = parse_config(args.config, overrides)
    out = _out_dir(args, probe.run.out_dir)
    overrides.append(f"run.out_dir={json.dumps(str(out))}")
    return parse_config(args.config, overrides, echo_to=out)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(json.dumps(payload, sort_keys=True))


def _print_record(record):
    print(json.dumps({"method": record.method, "top1": record.top1, "checkpoint": record.checkpoint,
                      "wall_time": round(record.wall_time, 3), "out_dir": record.out_dir}))


def cmd_fit_projection(args):
    from dait import pipeline
    from dait.checkpoint import save_checkpoint
    from dait.encoders import nearest_anchor_accuracy

    import torch

    cfg = resolve(args)
    pipeline.configure_determinism(cfg)
    train_full, test = pipeline.load_datasets(cfg)
    train = pipeline.training_subset(cfg, train_full)
    vlm, history = pipeline.fit_vlm(cfg, train)
    anchors = vlm.encode_text(train.class_names, cfg.encoders.template).values
    test_x = pipeline.batch_augment(test, range(len(test)), pipeline.make_policy(cfg, "eval"))
    acc = nearest_anchor_accuracy(vlm.encode_image(test_x), anchors, test.label_tensor())
    path = save_checkpoint(
        cfg.out_path / "projection.pt",
        {"vlm_image": vlm.image_encoder, "vlm_text": vlm.text_encoder, "f_vlm": vlm.projection},
        kind="projection", config=cfg, epoch=cfg.encoders.fit_epochs,
        metrics={"fit_loss": history[-1], "nearest_anchor_top1": acc},
        tensors={"anchors": anchors, "fit_history": torch.tensor(history)},
    )
    _write_json(cfg.out_path / "fit_summary.json",
                {"checkpoint": str(path), "fit_loss": history[-1], "nearest_anchor_top1": acc})


def cmd_stage1(args):
    from dait.pipeline import run_config

    _print_record(run_config(resolve(args, {"run.stage": "stage1"})))


def cmd_stage2(args):
    from dait.pipeline import run_config

    extra = {"run.stage": "stage2"}
    if args.stage1_checkpoint:
        extra["run.stage1_checkpoint"] = args.stage1_checkpoint
    if args.mode:
        extra["run.mode"] = args.mode
    _print_record(run_config(resolve(args, extra)))


def cmd_baseline(args):
    from dait.pipeline import run_config

    _print_record(run_config(resolve(args, {"run.stage": f"baseline_{args.kind}"})))


def _split(cfg, split):
    from dait.pipeline import load_datasets

    train, test = load_datasets(cfg)
    return train if split == "train" else test


def _checkpoint_config(args):
    """Data settings come from the checkpoint unless the user supplied their own."""
    from dait.checkpoint import load_checkpoint

    extra = {}
    if args.config is None and not args.overrides:
        data = load_checkpoint(args.checkpoint).config.data
        extra = {f"data.{k}": v for k, v in asdict(data).items()}
    return resolve(args, extra)


def cmd_eval(args):
    from dait.pipeline import evaluate

    cfg = _checkpoint_config(args)
    dataset = _split(cfg, args.split)
    top1 = evaluate(args.checkpoint, dataset)
    _write_json(cfg.out_path / "eval.json",
                {"checkpoint": str(args.checkpoint), "split": args.split, "dataset": dataset.tag,
                 "items": len(dataset), "top1": top1})


def _parse_grid(args) -> dict:
    from dait.config import parse_override

    axes = {}
    if args.grid is not None:
        if not args.grid.is_file():
            raise ConfigError(f"grid file not found: {args.grid}")
        axes.update(yaml.safe_load(args.grid.read_text()) or {})
    for text in args.axis:
        key, values = parse_override(text)
        axes[key] = values
    for key, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep axis {key}: expected a non-empty list of values")
    if not axes:
        raise ConfigError("sweep needs --grid or at least one --axis")
    return axes


def cmd_sweep(args):
    from dait.config import apply_overrides
    from dait.pipeline import expand_grid, sweep
    from dait.report import emit_report

    base = resolve(args)
    grid = expand_grid(_parse_grid(args))
    # validate every variant before launching any of them
    for delta in grid:
        apply_overrides(base, delta)
    records = sweep(base, grid, base.out_path, jobs=args.jobs)
    failed = [r for r in records if r.status != "ok"]
    if len(failed) < len(records):
        emit_report(records, base.out_path / "report", baseline=args.baseline)
    print(json.dumps({"variants": len(records), "failed": len(failed),
                      "summary": str(base.out_path / "sweep_summary.csv")}))
    if failed:
        for r in failed:
            logger.error("variant in %s failed: %s", r.out_dir, r.error)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_analyze_cka(args):
    from dait.analysis import cka_report, read_feature_dump

    cfg = resolve(args)
    a, b = read_feature_dump(args.a), read_feature_dump(args.b)
    payload = cka_report(a.features, b.features)
    payload.update({"a": a.source or str(args.a), "b": b.source or str(args.b)})
    _write_json(cfg.out_path / "cka.json", payload)


def cmd_analyze_simmat(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from dait.analysis import read_feature_dump, similarity_matrix

    cfg = resolve(args)
    dump = read_feature_dump(args.dump)
    sim = similarity_matrix(dump)
    n = sim.shape[0]
    csv_path = cfg.out_path / "simmat.csv"
    np.savetxt(csv_path, sim, delimiter=",", header=",".join(f"c{j}" for j in range(n)), comments="",
               fmt="%.9g")
    fig, ax = plt.subplots(figsize=(4 + 0.2 * n, 4 + 0.2 * n))
    im = ax.imshow(sim, vmin=-1, vmax=1, cmap="coolwarm")
    fig.colorbar(im, ax=ax)
    ax.set_title(dump.source or args.dump.name)
    fig.tight_layout()
    png = cfg.out_path / "simmat.png"
    fig.savefig(png)
    plt.close(fig)
    _write_json(cfg.out_path / "simmat.json", {"classes": n, "csv": str(csv_path), "png": str(png)})


def cmd_export_features(args):
    from dait.analysis import export_features

    cfg = _checkpoint_config(args)
    dataset = _split(cfg, args.split)
    path = args.file or cfg.out_path / f"features_{args.role}_{args.split}.csv"
    dump = export_features(args.checkpoint, dataset, args.role, path)
    _write_json(cfg.out_path / "export.json",
                {"file": str(path), "rows": len(dump.labels), "dim": int(dump.features.shape[1]),
                 "source": dump.source})


def cmd_make_fixture(args):
    from dait.data import write_image_folder
    from dait.pipeline import load_datasets

    cfg = resolve(args)
    train, test = load_datasets(cfg)
    root = cfg.out_path / "images"
    write_image_folder(root, train, test)
    _write_json(cfg.out_path / "fixture.json",
                {"root": str(root), "train": len(train), "test": len(test), "classes": list(train.class_names),
                 "tag": train.tag})


def cmd_report(args):
    from dait.pipeline import RunRecord
    from dait.report import emit_report

    cfg = resolve(args)
    records = []
    for run_dir in args.runs:
        if not run_dir.is_dir():
            raise ConfigError(f"--runs: directory not found: {run_dir}")
        for summary in sorted(run_dir.rglob("summary.json")):
            records.append(RunRecord.load(summary.parent))
    if not records:
        raise ConfigError("--runs: no summary.json found")
    report = emit_report(records, cfg.out_path, baseline=args.baseline)
    print(report.markdown)


HANDLERS = {
    "fit-projection": cmd_fit_projection,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "analyze-cka": cmd_analyze_cka,
    "analyze-simmat": cmd_analyze_simmat,
    "export-features": cmd_export_features,
    "make-fixture": cmd_make_fixture,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        code = HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DaitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        last = getattr(exc, "last_checkpoint", None)
        if last:
            print(f"last good checkpoint: {last}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # unexpected failures still map onto the runtime exit code
        logger.exception("command %s crashed", args.command)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
