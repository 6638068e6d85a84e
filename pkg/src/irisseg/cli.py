"""Single entry point exposing the whole pipeline as subcommands.

Each run resolves its configuration (defaults < --config file section < flags),
writes the resolved values next to its outputs as an audit trail, and exits
with 0 on success, 2 on configuration errors, 3 on data errors, and 4 on
numerical divergence.  Failures print one machine-parsable line to stderr:
``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import baseline, data, evaluation, segnet
from .errors import (ConfigError, DataError, DivergenceError, IrisSegError,
                     NoBoundaryFound, NumericsError, ShapeError)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, payload: dict) -> None:
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_run_config(out: Path, resolved: dict) -> None:
    target = out / "run_config.json" if out.is_dir() else out.with_name(out.name + ".run_config.json")
    _write_json(target, resolved)


def _load_config_section(path: str | None, section: str) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    try:
        with open(p) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {p} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise DataError(f"config file {p} must hold a JSON object")
    sec = cfg.get(section, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    return sec


def _dataclass_from_dict(cls, values: dict, what: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in fields:
            raise ConfigError(f"unknown {what} option {key!r}")
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError:
        raise ConfigError(f"sizes are written HxW, got {text!r}")


def _stem(record: data.ManifestRecord) -> str:
    return record.image_path.stem


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    section = _load_config_section(args.config, "synth")
    if args.size:
        section["size"] = list(_parse_size(args.size))
    if args.subjects is not None:
        section["subject_count"] = args.subjects
    if args.seed is not None:
        section["seed"] = args.seed
    cfg = _dataclass_from_dict(data.SynthConfig, section, "synth")
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    samples = data.generate_synthetic(cfg, args.n)
    rows = []
    geometry = []
    for i, (sample, mask, meta) in enumerate(samples):
        name = f"sample_{i:04d}.png"
        data.save_image(out / "images" / name, sample.image)
        data.save_mask(out / "masks" / name, mask)
        rows.append((f"images/{name}", f"masks/{name}", sample.subject_id,
                     f"{sample.pmi_hours:.2f}", sample.spectrum))
        geometry.append({"image": f"images/{name}", **meta})
    data.save_manifest(rows, out / "manifest.csv")
    _write_json(out / "geometry.json", {"samples": geometry})
    _write_run_config(out, {"command": "synth", "n": args.n,
                            "synth": data.synth_config_as_dict(cfg)})
    print(f"wrote {len(rows)} samples to {out}")
    return 0


# ---------------------------------------------------------------- split

def cmd_split(args) -> int:
    manifest = data.load_manifest(args.manifest)
    seed = args.seed if args.seed is not None else 0
    plan = evaluation.make_splits(manifest.subject_ids(), args.n_splits, args.n_test, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, plan.to_dict())
    _write_run_config(out, {"command": "split", "manifest": str(args.manifest),
                            "n_splits": args.n_splits, "n_test": args.n_test, "seed": seed})
    print(f"wrote {args.n_splits} splits to {out}")
    return 0


def _load_split_plan(path: str) -> evaluation.SplitPlan:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"split file not found: {p}")
    with open(p) as fh:
        return evaluation.SplitPlan.from_dict(json.load(fh))


# ---------------------------------------------------------------- train

def _model_config(preset: str) -> segnet.ModelConfig:
    if preset == "mini":
        return segnet.ModelConfig.mini()
    if preset == "full":
        return segnet.ModelConfig.full()
    raise ConfigError(f"unknown preset {preset!r}")


def _prepare_pair(sample: data.Sample, mask: np.ndarray,
                  input_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    if sample.image.shape == tuple(input_size):
        return sample.image, mask
    return (data.downsample_image(sample.image, input_size),
            data.downsample_mask(mask, input_size))


def cmd_train(args) -> int:
    section = _load_config_section(args.config, "train")
    if args.epochs is not None:
        section["epochs"] = args.epochs
    if args.learning_rate is not None:
        section["learning_rate"] = args.learning_rate
    if args.batch_size is not None:
        section["batch_size"] = args.batch_size
    if args.seed is not None:
        section["seed"] = args.seed
    if args.class_weights:
        if args.class_weights == "auto":
            section["class_weights"] = "auto"
        else:
            parts = args.class_weights.split(",")
            if len(parts) != 2:
                raise ConfigError("--class-weights takes 'auto' or 'w_bg,w_iris'")
            section["class_weights"] = [float(parts[0]), float(parts[1])]
    auto_weights = section.get("class_weights") == "auto"
    if auto_weights:
        section = {k: v for k, v in section.items() if k != "class_weights"}
    cfg = _dataclass_from_dict(segnet.TrainConfig, section, "train")

    manifest = data.load_manifest(args.manifest)
    plan = _load_split_plan(args.splits)
    if not 0 <= args.split_index < len(plan.splits):
        raise ConfigError(f"split index {args.split_index} out of range (plan has {len(plan.splits)})")
    train_subjects = set(plan.splits[args.split_index][0])

    model_cfg = _model_config(args.preset)
    dataset = []
    for record in manifest.records:
        if record.subject_id not in train_subjects:
            continue
        if record.mask_path is None:
            raise DataError(f"record {record.image_path} has no mask; cannot train on it")
        sample, mask = data.load_sample(record)
        dataset.append(_prepare_pair(sample, mask, model_cfg.input_size))
    if not dataset:
        raise DataError(f"no training samples for split {args.split_index}")
    if auto_weights:
        cfg = dataclasses.replace(cfg, class_weights=segnet.inverse_class_weights(
            [m for _, m in dataset]))

    model = segnet.build_model(model_cfg, seed=cfg.seed)
    model, history = segnet.train(model, dataset, cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    segnet.save_model(model, out)
    _write_json(out.with_name(out.name + ".loss_history.json"),
                {"per_epoch_mean_loss": history})
    _write_run_config(out, {"command": "train", "manifest": str(args.manifest),
                            "splits": str(args.splits), "split_index": args.split_index,
                            "preset": args.preset, "train": cfg.to_dict(),
                            "model": model_cfg.to_dict(),
                            "n_train_images": len(dataset)})
    final = f", final mean loss {history[-1]:.4f}" if history else ""
    print(f"trained on {len(dataset)} images for {cfg.epochs} epochs{final}; model at {out}")
    return 0


# ---------------------------------------------------------------- predict

def cmd_predict(args) -> int:
    model = segnet.load_model(args.model)
    manifest = data.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for record in manifest.records:
        sample, _ = data.load_sample(record)
        native = sample.image.shape
        small = sample.image if native == tuple(model.config.input_size) \
            else data.downsample_image(sample.image, model.config.input_size)
        mask = segnet.predict_mask(model, segnet.image_to_input(small), native)
        data.save_mask(out / f"{_stem(record)}.png", mask)
    _write_run_config(out, {"command": "predict", "model": str(args.model),
                            "manifest": str(args.manifest)})
    print(f"wrote {len(manifest.records)} predicted masks to {out}")
    return 0


# ---------------------------------------------------------------- segment-baseline

def _baseline_worker(payload: tuple[str, str, dict, str]) -> tuple[str, bool, str]:
    image_path, spectrum, cfg_dict, out_path = payload
    record = data.ManifestRecord(Path(image_path), None, "-", 0.0, spectrum)
    sample, _ = data.load_sample(record)
    cfg = baseline.BaselineConfig(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in cfg_dict.items()})
    try:
        mask = baseline.segment(sample.image, cfg)
        note = ""
    except NoBoundaryFound as exc:
        mask = np.zeros(sample.image.shape, bool)
        note = str(exc)
    data.save_mask(out_path, mask)
    return (Path(out_path).stem, not note, note)


def cmd_segment_baseline(args) -> int:
    section = _load_config_section(args.config, "baseline")
    cfg = _dataclass_from_dict(baseline.BaselineConfig, section, "baseline")
    cfg.validate()
    manifest = data.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payloads = [(str(r.image_path), r.spectrum, dataclasses.asdict(cfg),
                 str(out / f"{_stem(r)}.png")) for r in manifest.records]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_baseline_worker, payloads))
    else:
        results = [_baseline_worker(p) for p in payloads]
    failures = [(stem, note) for stem, ok, note in results if not ok]
    for stem, note in failures:
        print(f"note: {stem}: no boundary found ({note}); wrote empty mask")
    _write_run_config(out, {"command": "segment-baseline", "manifest": str(args.manifest),
                            "baseline": dataclasses.asdict(cfg), "jobs": args.jobs,
                            "failures": [s for s, _ in failures]})
    print(f"wrote {len(payloads)} baseline masks to {out} ({len(failures)} boundary failures)")
    return 0


# ---------------------------------------------------------------- eval

def _iou_report(manifest: data.Manifest, masks_dir: Path,
                plan: evaluation.SplitPlan | None) -> dict:
    per_image = []
    by_subject: dict[str, list[float]] = {}
    for record in manifest.records:
        if record.mask_path is None:
            raise DataError(f"record {record.image_path} has no truth mask; cannot evaluate")
        pred_path = masks_dir / f"{_stem(record)}.png"
        if not pred_path.is_file():
            raise DataError(f"predicted mask missing: {pred_path}")
        truth = data.load_mask(record.mask_path)
        pred = data.load_mask(pred_path)
        value = evaluation.iou(pred, truth)
        per_image.append({"id": _stem(record), "subject": record.subject_id, "iou": value})
        by_subject.setdefault(record.subject_id, []).append(value)

    report = {
        "kind": "iou_report",
        "per_image": per_image,
        "mean_iou": float(np.mean([r["iou"] for r in per_image])),
    }
    if plan is not None:
        splits = []
        for i, (_, test_subjects) in enumerate(plan.splits):
            values = [v for s in test_subjects for v in by_subject.get(s, [])]
            splits.append({"index": i, "test_subjects": list(test_subjects),
                           "n_images": len(values),
                           "mean_iou": float(np.mean(values)) if values else None})
        report["splits"] = splits
    return report


def _render_report_text(report: dict) -> str:
    lines = ["per-image IoU:"]
    for row in report["per_image"]:
        lines.append(f"  {row['id']}  subject={row['subject']}  iou={row['iou']:.4f}")
    if "splits" in report:
        lines.append("per-split mean IoU (test subjects only):")
        for s in report["splits"]:
            mean = "n/a" if s["mean_iou"] is None else f"{s['mean_iou']:.4f}"
            lines.append(f"  split {s['index'] + 1}: test={','.join(s['test_subjects'])}"
                         f"  n={s['n_images']}  mean_iou={mean}")
    lines.append(f"overall mean IoU: {report['mean_iou']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    manifest = data.load_manifest(args.manifest)
    plan = _load_split_plan(args.splits) if args.splits else None
    report = _iou_report(manifest, Path(args.masks), plan)
    report["manifest"] = str(args.manifest)
    report["masks_dir"] = str(args.masks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    _atomic_write_text(out.with_suffix(".txt"), _render_report_text(report))
    _write_run_config(out, {"command": "eval", "manifest": str(args.manifest),
                            "masks": str(args.masks),
                            "splits": str(args.splits) if args.splits else None})
    print(f"mean IoU {report['mean_iou']:.4f} over {len(report['per_image'])} images; report at {out}")
    return 0


# ---------------------------------------------------------------- compare

def _comparison_columns(report_a: dict, report_b: dict) -> tuple[list[float], list[float], str]:
    if "splits" in report_a and "splits" in report_b:
        a = [s["mean_iou"] for s in report_a["splits"]]
        b = [s["mean_iou"] for s in report_b["splits"]]
        if any(v is None for v in a + b):
            raise DataError("reports contain splits with no test images; cannot compare")
        return a, b, "per-split mean IoU"
    ids_a = [r["id"] for r in report_a["per_image"]]
    ids_b = [r["id"] for r in report_b["per_image"]]
    if ids_a != ids_b:
        raise DataError("per-image ids differ between reports; cannot align columns")
    return ([r["iou"] for r in report_a["per_image"]],
            [r["iou"] for r in report_b["per_image"]], "per-image IoU")


def _render_comparison_text(rows, unit: str) -> str:
    lines = [f"comparison ({unit}); improvement = 100*(b-a)/a",
             f"{'row':<10} {'mean_iou_a':>10} {'mean_iou_b':>10} {'improvement':>12}"]
    for row in rows:
        imp = "undefined" if row.improvement_pct is None else f"{row.improvement_pct:.1f}%"
        lines.append(f"{row.label:<10} {row.mean_iou_a:>10.4f} {row.mean_iou_b:>10.4f} {imp:>12}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    reports = []
    for path in (args.report_a, args.report_b):
        p = Path(path)
        if not p.is_file():
            raise DataError(f"report not found: {p}")
        with open(p) as fh:
            reports.append(json.load(fh))
    col_a, col_b, unit = _comparison_columns(*reports)
    rows = evaluation.compare(col_a, col_b)
    payload = {
        "kind": "comparison",
        "unit": unit,
        "report_a": str(args.report_a),
        "report_b": str(args.report_b),
        "rows": [{"label": r.label, "mean_iou_a": r.mean_iou_a, "mean_iou_b": r.mean_iou_b,
                  "improvement_pct": r.improvement_pct} for r in rows],
        "boxplot_a": evaluation.boxplot_stats_as_dict(evaluation.boxplot_stats(col_a)),
        "boxplot_b": evaluation.boxplot_stats_as_dict(evaluation.boxplot_stats(col_b)),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, payload)
    _atomic_write_text(out.with_suffix(".txt"), _render_comparison_text(rows, unit))
    _write_run_config(out, {"command": "compare", "report_a": str(args.report_a),
                            "report_b": str(args.report_b)})
    avg = rows[-1]
    imp = "undefined" if avg.improvement_pct is None else f"{avg.improvement_pct:.1f}%"
    print(f"average: a={avg.mean_iou_a:.4f} b={avg.mean_iou_b:.4f} improvement={imp}; table at {out}")
    return 0


# ---------------------------------------------------------------- overlay

def cmd_overlay(args) -> int:
    manifest = data.load_manifest(args.manifest)
    masks_dir = Path(args.masks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for record in manifest.records:
        pred_path = masks_dir / f"{_stem(record)}.png"
        if not pred_path.is_file():
            raise DataError(f"predicted mask missing: {pred_path}")
        sample, truth = data.load_sample(record)
        pred = data.load_mask(pred_path)
        overlay = data.render_overlay(sample.image, pred, truth)
        Image.fromarray(overlay, mode="RGB").save(out / f"{_stem(record)}_overlay.png")
        written += 1
    _write_run_config(out, {"command": "overlay", "manifest": str(args.manifest),
                            "masks": str(args.masks)})
    print(f"wrote {written} overlays to {out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irisseg",
                                     description="Post-mortem iris segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", help="image size as HxW (default 480x640)")
    p.add_argument("--subjects", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a subject-disjoint split plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-splits", type=int, default=10)
    p.add_argument("--n-test", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the encoder-decoder on a split's train subjects")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--split-index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("mini", "full"), default="mini")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--class-weights", help="'auto' or 'w_bg,w_iris'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write upscaled predicted masks for a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("segment-baseline", help="run the conventional segmenter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_segment_baseline)

    p = sub.add_parser("eval", help="per-image IoU plus per-split means")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="comparison table with improvement column")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("overlay", help="tinted TP/FP/FN overlays")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NumericsError) as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IrisSegError as exc:
        print(f"error: failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
