"""Command-line entry point: dataset generation, training, evaluation,
single-pair prediction, highlight-curve export, and feature inspection.

Exit codes: 0 success, 1 validation/config error, 2 runtime error.
Config files are a single JSON document with optional "generation" and
"train" sections; repeated --set key.path=value flags override entries.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    GenerationError,
    ValidationError,
    VidgroundError,
)
from .features import load_manifest, read_feature_file, validate_dataset
from .metrics import per_query_rows
from .synthetic import GenerationConfig, generate_corpus, write_corpus
from .training import (
    config_from_dict,
    export_predictions,
    infer_single,
    load_model,
    load_training_data,
    prepare_samples,
    run_inference,
    train,
)

_VALIDATION_ERRORS = (
    ValidationError, FormatError, DataError, GenerationError, ConfigError,
    FileNotFoundError,
)


def _load_config_doc(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return doc


def _apply_overrides(doc: dict, sets: list[str]) -> dict:
    """Apply repeated key.path=value overrides; values parse as JSON when
    possible, else stay strings."""
    for item in sets:
        if "=" not in item:
            raise ValidationError(f"--set expects key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValidationError(f"--set {key}: {p} is not an object")
        node[parts[-1]] = value
    return doc


def _cmd_gen_data(args) -> int:
    doc = _apply_overrides(_load_config_doc(args.config), args.set)
    section = doc.get("generation", {})
    if args.seed is not None:
        section["seed"] = args.seed
    cfg = GenerationConfig(**section)
    originals, aux = generate_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out, originals, aux, cfg)
    report = validate_dataset(load_manifest(out / "manifest.jsonl"))
    report.raise_if_errors()
    print(f"wrote {report.videos} videos, {report.positives} positive queries, "
          f"{len(aux)} auxiliary records to {out}")
    return 0


def _cmd_train(args) -> int:
    doc = _apply_overrides(_load_config_doc(args.config), args.set)
    cfg = config_from_dict(doc.get("train", {}))
    data = load_training_data(args.data)
    result = train(cfg, data, args.out)
    report = result.best_report
    print(f"trained {result.final_epoch} epochs ({result.steps} steps); "
          f"best map_avg {report.map_avg:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"loss log:   {result.log_path}")
    return 0


def _cmd_eval(args) -> int:
    model, cfg = load_model(args.ckpt)
    dataset = load_manifest(Path(args.data) / "manifest.jsonl")
    artifacts = run_inference(model, dataset, cfg.torch_dtype)
    report = artifacts.report()
    text = report.to_json()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    if args.predictions:
        export_predictions(artifacts, args.predictions)
    if args.per_query:
        rows = per_query_rows(artifacts.preds, artifacts.gts,
                              artifacts.clip_scores, artifacts.clip_labels)
        with open(args.per_query, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    print(text)
    return 0


def _cmd_predict(args) -> int:
    model, cfg = load_model(args.ckpt)
    dataset = load_manifest(Path(args.data) / "manifest.jsonl")
    samples = [s for s in prepare_samples(dataset, cfg.torch_dtype)
               if s.ann.qid == args.qid]
    if not samples:
        raise ValidationError(f"qid {args.qid!r} not found among positive records")
    sample = samples[0]
    ranked, scores = infer_single(model, sample)
    duration = sample.video.duration_s
    payload = {
        "qid": ranked.qid,
        "vid": sample.video.vid,
        "predictions": [
            [round(st * duration, 4), round(en * duration, 4), score]
            for (st, en), score in
            ((m.to_start_end(), s) for m, s in ranked.moments)
        ],
        "clip_scores": [float(v) for v in scores],
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _cmd_export_curves(args) -> int:
    model, cfg = load_model(args.ckpt)
    dataset = load_manifest(Path(args.data) / "manifest.jsonl")
    samples = prepare_samples(dataset, cfg.torch_dtype)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["qid", "clip_index", "raw_score", "sigmoid_score"])
        for s in samples:
            _, scores = infer_single(model, s)
            for i, raw in enumerate(scores):
                sig = 1.0 / (1.0 + np.exp(-raw))
                writer.writerow([s.ann.qid, i, repr(float(raw)), repr(float(sig))])
    print(f"wrote clip score curves for {len(samples)} queries to {out_path}")
    return 0


def _cmd_inspect(args) -> int:
    arr = read_feature_file(args.features)
    print(f"{args.features}: {arr.shape[0]} rows x {arr.shape[1]} cols, "
          f"dtype {arr.dtype}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidground",
        description="Joint moment retrieval / highlight detection workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="JSON config with a 'generation' section")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override generation seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", help="JSON config with a 'train' section")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write the metrics report JSON here")
    p.add_argument("--predictions", help="write ranked moments per qid (JSONL)")
    p.add_argument("--per-query", dest="per_query",
                   help="write per-query metric rows (CSV)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="rank moments for a single query")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--qid", required=True)
    p.add_argument("--out", help="write the prediction JSON here")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("export-curves", help="per-clip salience scores as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_curves)

    p = sub.add_parser("inspect", help="describe an MSDF feature file")
    p.add_argument("--features", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VidgroundError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
