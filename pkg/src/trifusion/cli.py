"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``predict``, ``gradcheck``,
``dataset-stats``, ``synth``. Exit codes: 0 ok, 1 verification failure,
2 input error, 3 checkpoint error. Every error path prints one
machine-parseable line ``error: <category>: <message>`` to stderr.
``TRIFUSION_LOG=quiet`` silences progress output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import gradcheck as gradcheck_mod
from .data import bilinear_resize, decode_image_file, ingest_directory, \
    synth_to_directory
from .errors import CheckpointError, ContractError, TrifusionError
from .metrics import evaluate
from .tensor import Tensor
from .train import fit

EXIT_CODES = {"verification": 1, "input": 2, "checkpoint": 3, "error": 2}


def _progress(quiet: bool):
    if quiet or os.environ.get("TRIFUSION_LOG", "").lower() == "quiet":
        return None
    return print


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_metrics(out_dir: Path, stem: str, report) -> None:
    _write_json(out_dir / f"{stem}.json", report.to_json_dict())
    rows = report.to_csv_rows()
    lines = ["field,value"] + [f"{k},{v!r}" for k, v in rows]
    (out_dir / f"{stem}.csv").write_text("\n".join(lines) + "\n")


def _write_confusion_csv(path: Path, cm, class_names) -> None:
    lines = ["true\\pred," + ",".join(class_names)]
    for i, name in enumerate(class_names):
        lines.append(name + "," + ",".join(str(int(v))
                                           for v in cm.counts[i]))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = config_mod.ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.dataset_root:
        cfg.data.kind = "directory"
        cfg.data.root = args.dataset_root
    if args.max_epochs is not None:
        cfg.train.max_epochs = args.max_epochs
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if args.learning_rate is not None:
        cfg.train.learning_rate = args.learning_rate
    cfg.train.validate()

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    _write_json(out_dir / "config.resolved.json", resolved)

    splits = config_mod.load_data(cfg.data, cfg.input_size)
    train_ds, val_ds = splits["train"], splits["val"]
    model = config_mod.build_model(cfg.model, cfg.seed)

    progress = _progress(args.quiet)
    record, _ = fit(model, train_ds, val_ds, cfg.train,
                    curve_path=str(out_dir / "curves.csv"),
                    progress=progress)

    metadata = {
        "seed": cfg.seed,
        "class_names": list(train_ds.class_names),
        "train_config": cfg.train.to_dict(),
        "stopped_epoch": record.stopped_epoch,
        "best_epoch": record.best_epoch,
        "best_val_loss": (record.val_loss[record.best_epoch - 1]
                          if record.best_epoch else None),
    }
    ckpt_mod.save_checkpoint(out_dir / "checkpoint.elck", model,
                             resolved["model"], metadata)

    cm, report = evaluate(model, val_ds, batch_size=cfg.train.batch_size)
    _write_metrics(out_dir, "metrics.val", report)
    _write_confusion_csv(out_dir / "confusion_matrix.val.csv", cm,
                         val_ds.class_names)
    if not args.no_figures:
        from .plots import save_confusion_matrix, save_training_curves
        save_training_curves(record, out_dir / "curves.png")
        save_confusion_matrix(cm, val_ds.class_names,
                              out_dir / "confusion_matrix.val.png")
    if progress:
        progress(f"best epoch {record.best_epoch} "
                 f"(val_loss={metadata['best_val_loss']:.4f}); "
                 f"final val accuracy {report.accuracy:.4f}")
        progress(f"outputs written to {out_dir}")
    return 0


def _load_model(checkpoint_path):
    ckpt = ckpt_mod.load_checkpoint(checkpoint_path)
    model = config_mod.build_model_from_resolved(ckpt.model_config)
    ckpt_mod.restore_into(model, ckpt)
    return model, ckpt


def cmd_eval(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    input_size = ckpt.model_config["mobile"]["input_size"]
    result = ingest_directory(args.dataset_root, input_size)
    if args.split not in result.splits:
        raise ContractError(f"unknown split {args.split!r}")
    dataset = result.splits[args.split]
    if not dataset.samples:
        raise ContractError(f"split {args.split!r} is empty")
    cm, report = evaluate(model, dataset, batch_size=args.batch_size)

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(report.table())
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    _write_metrics(out_dir, f"metrics.{args.split}", report)
    _write_confusion_csv(out_dir / f"confusion_matrix.{args.split}.csv", cm,
                         dataset.class_names)
    if not args.no_figures:
        from .plots import save_confusion_matrix
        save_confusion_matrix(cm, dataset.class_names,
                              out_dir / f"confusion_matrix.{args.split}.png")
    return 0


def cmd_predict(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    input_size = ckpt.model_config["mobile"]["input_size"]
    image = decode_image_file(Path(args.image))
    image = bilinear_resize(image, input_size, input_size)
    probs = model.forward(Tensor(image[None]), mode="eval").data[0]
    names = ckpt.metadata.get("class_names") or \
        [f"class{i}" for i in range(probs.size)]
    winner = int(probs.argmax())
    print(json.dumps({"class": names[winner], "label": winner,
                      "probs": {n: float(p) for n, p in zip(names, probs)}},
                     sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_gradcheck(args.scope, seed=args.seed)
    print(gradcheck_mod.format_report(results, args.threshold))
    return 0 if all(r.ok(args.threshold) for r in results) else 1


def cmd_dataset_stats(args) -> int:
    result = ingest_directory(args.root, args.image_size)
    for split, counts in result.counts.items():
        total = sum(counts.values())
        per_class = " ".join(f"{name}={n}" for name, n in counts.items())
        print(f"{split}: total={total} {per_class}")
    for warning in result.skipped:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    synth_to_directory(args.out, args.n_train, args.n_val, args.n_test,
                       args.size, args.seed)
    print(f"synthetic dataset written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trifusion",
        description="Three-branch ensemble image classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--dataset-root")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--output-dir", default=".")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("scope", choices=gradcheck_mod.SCOPES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=gradcheck_mod.THRESHOLD)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dataset-stats", help="report per-split class counts")
    p.add_argument("--root", required=True)
    p.add_argument("--image-size", type=int, default=8)
    p.set_defaults(func=cmd_dataset_stats)

    p = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=32)
    p.add_argument("--n-val", type=int, default=4)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrifusionError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {exc.category}: {message}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 2)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
