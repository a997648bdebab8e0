"""Command-line entry point tying the pipeline stages together."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import corpus, dataset, evaluation, training
from .errors import ConfigError, EmofuseError, ManifestError
from .models import ModelConfig, build_model, restore_model
from .training import TrainConfig, TrainingHistory

log = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, help="global random seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel workers where supported")
    parser.add_argument("--force", action="store_true",
                        help="rebuild outputs that already exist")


def _overrides(args, mapping) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out[("training", "seed")] = args.seed
    if getattr(args, "out", None):
        out[("paths", "out_dir")] = args.out
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None and value is not False:
            out[(section, key)] = value
    return out


def _resolve(args, mapping=None) -> config_mod.RunConfig:
    return config_mod.load_run_config(path=args.config,
                                      overrides=_overrides(args, mapping or {}))


def _require_out(rc) -> Path:
    if not rc.out_dir:
        raise ConfigError("an output directory is required (--out)")
    return Path(rc.out_dir)


def _stamp(rc, out_dir, inputs) -> None:
    config_mod.save_run_config(rc, out_dir)
    config_mod.write_input_hash(out_dir, inputs)


def _prepare_manifest(rc, data_root, mode) -> dataset.Manifest:
    """Index, filter to the class set, balance, split, optionally augment."""
    manifest = dataset.build_manifest(data_root, rc.segment, mode=mode)
    names = dataset.class_names(rc.model.num_classes)
    manifest = manifest.filter_classes(names)
    balanced = dataset.balance_and_split(manifest, rc.per_class_total,
                                         rc.train_fraction, seed=rc.train.seed)
    if rc.augment:
        balanced = dataset.augment(balanced, seed=rc.train.seed)
    return balanced


def cmd_synth(args) -> int:
    rc = _resolve(args, {"classes": ("models", "num_classes")})
    out = _require_out(rc)
    if args.raw:
        corpus.generate_raw_fixture(out, n_per_class=args.n,
                                    num_classes=rc.model.num_classes,
                                    seed=rc.train.seed,
                                    with_video=not args.no_video)
        kind = "raw recordings"
    else:
        corpus.generate_synthetic_fixture(out, n_per_class=args.n,
                                          num_classes=rc.model.num_classes,
                                          seed=rc.train.seed,
                                          segment=rc.segment,
                                          crop_fraction=rc.crop_fraction,
                                          with_video=not args.no_video)
        kind = "dataset artifacts"
    _stamp(rc, out, [])
    print(f"wrote synthetic {kind} for {rc.model.num_classes} classes x "
          f"{args.n} utterances under {out}")
    return 0


def cmd_preprocess(args) -> int:
    rc = _resolve(args, {"segment": ("dataset", "segment"),
                         "mode": ("dataset", "mode")})
    out = _require_out(rc)
    raw_root = Path(args.input)
    summary = corpus.preprocess_corpus(raw_root, out, rc.segment,
                                       mode=rc.mode,
                                       crop_fraction=rc.crop_fraction,
                                       force=args.force, jobs=args.jobs,
                                       seed=rc.train.seed)
    _stamp(rc, out, [raw_root / "labels.jsonl"])
    print(f"preprocessed {summary['processed']} utterances "
          f"({summary['skipped']} already present, "
          f"{len(summary['errors'])} failed) into {out}")
    if summary["errors"]:
        for utt, msg in summary["errors"]:
            print(f"  failed {utt}: {msg}", file=sys.stderr)
        print(f"see {out / 'errors.log'}", file=sys.stderr)
        return 1
    return 0


def cmd_pretrain(args) -> int:
    rc = _resolve(args, {"classes": ("models", "num_classes"),
                         "epochs": ("training", "pretrain_epochs"),
                         "batch_size": ("training", "batch_size"),
                         "pairs": ("training", "pairs_per_epoch"),
                         "margin": ("training", "margin")})
    out = _require_out(rc)
    data_root = Path(args.data)
    model_cfg = dataclasses.replace(rc.model, variant="two_stream")
    manifest = dataset.build_manifest(data_root, rc.segment, mode="audio+video")
    manifest = manifest.filter_classes(dataset.class_names(model_cfg.num_classes))
    model = build_model(model_cfg, seed=rc.train.seed)
    result = training.pretrain(model, manifest, rc.train, out_dir=out)
    _stamp(rc, out, [data_root / "labels.jsonl", data_root / "meta.json"])
    means = ", ".join(f"{m:.4f}" for m in result.epoch_mean_losses)
    print(f"pretrained for {rc.train.pretrain_epochs} epochs; "
          f"mean pair loss per epoch: [{means}]")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_train(args) -> int:
    rc = _resolve(args, {"variant": ("models", "variant"),
                         "classes": ("models", "num_classes"),
                         "epochs": ("training", "epochs"),
                         "batch_size": ("training", "batch_size"),
                         "lr": ("training", "learning_rate"),
                         "per_class": ("dataset", "per_class_total"),
                         "augment": ("dataset", "augment")})
    out = _require_out(rc)
    data_root = Path(args.data)
    mode = "audio+video" if rc.model.variant == "two_stream" else rc.mode
    balanced = _prepare_manifest(rc, data_root, mode)
    model = build_model(rc.model, seed=rc.train.seed)
    result = training.train_supervised(model, balanced, rc.train, out_dir=out,
                                       init=args.init, resume=args.resume)
    inputs = [data_root / "labels.jsonl", data_root / "meta.json"]
    if args.init:
        inputs.append(Path(args.init))
    if args.resume:
        inputs.append(Path(args.resume))
    _stamp(rc, out, inputs)
    best = result.best_val_accuracy
    print(f"trained {rc.model.variant} for {result.final_iteration} iterations; "
          f"best val accuracy "
          f"{'n/a' if best is None else format(best, '.4f')}")
    print(f"checkpoints: {result.best_path} (best), {result.last_path} (last)")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = Path(args.ckpt)
    model, meta = restore_model(ckpt_path)
    ckpt_classes = model.cfg.num_classes
    if args.classes is not None and args.classes != ckpt_classes:
        raise ConfigError(f"checkpoint {ckpt_path} was trained with "
                          f"{ckpt_classes} classes, not {args.classes}")
    rc = config_mod.load_run_config(
        path=args.config,
        overrides={**_overrides(args, {"per_class": ("dataset",
                                                     "per_class_total")}),
                   ("models", "num_classes"): ckpt_classes,
                   ("models", "variant"): model.cfg.variant})
    out = Path(rc.out_dir) if rc.out_dir else ckpt_path.parent / "eval"
    rc = dataclasses.replace(rc, out_dir=str(out))
    data_root = Path(args.data)
    mode = "audio+video" if model.cfg.variant == "two_stream" else rc.mode
    balanced = _prepare_manifest(rc, data_root, mode)
    res = evaluation.evaluate(model, balanced, class_mode=ckpt_classes)
    out.mkdir(parents=True, exist_ok=True)
    import json
    with open(out / "metrics.json", "w") as f:
        json.dump({"overall_accuracy": res.overall_accuracy,
                   "per_class_accuracy": res.per_class_accuracy,
                   "checkpoint_iteration": meta.get("iteration")},
                  f, sort_keys=True, indent=2)
    res.confusion.to_csv(out / "confusion.csv")
    _stamp(rc, out, [ckpt_path, data_root / "labels.jsonl"])
    print(f"overall accuracy {res.overall_accuracy:.4f} over "
          f"{res.confusion.total} examples; per class: "
          + ", ".join(f"{k}={v:.4f}" for k, v in res.per_class_accuracy.items()))
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    history_path = run_dir / "history.jsonl"
    if not history_path.exists():
        raise ConfigError(f"no history.jsonl under {run_dir}")
    ckpt_path = run_dir / "best.ckpt"
    if not ckpt_path.exists():
        ckpt_path = run_dir / "last.ckpt"
    if not ckpt_path.exists():
        raise ConfigError(f"no checkpoint under {run_dir}")
    run_config_path = run_dir / "run_config.ini"
    rc = config_mod.load_run_config(
        path=run_config_path if run_config_path.exists() else args.config,
        overrides=_overrides(args, {}))
    model, _ = restore_model(ckpt_path)
    history = TrainingHistory.load(history_path)
    out = Path(args.out) if args.out else run_dir / "report"
    rc = dataclasses.replace(rc, out_dir=str(out))
    data_root = Path(args.data)
    mode = "audio+video" if model.cfg.variant == "two_stream" else rc.mode
    balanced = _prepare_manifest(rc, data_root, mode)
    res = evaluation.evaluate(model, balanced,
                              class_mode=model.cfg.num_classes)
    written = evaluation.report(history, res.confusion, out,
                                architecture=model.cfg.variant,
                                augmented=rc.augment,
                                class_mode=model.cfg.num_classes, result=res)
    _stamp(rc, out, [ckpt_path, history_path])
    print(f"report for {model.cfg.variant}: accuracy "
          f"{res.overall_accuracy:.4f}")
    for name, path in sorted(written.items()):
        print(f"  {name}: {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emofuse",
        description="Train and evaluate audio/video emotion classifiers on "
                    "spectrograms and face clips.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset fixture")
    _add_common(p)
    p.add_argument("--n", type=int, default=10, help="utterances per class")
    p.add_argument("--classes", type=int, choices=(3, 4))
    p.add_argument("--raw", action="store_true",
                   help="write undecoded wav/avi files instead of artifacts")
    p.add_argument("--no-video", action="store_true", help="audio only")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="turn raw recordings into artifacts")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True,
                   help="raw corpus directory")
    p.add_argument("--segment", help="segmentation recipe, e.g. DS2")
    p.add_argument("--mode", choices=("audio", "audio+video"))
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="contrastive audio-video pretraining")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--classes", type=int, choices=(3, 4))
    p.add_argument("--epochs", type=int, help="pretraining epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--pairs", type=int, help="pairs sampled per epoch")
    p.add_argument("--margin", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised training")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--variant",
                   choices=("cnn", "cnn_rnn", "cnn_lstm", "two_stream"))
    p.add_argument("--classes", type=int, choices=(3, 4))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--per-class", dest="per_class", type=int,
                   help="balanced examples per class")
    p.add_argument("--augment", action="store_true",
                   help="triple the train split with crops and rotations")
    p.add_argument("--init", help="pretrained checkpoint to start from")
    p.add_argument("--resume", help="checkpoint to continue training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--classes", type=int, choices=(3, 4))
    p.add_argument("--per-class", dest="per_class", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="plots and summary for a training run")
    _add_common(p)
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--data", required=True, help="dataset root")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EmofuseError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
