"""Accuracy metrics, confusion matrices, and static run reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import BatchLoader, Manifest, class_names
from .errors import ConfigError
from .models import TwoStreamNet, restore_model
from .training import TrainingHistory, _forward_logits

log = logging.getLogger(__name__)

ARCH_LABELS = {"cnn": "CNN", "cnn_rnn": "CNN+RNN", "cnn_lstm": "CNN+LSTM",
               "two_stream": "Two-stream"}


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K count table; rows are true classes, columns predictions."""

    counts: np.ndarray
    names: tuple

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] != len(self.names):
            raise ValueError(f"counts must be K x K for {len(self.names)} names, "
                             f"got {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def per_class_accuracy(self) -> dict:
        row_sums = self.counts.sum(axis=1)
        out = {}
        for i, name in enumerate(self.names):
            out[name] = float(self.counts[i, i] / row_sums[i]) if row_sums[i] \
                else 0.0
        return out

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("true\\pred," + ",".join(self.names) + "\n")
            for i, name in enumerate(self.names):
                f.write(name + "," + ",".join(str(int(v))
                                              for v in self.counts[i]) + "\n")


def confusion_from_predictions(y_true, y_pred, names) -> ConfusionMatrix:
    """Tally integer predictions against integer labels."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    k = len(names)
    if y_true.size and (y_true.min() < 0 or y_true.max() >= k
                        or y_pred.min() < 0 or y_pred.max() >= k):
        raise ValueError(f"class indices outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts=counts, names=tuple(names))


@dataclass
class EvalResult:
    overall_accuracy: float
    per_class_accuracy: dict
    confusion: ConfusionMatrix


def evaluate(model, manifest: Manifest, class_mode: int | None = None,
             batch_size: int = 64, split: str = "val") -> EvalResult:
    """Argmax predictions over a split; ties go to the lowest class index."""
    class_mode = class_mode or model.cfg.num_classes
    names = class_names(class_mode)
    if model.cfg.num_classes != class_mode:
        raise ConfigError(f"checkpoint has {model.cfg.num_classes} classes but "
                          f"evaluation requested {class_mode}")
    extra = set(manifest.classes()) - set(names)
    if extra:
        raise ConfigError(f"manifest contains classes {sorted(extra)} outside "
                          f"the {class_mode}-class set {names}")
    examples = [e for e in manifest.examples if e.split == split] \
        if split else list(manifest.examples)
    if not examples:
        examples = list(manifest.examples)
    if not examples:
        raise ConfigError("nothing to evaluate: manifest is empty")
    if isinstance(model, TwoStreamNet) and any(e.clip_ref is None
                                               for e in examples):
        raise ConfigError("two-stream evaluation needs video clips for every "
                          "example")
    loader = BatchLoader(manifest, num_classes=class_mode)
    model.eval()
    y_true = []
    y_pred = []
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            arrays = loader.batch_arrays(examples[i:i + batch_size])
            logits = _forward_logits(model, arrays).numpy()
            y_pred.extend(np.argmax(logits, axis=1).tolist())
            y_true.extend(arrays["labels"].tolist())
    cm = confusion_from_predictions(y_true, y_pred, names)
    return EvalResult(overall_accuracy=cm.accuracy(),
                      per_class_accuracy=cm.per_class_accuracy(),
                      confusion=cm)


def evaluate_checkpoint(ckpt_path, manifest: Manifest,
                        class_mode: int | None = None,
                        batch_size: int = 64) -> EvalResult:
    model, _ = restore_model(ckpt_path)
    return evaluate(model, manifest, class_mode=class_mode,
                    batch_size=batch_size)


def _plot_series(xs, ys, xlabel, ylabel, title, path) -> bool:
    if not xs:
        log.warning("no %s data; skipping plot %s", ylabel, path)
        return False
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(xs, ys, linewidth=1.0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return True


def report(history: TrainingHistory, cm: ConfusionMatrix, out_dir,
           architecture: str = "cnn", augmented: bool = False,
           class_mode: int | None = None,
           result: EvalResult | None = None) -> dict:
    """Write metrics.json, confusion.csv, history plots, and a summary row.

    Returns {name: path} for everything written. Accuracy appears both as
    the best validation value seen in history and the final one, since a
    run's headline number could reasonably be either.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_mode = class_mode or len(cm.names)
    overall = result.overall_accuracy if result else cm.accuracy()
    per_class = result.per_class_accuracy if result else cm.per_class_accuracy()
    written = {}

    metrics = {"overall_accuracy": overall,
               "per_class_accuracy": per_class,
               "mean_per_class_accuracy": float(np.mean(list(per_class.values()))),
               "best_val_accuracy": history.best_val_accuracy(),
               "final_val_accuracy": history.final_val_accuracy(),
               "iterations": history.records[-1]["iteration"]
               if history.records else 0}
    metrics_path = out_dir / "metrics.json"
    with open(metrics_path, "w") as f:
        json.dump(metrics, f, sort_keys=True, indent=2)
    written["metrics"] = metrics_path

    cm_path = out_dir / "confusion.csv"
    cm.to_csv(cm_path)
    written["confusion"] = cm_path

    iters = [r["iteration"] for r in history.records]
    if _plot_series(iters, history.losses(), "iteration", "training loss",
                    "Loss per iteration", out_dir / "history_loss.png"):
        written["loss_plot"] = out_dir / "history_loss.png"
    val = history.val_points()
    if _plot_series([i for i, _ in val], [a for _, a in val], "iteration",
                    "validation accuracy", "Validation accuracy",
                    out_dir / "history_acc.png"):
        written["acc_plot"] = out_dir / "history_acc.png"

    summary_path = out_dir / "summary_table.csv"
    arch = ARCH_LABELS.get(architecture, architecture)
    with open(summary_path, "w") as f:
        f.write("Architecture,Accuracy,Data Aug.,Emotion\n")
        f.write(f"{arch},{100.0 * overall:.2f},"
                f"{'Yes' if augmented else 'No'},{class_mode}-class\n")
    written["summary"] = summary_path
    return written
