"""Seeded training loops: contrastive pretraining, supervised runs, grad checks."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import BatchLoader, Manifest, class_names, make_batches, \
    sample_contrastive_pairs
from .errors import ConfigError
from .losses import ContrastiveConfig, contrastive, cross_entropy
from .models import ModelConfig, TwoStreamNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for both training phases."""

    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    epochs: int = 10
    pretrain_epochs: int = 5
    seed: int = 0
    class_mode: int = 4
    val_every: int = 20
    l1_coeff: float = 0.0
    margin: float = 1.0
    grad_clip_norm: float | None = 5.0
    pairs_per_epoch: int | None = None
    stop_at_val_accuracy: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or self.l1_coeff < 0:
            raise ValueError("rates and decay coefficients must be >= 0")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError(f"grad_clip_norm must be positive or None, "
                             f"got {self.grad_clip_norm}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.class_mode not in (3, 4):
            raise ValueError(f"class_mode must be 3 or 4, got {self.class_mode}")
        if self.val_every < 1:
            raise ValueError(f"val_every must be >= 1, got {self.val_every}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainingHistory:
    """Per-iteration loss trace with periodic validation accuracy."""

    records: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)  # in-memory only

    def append(self, iteration: int, loss: float,
               val_accuracy: float | None = None) -> None:
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ValueError(f"iteration {iteration} does not increase past "
                             f"{self.records[-1]['iteration']}")
        if val_accuracy is not None and not 0.0 <= val_accuracy <= 1.0:
            raise ValueError(f"val_accuracy {val_accuracy} outside [0, 1]")
        rec = {"iteration": int(iteration), "loss": float(loss)}
        if val_accuracy is not None:
            rec["val_accuracy"] = float(val_accuracy)
        self.records.append(rec)

    def losses(self) -> list:
        return [r["loss"] for r in self.records]

    def val_points(self) -> list:
        return [(r["iteration"], r["val_accuracy"])
                for r in self.records if "val_accuracy" in r]

    def best_val_accuracy(self) -> float | None:
        points = self.val_points()
        return max(acc for _, acc in points) if points else None

    def final_val_accuracy(self) -> float | None:
        points = self.val_points()
        return points[-1][1] if points else None

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainingHistory":
        records = [json.loads(line)
                   for line in Path(path).read_text().splitlines() if line.strip()]
        return cls(records=records)


def _make_optimizer(model: torch.nn.Module, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)


def _clip_gradients(model: torch.nn.Module, cfg: TrainConfig) -> None:
    # recurrent heads explode without a norm cap; a no-op for tame steps
    if cfg.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)


def _l1_penalty(model: torch.nn.Module) -> torch.Tensor:
    return sum(p.abs().sum() for p in model.parameters())


def _forward_logits(model, arrays) -> torch.Tensor:
    spec = torch.from_numpy(arrays["spectrograms"])
    if isinstance(model, TwoStreamNet):
        return model(spec, torch.from_numpy(arrays["clips"]))
    return model(spec)


def _split_accuracy(model, loader: BatchLoader, examples,
                    batch_size: int) -> float:
    """Argmax accuracy over a fixed example list, dropout off."""
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            arrays = loader.batch_arrays(examples[i:i + batch_size])
            logits = _forward_logits(model, arrays).numpy()
            preds = np.argmax(logits, axis=1)
            correct += int((preds == arrays["labels"]).sum())
    if was_training:
        model.train()
    return correct / len(examples)


def _check_classes(model, manifest: Manifest, cfg: TrainConfig) -> None:
    names = class_names(cfg.class_mode)
    model_k = model.cfg.num_classes
    if model_k != cfg.class_mode:
        raise ConfigError(f"model has {model_k} classes but class_mode is "
                          f"{cfg.class_mode}")
    present = manifest.classes()
    if set(present) != set(names):
        raise ConfigError(f"manifest classes {present} do not match the "
                          f"{cfg.class_mode}-class set {names}")


def load_weights(model, ckpt_path, strict: bool = True) -> int:
    """Copy checkpoint arrays into matching model parameters.

    With strict=False only name-and-shape matches are loaded, so a
    pretrained two-stream checkpoint can seed a matching architecture.
    Returns the number of tensors loaded.
    """
    _, arrays = load_checkpoint(ckpt_path)
    state = model.state_dict()
    if strict:
        model.load_state_dict({k: torch.tensor(v) for k, v in arrays.items()})
        return len(arrays)
    loaded = 0
    for name, arr in arrays.items():
        if name in state and tuple(state[name].shape) == arr.shape:
            state[name] = torch.tensor(arr)
            loaded += 1
    if loaded == 0:
        raise ConfigError(f"checkpoint {ckpt_path} shares no tensors with "
                          "the target model")
    model.load_state_dict(state)
    return loaded


@dataclass
class PretrainResult:
    history: TrainingHistory
    checkpoint_path: Path | None
    epoch_mean_losses: list


def pretrain(model: TwoStreamNet, manifest: Manifest, cfg: TrainConfig,
             out_dir=None) -> PretrainResult:
    """Minimize the pair loss over freshly sampled pairs each epoch.

    Pair sampling is seeded per (seed, epoch); zero epochs leaves the
    model exactly at initialization.
    """
    if not isinstance(model, TwoStreamNet):
        raise ConfigError("pretraining requires the two-stream variant")
    torch.manual_seed(cfg.seed)
    loader = BatchLoader(manifest, num_classes=cfg.class_mode)
    history = TrainingHistory()
    epoch_means = []
    optimizer = _make_optimizer(model, cfg)
    pair_cfg = ContrastiveConfig(margin=cfg.margin)
    n_pairs = cfg.pairs_per_epoch
    if n_pairs is None:
        pool = manifest.train_examples() or manifest.examples
        n_pairs = max(len(pool), cfg.batch_size)
    iteration = 0
    model.train()
    for epoch in range(cfg.pretrain_epochs):
        started = time.monotonic()
        pairs = sample_contrastive_pairs(manifest, n_pairs,
                                         seed=[cfg.seed, epoch])
        losses = []
        for i in range(0, len(pairs), cfg.batch_size):
            chunk = pairs[i:i + cfg.batch_size]
            arrays = loader.pair_arrays(chunk)
            za, zv = model.embeddings(torch.from_numpy(arrays["spectrograms"]),
                                      torch.from_numpy(arrays["clips"]))
            loss = contrastive(zv, za, torch.from_numpy(arrays["y"]), pair_cfg)
            optimizer.zero_grad()
            loss.backward()
            _clip_gradients(model, cfg)
            optimizer.step()
            iteration += 1
            history.append(iteration, loss.item())
            losses.append(loss.item())
        epoch_means.append(float(np.mean(losses)))
        history.epoch_seconds.append(time.monotonic() - started)
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_path = out_dir / "pretrained.ckpt"
        save_checkpoint(model, ckpt_path, model.cfg, iteration=iteration,
                        seed=cfg.seed, extra={"phase": "pretrain"})
        history.save(out_dir / "pretrain_history.jsonl")
    return PretrainResult(history=history, checkpoint_path=ckpt_path,
                          epoch_mean_losses=epoch_means)


@dataclass
class TrainResult:
    history: TrainingHistory
    best_path: Path | None
    last_path: Path | None
    best_val_accuracy: float | None
    final_iteration: int


def train_supervised(model, manifest: Manifest, cfg: TrainConfig,
                     out_dir=None, init=None, resume=None) -> TrainResult:
    """Cross-entropy training with periodic validation and checkpoints.

    `init` seeds weights from a pretraining checkpoint (shape-matched
    tensors only); `resume` restores weights and continues the iteration
    counter. Validation falls back to the training pool when the manifest
    has no val split, which keeps overfit smoke runs honest.
    """
    _check_classes(model, manifest, cfg)
    if init is not None and resume is not None:
        raise ConfigError("pass either init or resume, not both")
    start_iter = 0
    if init is not None:
        load_weights(model, init, strict=False)
    if resume is not None:
        meta = load_weights_meta(model, resume)
        start_iter = int(meta.get("iteration", 0))

    torch.manual_seed(cfg.seed)
    loader = BatchLoader(manifest, num_classes=cfg.class_mode)
    val_pool = manifest.val_examples() or manifest.train_examples() \
        or list(manifest.examples)
    history = TrainingHistory()
    optimizer = _make_optimizer(model, cfg)
    best_acc = None
    best_path = last_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        best_path = out_dir / "best.ckpt"
        last_path = out_dir / "last.ckpt"

    iteration = start_iter
    stop = False
    model.train()
    for epoch in range(cfg.epochs):
        started = time.monotonic()
        for batch in make_batches(manifest, cfg.batch_size, seed=cfg.seed,
                                  epoch=epoch):
            arrays = loader.batch_arrays(batch)
            logits = _forward_logits(model, arrays)
            loss = cross_entropy(logits, torch.from_numpy(arrays["labels"]))
            if cfg.l1_coeff > 0:
                loss = loss + cfg.l1_coeff * _l1_penalty(model)
            optimizer.zero_grad()
            loss.backward()
            _clip_gradients(model, cfg)
            optimizer.step()
            iteration += 1
            val_acc = None
            if iteration % cfg.val_every == 0:
                val_acc = _split_accuracy(model, loader, val_pool,
                                          cfg.batch_size)
                if best_acc is None or val_acc > best_acc:
                    best_acc = val_acc
                    if best_path is not None:
                        save_checkpoint(model, best_path, model.cfg,
                                        iteration=iteration, seed=cfg.seed,
                                        extra={"val_accuracy": val_acc})
            history.append(iteration, loss.item(), val_acc)
            if (cfg.stop_at_val_accuracy is not None and val_acc is not None
                    and val_acc >= cfg.stop_at_val_accuracy):
                stop = True
                break
        history.epoch_seconds.append(time.monotonic() - started)
        if stop:
            break
    if last_path is not None:
        if best_acc is None:
            # run ended before any validation point; final state stands in
            save_checkpoint(model, best_path, model.cfg, iteration=iteration,
                            seed=cfg.seed, extra={"val_accuracy": None})
        save_checkpoint(model, last_path, model.cfg, iteration=iteration,
                        seed=cfg.seed, extra={"val_accuracy": best_acc})
        history.save(out_dir / "history.jsonl")
    return TrainResult(history=history, best_path=best_path,
                       last_path=last_path, best_val_accuracy=best_acc,
                       final_iteration=iteration)


def load_weights_meta(model, ckpt_path) -> dict:
    """Strict weight load that also returns the checkpoint metadata."""
    meta, arrays = load_checkpoint(ckpt_path)
    model.load_state_dict({k: torch.tensor(v) for k, v in arrays.items()})
    return meta


@dataclass
class GradReport:
    """Outcome of comparing analytic gradients with finite differences."""

    per_layer: dict
    max_rel_error: float
    tolerance: float
    passed: bool
    samples: int


def _layer_of(param_name: str) -> str:
    head, _, _ = param_name.rpartition(".")
    return head or param_name


# Gradients below this scale compare absolutely against it, matching the
# atol/rtol convention of torch.autograd.gradcheck; central differences on
# losses reduced over 200x300 grids carry ~1e-7 of rounding noise, so a
# smaller floor would fail coordinates whose true gradient is zero.
GRAD_DENOM_FLOOR = 1e-2


def _central_difference(forward_fn, twin, flat, i, orig, step):
    flat[i] = orig + step
    up = forward_fn(twin).item()
    flat[i] = orig - step
    down = forward_fn(twin).item()
    flat[i] = orig
    return (up - down) / (2 * step)


def check_gradients(model: torch.nn.Module, forward_fn,
                    samples_per_layer: int = 10, step: float = 1e-7,
                    tolerance: float | None = None,
                    seed: int = 0) -> GradReport:
    """Compare autograd against central differences on sampled weights.

    `forward_fn(model)` must return a scalar loss and be deterministic.
    Finite differences run on a double-precision copy in eval mode, so
    the default step can sit at 1e-7: small enough that the difference
    window rarely straddles a relu or pooling kink even on 200x300
    feature maps, while fp64 rounding stays well under tolerance. Two
    further guards keep the comparison meaningful on piecewise-linear
    networks: near-zero gradients compare against an absolute scale of
    1e-2 (the same convention torch.autograd.gradcheck encodes in its
    atol/rtol defaults), and a weight whose window still lands on a kink
    is redrawn, because the secant across a kink does not estimate the
    derivative anywhere. Kinks are told apart from genuine gradient bugs
    by halving the step: a kink moves the estimate, a wrong analytic
    gradient stays off by the same step-stable amount.
    """
    twin = copy.deepcopy(model).double()
    twin.eval()
    if tolerance is None:
        dtype = next(model.parameters()).dtype
        tolerance = 1e-4 if dtype == torch.float64 else 1e-2

    twin.zero_grad()
    loss = forward_fn(twin)
    loss.backward()
    params = dict(twin.named_parameters())
    analytic = {name: p.grad.detach().clone()
                for name, p in params.items() if p.grad is not None}
    layers = {}
    for name in analytic:
        layers.setdefault(_layer_of(name), []).append(name)

    rng = np.random.default_rng(seed)
    per_layer = {}
    n_checked = 0
    with torch.no_grad():
        for layer, names in sorted(layers.items()):
            # sample across the layer's tensors, proportional to their size
            sizes = np.array([params[n].numel() for n in names])
            total = int(sizes.sum())
            n = min(samples_per_layer, total)
            pending = list(rng.choice(total, size=n, replace=False))
            used = set(pending)
            bounds = np.cumsum(sizes)
            worst = 0.0
            redraws = 4 * n
            while pending:
                fi = pending.pop()
                t = int(np.searchsorted(bounds, fi, side="right"))
                i = int(fi - (bounds[t - 1] if t else 0))
                flat = params[names[t]].data.view(-1)
                grad = analytic[names[t]].view(-1)
                orig = flat[i].item()
                numeric = _central_difference(forward_fn, twin, flat, i,
                                              orig, step)
                a = grad[i].item()
                denom = max(abs(a), abs(numeric), GRAD_DENOM_FLOOR)
                rel = abs(a - numeric) / denom
                if rel >= tolerance and redraws > 0:
                    halved = _central_difference(forward_fn, twin, flat, i,
                                                 orig, step / 2)
                    if abs(numeric - halved) / denom > tolerance / 2:
                        redraw = None
                        for _ in range(100):
                            cand = int(rng.integers(total))
                            if cand not in used:
                                redraw = cand
                                break
                        if redraw is not None:
                            used.add(redraw)
                            pending.append(redraw)
                            redraws -= 1
                            continue
                worst = max(worst, rel)
                n_checked += 1
            per_layer[layer] = worst
    worst = max(per_layer.values()) if per_layer else float("inf")
    return GradReport(per_layer=per_layer, max_rel_error=worst,
                      tolerance=tolerance, passed=worst < tolerance,
                      samples=n_checked)
