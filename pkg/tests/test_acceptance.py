"""Acceptance gate: every shipped guarantee checked at desk scale.

Each test prints exactly one [PASS]/[FAIL] line with its wall-clock time;
run `pytest tests/test_acceptance.py -v -s` to see the lines inline. The
integration runs (overfitting a tiny fixture, class separation with
contrastive pretraining) assert their accuracy targets together with an
explicit single-core CPU budget.
"""

import contextlib
import time
from collections import Counter

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from emofuse.corpus import generate_raw_fixture, generate_synthetic_fixture
from emofuse.dataset import (BatchLoader, augment, balance_and_split,
                             build_manifest, class_names, read_labels,
                             sample_contrastive_pairs)
from emofuse.evaluation import evaluate
from emofuse.losses import ContrastiveConfig, contrastive, cross_entropy
from emofuse.models import ModelConfig, VideoNet, build_model
from emofuse.signal import (SegmentSpec, Waveform, clip_segments,
                            crop_frequency_top, load_waveform,
                            render_spectrogram)
from emofuse.training import (TrainConfig, check_gradients, pretrain,
                              train_supervised)
from emofuse.vision import CropRegion, build_clip

from helpers import synthetic_manifest

SEG = SegmentSpec(noise_cleanup=False, clip_3s=True)

# Narrow but structurally complete widths for finite-difference checks:
# every layer type stays present while forward passes stay cheap enough
# to difference hundreds of times.
GRAD_WIDTHS = dict(conv_channels=(2, 4, 4), rnn_hidden=8, embed_dim=4)


class Criterion:
    """Collects sub-checks behind one printed [PASS]/[FAIL] line."""

    def __init__(self):
        self.failures = []
        self.notes = []

    def expect(self, ok, failure):
        if not ok:
            self.failures.append(failure)

    def note(self, text):
        self.notes.append(text)


@contextlib.contextmanager
def criterion(name, budget_s=None):
    crit = Criterion()
    started = time.perf_counter()
    try:
        yield crit
    except BaseException as exc:
        print(f"\n[FAIL] {name} ({time.perf_counter() - started:.1f}s): {exc!r}")
        raise
    elapsed = time.perf_counter() - started
    if budget_s is not None:
        crit.expect(elapsed < budget_s,
                    f"runtime {elapsed:.1f}s exceeds the {budget_s:.0f}s budget")
    if crit.failures:
        print(f"\n[FAIL] {name} ({elapsed:.1f}s): " + "; ".join(crit.failures))
    else:
        detail = "; ".join(crit.notes)
        print(f"\n[PASS] {name} ({elapsed:.1f}s)"
              + (f": {detail}" if detail else ""))
    assert not crit.failures, f"{name}: " + "; ".join(crit.failures)


@pytest.fixture(scope="session")
def raw_media(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc-raw") / "media"
    return generate_raw_fixture(root, n_per_class=1, num_classes=3, seed=2)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """64 audio-only examples with no train/val split."""
    root = tmp_path_factory.mktemp("acc-tiny") / "fix64"
    generate_synthetic_fixture(root, n_per_class=16, num_classes=4, seed=5,
                               with_video=False)
    return build_manifest(root, SEG, mode="audio")


@pytest.fixture(scope="session")
def separation_root(tmp_path_factory):
    """50 utterances per class with both spectrograms and clips."""
    root = tmp_path_factory.mktemp("acc-sep") / "fix200"
    return generate_synthetic_fixture(root, n_per_class=50, num_classes=4,
                                      seed=7)


def _ce_oracle(logits, labels):
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def _pair_oracle(za, zb, y, margin):
    d = np.linalg.norm(za - zb, axis=1)
    attract = y * d ** 2
    repel = (1 - y) * np.maximum(margin - d, 0.0) ** 2
    return float((attract + repel).mean())


def test_loss_values_match_independent_oracles():
    rng = np.random.default_rng(202)
    with criterion("loss oracles", budget_s=1.0) as crit:
        uniform = cross_entropy(torch.zeros(1, 4, dtype=torch.float64),
                                torch.tensor([2]))
        crit.expect(abs(uniform.item() - np.log(4.0)) < 1e-6,
                    f"uniform 4-class loss {uniform.item():.8f} != ln 4")

        worst_ce = 0.0
        for _ in range(100):
            b = int(rng.integers(1, 9))
            k = int(rng.integers(2, 6))
            logits = rng.normal(scale=rng.uniform(0.1, 10.0), size=(b, k))
            labels = rng.integers(0, k, size=b)
            got = cross_entropy(torch.from_numpy(logits),
                                torch.from_numpy(labels)).item()
            worst_ce = max(worst_ce, abs(got - _ce_oracle(logits, labels)))
        crit.expect(worst_ce < 1e-6, f"cross-entropy off by {worst_ce:.2e}")

        same = torch.from_numpy(rng.normal(size=(3, 5)))
        zero_pos = contrastive(same, same.clone(), torch.ones(3)).item()
        crit.expect(abs(zero_pos) < 1e-6,
                    f"matched identical pair pays {zero_pos}")
        near = torch.zeros(1, 4, dtype=torch.float64)
        far = near + torch.tensor([3.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        zero_neg = contrastive(near, far, torch.zeros(1),
                               ContrastiveConfig(margin=2.0)).item()
        crit.expect(abs(zero_neg) < 1e-6,
                    f"mismatch beyond the margin pays {zero_neg}")

        worst_pair = 0.0
        for _ in range(100):
            b = int(rng.integers(1, 9))
            dim = int(rng.integers(1, 6))
            margin = float(rng.uniform(0.5, 3.0))
            za = rng.normal(size=(b, dim))
            zb = rng.normal(size=(b, dim))
            y = rng.integers(0, 2, size=b).astype(np.float64)
            got = contrastive(torch.from_numpy(za), torch.from_numpy(zb),
                              torch.from_numpy(y),
                              ContrastiveConfig(margin=margin)).item()
            worst_pair = max(worst_pair,
                             abs(got - _pair_oracle(za, zb, y, margin)))
        crit.expect(worst_pair < 1e-6, f"pair loss off by {worst_pair:.2e}")
        crit.note(f"max deviation {max(worst_ce, worst_pair):.1e} "
                  "over 200 random cases")


def test_model_and_artifact_shapes(raw_media):
    rng = np.random.default_rng(11)
    with criterion("shape suite", budget_s=30.0) as crit:
        for seconds in (1.0, 2.7, 4.6):
            wave = Waveform(rng.normal(scale=0.1, size=int(44100 * seconds)))
            spec = render_spectrogram(wave)
            crit.expect(spec.pixels.shape == (200, 300, 3),
                        f"{seconds}s render gave {spec.pixels.shape}")
            cropped = crop_frequency_top(spec, 0.6)
            crit.expect(cropped.pixels.shape == (200, 300, 3),
                        f"{seconds}s crop gave {cropped.pixels.shape}")

        for utt, rec in sorted(read_labels(raw_media).items())[:2]:
            wave = load_waveform(raw_media / f"{utt}.wav")
            spec = render_spectrogram(clip_segments(wave, 3.0, seed=0)[0])
            crit.expect(spec.pixels.shape == (200, 300, 3),
                        f"{utt} render gave {spec.pixels.shape}")
            region = CropRegion(side=rec["actor_side"],
                                head_box=tuple(rec["head_box"]))
            for start in (0.0, 0.5):
                clip = build_clip(raw_media / f"{utt}.avi", start, region)
                crit.expect(clip.frames.shape == (20, 100, 60, 3),
                            f"{utt} clip at {start}s gave {clip.frames.shape}")

        with torch.no_grad():
            for variant in ("cnn", "cnn_rnn", "cnn_lstm", "two_stream"):
                for k in (3, 4):
                    model = build_model(ModelConfig(variant=variant,
                                                    num_classes=k),
                                        seed=0).eval()
                    spec_in = torch.randn(2, 3, 200, 300)
                    if variant == "two_stream":
                        out = model(spec_in, torch.randn(2, 3, 20, 100, 60))
                    else:
                        out = model(spec_in)
                    crit.expect(tuple(out.shape) == (2, k),
                                f"{variant} K={k} gave {tuple(out.shape)}")
            audio = build_model(ModelConfig(variant="cnn"), seed=0).eval()
            for b in (1, 5):
                out = audio(torch.randn(b, 3, 200, 300))
                crit.expect(tuple(out.shape) == (b, 4),
                            f"cnn B={b} gave {tuple(out.shape)}")
            torch.manual_seed(0)
            video = VideoNet(ModelConfig()).eval()
            emb = video(torch.randn(2, 3, 20, 100, 60))
            crit.expect(tuple(emb.shape) == (2, 128),
                        f"clip embedder gave {tuple(emb.shape)}")
        crit.note("audio/fusion logits BxK for K in {3,4} and B in {1,2,5}, "
                  "clip embedding Bx128, artifacts 200x300x3 / 20x100x60x3")


def test_balance_and_augment_counts():
    with criterion("data counts") as crit:
        source = synthetic_manifest({"Happy": 786, "Sad": 1752,
                                     "Anger": 1458, "Neutral": 2118})
        balanced = balance_and_split(source, per_class_total=2000,
                                     train_fraction=0.8, seed=0)
        train = balanced.train_examples()
        val = balanced.val_examples()
        for label in balanced.classes():
            n_train = sum(e.label == label for e in train)
            n_val = sum(e.label == label for e in val)
            crit.expect(n_train == 1600, f"{label}: {n_train} train != 1600")
            crit.expect(n_val == 400, f"{label}: {n_val} val != 400")
        crit.expect(len(train) == 6400, f"train total {len(train)} != 6400")

        augmented = augment(balanced, seed=0)
        n_aug = len(augmented.train_examples())
        crit.expect(n_aug == 19200, f"augmented train total {n_aug} != 19200")
        crit.expect(len(augmented.val_examples()) == len(val),
                    "augmentation touched the validation split")

        overlap = ({e.utterance_id for e in augmented.train_examples()}
                   & {e.utterance_id for e in augmented.val_examples()})
        crit.expect(not overlap,
                    f"{len(overlap)} utterances appear on both sides")
        crit.note("1600/400 per class, 6400 -> 19200 train examples, "
                  "splits utterance-disjoint")


def _pair_violates(pair):
    """Re-derive the sampling invariants from the pair fields alone."""
    same_utt = pair.clip_utterance_id == pair.spec_utterance_id
    if pair.pair_type == "positive":
        return not (same_utt and pair.y == 1)
    if pair.pair_type == "hard_negative":
        return not (not same_utt and pair.clip_label != pair.spec_label
                    and pair.y == 0)
    if pair.pair_type == "super_hard_negative":
        return not (not same_utt and pair.clip_label == pair.spec_label
                    and pair.y == 0)
    return True


def test_pair_sampler_ratios_and_invariants(manifest):
    with criterion("pair sampler") as crit:
        pairs = sample_contrastive_pairs(manifest, 10_000, seed=0)
        crit.expect(len(pairs) == 10_000,
                    f"sampler returned {len(pairs)} pairs")
        shares = Counter(p.pair_type for p in pairs)
        for kind in ("positive", "hard_negative", "super_hard_negative"):
            share = shares[kind] / 10_000
            crit.expect(abs(share - 1 / 3) <= 0.02,
                        f"{kind} share {share:.4f} is not 1/3 +- 0.02")
        violations = sum(1 for p in pairs if _pair_violates(p))
        crit.expect(violations == 0, f"{violations} invariant violations")
        counts = [shares[k] for k in ("positive", "hard_negative",
                                      "super_hard_negative")]
        crit.note(f"type counts {counts} of 10000, zero violations")


def test_confusion_matrix_properties(balanced):
    with criterion("evaluation properties") as crit:
        model = build_model(ModelConfig(variant="cnn", **GRAD_WIDTHS), seed=3)
        result = evaluate(model, balanced)
        val = balanced.val_examples()
        expected_rows = [sum(e.label == label for e in val)
                         for label in class_names(4)]
        rows = result.confusion.counts.sum(axis=1).tolist()
        crit.expect(rows == expected_rows,
                    f"row sums {rows} != val composition {expected_rows}")
        mean_acc = float(np.mean(list(result.per_class_accuracy.values())))
        crit.expect(abs(result.overall_accuracy - mean_acc) < 1e-9,
                    f"overall {result.overall_accuracy!r} != per-class mean "
                    f"{mean_acc!r}")

        with torch.no_grad():  # all-equal logits predict the first class
            model.head_logits.weight.zero_()
            model.head_logits.bias.zero_()
        constant = evaluate(model, balanced)
        crit.expect(constant.overall_accuracy == 1 / 4,
                    f"constant predictor scored {constant.overall_accuracy}, "
                    "not exactly 1/4")
        crit.note(f"row sums {rows}, overall == class mean, "
                  "constant predictor exactly 0.25")


def test_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(9)

    def rand(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    spec1 = rand(1, 3, 200, 300)
    spec2 = rand(2, 3, 200, 300)
    clip1 = rand(1, 3, 20, 100, 60)
    label1 = torch.tensor([2])
    # wide enough that mismatched pairs at init scale stay inside the
    # margin, so the repel branch contributes live gradients
    wide = ContrastiveConfig(margin=5.0)
    y_mixed = torch.tensor([1.0, 0.0], dtype=torch.float64)
    y_pos = torch.ones(1, dtype=torch.float64)
    y_neg = torch.zeros(1, dtype=torch.float64)

    with criterion("gradient checks", budget_s=120.0) as crit:
        reports = {}
        for variant in ("cnn", "cnn_rnn", "cnn_lstm"):
            cfg = ModelConfig(variant=variant, **GRAD_WIDTHS)
            model = build_model(cfg, seed=0).double().eval()
            reports[f"{variant}+cross_entropy"] = check_gradients(
                model, lambda m: cross_entropy(m(spec1), label1))
            target = rand(2, cfg.embed_dim)
            pair_loss = lambda m, t=target: contrastive(
                m(spec2, output="embedding"), t, y_mixed, wide)
            crit.expect(pair_loss(model).item() > 0.1,
                        f"{variant} pair loss is not live")
            reports[f"{variant}+contrastive"] = check_gradients(model,
                                                                pair_loss)

        torch.manual_seed(0)
        video = VideoNet(ModelConfig(**GRAD_WIDTHS)).double().eval()
        vtarget = rand(1, video.cfg.embed_dim)
        video_loss = lambda m: contrastive(m(clip1), vtarget, y_pos)
        crit.expect(video_loss(video).item() > 0.1,
                    "clip pair loss is not live")
        reports["3dcnn+contrastive"] = check_gradients(video, video_loss)

        two = build_model(ModelConfig(variant="two_stream",
                                      audio_variant="cnn", **GRAD_WIDTHS),
                          seed=0).double().eval()
        reports["two_stream+cross_entropy"] = check_gradients(
            two, lambda m: cross_entropy(m(spec1, clip1), label1))

        def fused_pair_loss(m):
            za, zv = m.embeddings(spec1, clip1)
            return contrastive(zv, za, y_neg, wide)

        crit.expect(fused_pair_loss(two).item() > 0.1,
                    "fused pair loss is not live")
        reports["two_stream+contrastive"] = check_gradients(two,
                                                            fused_pair_loss)

        worst = 0.0
        for name, rep in sorted(reports.items()):
            crit.expect(rep.tolerance == 1e-4,
                        f"{name}: tolerance {rep.tolerance} is not the "
                        "64-bit 1e-4")
            crit.expect(rep.samples >= 10 * len(rep.per_layer),
                        f"{name}: {rep.samples} samples across "
                        f"{len(rep.per_layer)} layers is under 10 per layer")
            crit.expect(rep.passed,
                        f"{name}: max relative error {rep.max_rel_error:.2e}")
            worst = max(worst, rep.max_rel_error)
        crit.note(f"{len(reports)} model/loss checks, "
                  f"worst relative error {worst:.1e}")


def test_training_is_deterministic(tiny_manifest, tmp_path):
    def run(out_dir):
        model = build_model(ModelConfig(variant="cnn_rnn"), seed=5)
        cfg = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=1,
                          val_every=2, seed=5)
        train_supervised(model, tiny_manifest, cfg, out_dir=out_dir)
        return (out_dir / "history.jsonl").read_bytes()

    with criterion("determinism") as crit:
        first = run(tmp_path / "run1")
        second = run(tmp_path / "run2")
        crit.expect(len(first) > 0, "history file is empty")
        crit.expect(first == second,
                    "histories differ between identically seeded runs")
        crit.note(f"two runs, byte-identical {len(first)}-byte histories")


def test_overfit_small_fixture(tiny_manifest, tmp_path):
    with criterion("overfit sanity", budget_s=600.0) as crit:
        crit.expect(len(tiny_manifest.examples) == 64,
                    f"fixture holds {len(tiny_manifest.examples)} examples")
        model = build_model(ModelConfig(variant="cnn_rnn"), seed=0)
        # the manifest has no val split, so accuracy is measured on the
        # training pool itself; 50 epochs x 4 batches caps at 200 steps
        cfg = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=50,
                          val_every=10, stop_at_val_accuracy=0.95, seed=0)
        result = train_supervised(model, tiny_manifest, cfg, out_dir=tmp_path)
        hits = [(it, acc) for it, acc in result.history.val_points()
                if acc >= 0.95]
        crit.expect(bool(hits),
                    f"best training accuracy {result.best_val_accuracy} "
                    f"< 0.95 after {result.final_iteration} iterations")
        if hits:
            crit.expect(hits[0][0] <= 200,
                        f"95% first reached at iteration {hits[0][0]}")
            crit.note(f"{hits[0][1]:.3f} training accuracy at iteration "
                      f"{hits[0][0]}")


def _embedding_distances(model, manifest, count=300, batch_size=64):
    """Mean matched vs mismatched pair distance under a trained embedder."""
    pairs = sample_contrastive_pairs(manifest, count, seed=123)
    loader = BatchLoader(manifest, num_classes=3)
    model.eval()
    dists = []
    ys = []
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            arrays = loader.pair_arrays(pairs[i:i + batch_size])
            za, zv = model.embeddings(
                torch.from_numpy(arrays["spectrograms"]),
                torch.from_numpy(arrays["clips"]))
            dists.append(torch.linalg.vector_norm(zv - za, dim=1).numpy())
            ys.append(arrays["y"])
    d = np.concatenate(dists)
    y = np.concatenate(ys)
    return float(d[y == 1].mean()), float(d[y == 0].mean())


def test_class_separation_end_to_end(separation_root, tmp_path):
    with criterion("synthetic separability", budget_s=1800.0) as crit:
        # batch 16 on 800 train examples gives 50 steps/epoch, 250 in the
        # five-epoch budget; batch 64 would allow only 65
        trainer = dict(learning_rate=1e-3, batch_size=16, epochs=5, seed=0)

        audio4 = balance_and_split(
            build_manifest(separation_root, SEG, mode="audio"),
            per_class_total=240, train_fraction=200 / 240, seed=0)
        for label in audio4.classes():
            n_train = sum(e.label == label for e in audio4.train_examples())
            n_val = sum(e.label == label for e in audio4.val_examples())
            crit.expect((n_train, n_val) == (200, 40),
                        f"{label}: {n_train}/{n_val} instead of 200/40")

        model4 = build_model(ModelConfig(variant="cnn_rnn"), seed=0)
        res4 = train_supervised(model4, audio4,
                                TrainConfig(val_every=10, **trainer),
                                out_dir=tmp_path / "audio4")
        crit.expect(res4.best_val_accuracy >= 0.80,
                    f"4-class val accuracy {res4.best_val_accuracy:.3f} "
                    "< 0.80 within 5 epochs")

        names3 = class_names(3)
        audio3 = balance_and_split(
            build_manifest(separation_root, SEG,
                           mode="audio").filter_classes(names3),
            per_class_total=240, train_fraction=200 / 240, seed=0)
        fused3 = balance_and_split(
            build_manifest(separation_root, SEG,
                           mode="audio+video").filter_classes(names3),
            per_class_total=240, train_fraction=200 / 240, seed=0)

        model3 = build_model(ModelConfig(variant="cnn_rnn", num_classes=3),
                             seed=0)
        res3 = train_supervised(model3, audio3,
                                TrainConfig(val_every=10, class_mode=3,
                                            **trainer),
                                out_dir=tmp_path / "audio3")

        two = build_model(ModelConfig(variant="two_stream", num_classes=3),
                          seed=0)
        pre = pretrain(two, fused3,
                       TrainConfig(learning_rate=1e-3, batch_size=64,
                                   pretrain_epochs=5, pairs_per_epoch=256,
                                   class_mode=3, seed=0),
                       out_dir=tmp_path / "pretrain")
        first, last = pre.epoch_mean_losses[0], pre.epoch_mean_losses[-1]
        crit.expect(last < first,
                    f"pretraining epoch-mean loss went {first:.4f} -> "
                    f"{last:.4f}")

        pos_mean, neg_mean = _embedding_distances(two, fused3)
        crit.expect(pos_mean < neg_mean,
                    f"matched pairs at {pos_mean:.3f} are not closer than "
                    f"mismatched at {neg_mean:.3f}")

        fused = build_model(ModelConfig(variant="two_stream", num_classes=3),
                            seed=0)
        resf = train_supervised(fused, fused3,
                                TrainConfig(val_every=10, class_mode=3,
                                            **trainer),
                                out_dir=tmp_path / "fused3",
                                init=pre.checkpoint_path)
        crit.expect(
            resf.best_val_accuracy >= res3.best_val_accuracy - 0.02,
            f"fused {resf.best_val_accuracy:.3f} trails audio-only "
            f"{res3.best_val_accuracy:.3f} by more than 2 points")
        crit.note(f"4-class val {res4.best_val_accuracy:.3f}; 3-class audio "
                  f"{res3.best_val_accuracy:.3f} vs fused "
                  f"{resf.best_val_accuracy:.3f}; pretrain loss "
                  f"{first:.3f} -> {last:.3f}; pair distance "
                  f"{pos_mean:.3f} matched vs {neg_mean:.3f} mismatched")
