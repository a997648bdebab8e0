"""Labeled manifests: balancing, splitting, augmentation, batching, pair sampling."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import BalanceError, ManifestError, SamplingError
from .signal import SPEC_HEIGHT, SPEC_WIDTH, SegmentSpec, standardize_pixels

log = logging.getLogger(__name__)

CANONICAL_ORDER = ("Happy", "Sad", "Anger", "Neutral")

CLASS_SETS = {
    4: ("Happy", "Sad", "Anger", "Neutral"),
    3: ("Sad", "Anger", "Neutral"),
}

AUGMENTATIONS = ("original", "crop10", "rotate")
ROTATION_DEGREES = 10.0
CROP_TOP_PIXELS = 10


def class_names(num_classes: int) -> tuple:
    try:
        return CLASS_SETS[num_classes]
    except KeyError:
        raise ValueError(f"class mode must be one of {sorted(CLASS_SETS)}, "
                         f"got {num_classes}") from None


def label_index(label: str, names) -> int:
    try:
        return names.index(label)
    except ValueError:
        raise ValueError(f"label {label!r} not in class set {names}") from None


@dataclass(frozen=True)
class Example:
    """One labeled preprocessed segment."""

    id: str
    utterance_id: str
    label: str
    spectrogram_ref: str
    clip_ref: str | None = None
    augmentation: str = "original"
    rotation_deg: float = 0.0
    split: str | None = None

    def __post_init__(self):
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["clip_ref"] is None:
            del d["clip_ref"]
        if d["split"] is None:
            del d["split"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Example":
        return cls(**d)


@dataclass
class Manifest:
    """An ordered collection of examples plus segment/split metadata."""

    root: str
    mode: str  # "audio" or "audio+video"
    segment: SegmentSpec
    examples: list = field(default_factory=list)

    def classes(self) -> tuple:
        present = {e.label for e in self.examples}
        return tuple(c for c in CANONICAL_ORDER if c in present)

    def train_examples(self) -> list:
        return [e for e in self.examples if e.split == "train"]

    def val_examples(self) -> list:
        return [e for e in self.examples if e.split == "val"]

    def filter_classes(self, names) -> "Manifest":
        keep = [e for e in self.examples if e.label in names]
        return Manifest(root=self.root, mode=self.mode, segment=self.segment,
                        examples=keep)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w") as f:
            header = {"_type": "manifest", "root": self.root, "mode": self.mode,
                      "segment": self.segment.to_dict()}
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for e in self.examples:
                f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ManifestError(f"empty manifest file {path}")
        header = json.loads(lines[0])
        if header.get("_type") != "manifest":
            raise ManifestError(f"{path} does not start with a manifest header")
        seg = header["segment"]
        examples = [Example.from_dict(json.loads(line)) for line in lines[1:]]
        return cls(root=header["root"], mode=header["mode"],
                   segment=SegmentSpec(seg["noise_cleanup"], seg["clip_3s"]),
                   examples=examples)


@dataclass(frozen=True)
class ContrastivePair:
    """A (video clip, spectrogram) pair for correspondence pretraining.

    y is 1 when both artifacts come from the same recording, else 0.
    """

    clip_ref: str
    spectrogram_ref: str
    clip_utterance_id: str
    spec_utterance_id: str
    clip_label: str
    spec_label: str
    pair_type: str  # positive | hard_negative | super_hard_negative
    y: int

    def __post_init__(self):
        same = self.clip_utterance_id == self.spec_utterance_id
        if self.pair_type == "positive":
            ok = same and self.y == 1
        elif self.pair_type == "hard_negative":
            ok = (not same) and self.clip_label != self.spec_label and self.y == 0
        elif self.pair_type == "super_hard_negative":
            ok = (not same) and self.clip_label == self.spec_label and self.y == 0
        else:
            raise ValueError(f"unknown pair_type {self.pair_type!r}")
        if not ok:
            raise ValueError(f"pair violates {self.pair_type} constraints: "
                             f"{self.clip_utterance_id} vs {self.spec_utterance_id}")


def read_labels(root) -> dict:
    """Read root/labels.jsonl into {utterance_id: record}."""
    labels_path = Path(root) / "labels.jsonl"
    if not labels_path.exists():
        raise ManifestError(f"missing label index {labels_path}")
    records = {}
    for line in labels_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        records[rec["id"]] = rec
    return records


def build_manifest(root, segment: SegmentSpec, mode: str = "audio") -> Manifest:
    """Index preprocessed artifacts under `root` into a manifest.

    Layout: root/audio/<utt>_<seg>.npy, root/video/<utt>_<seg>.clip,
    root/labels.jsonl. Missing labels or clips raise with the offender ids.
    """
    if mode not in ("audio", "audio+video"):
        raise ValueError(f"mode must be 'audio' or 'audio+video', got {mode!r}")
    root = Path(root)
    audio_dir = root / "audio"
    spec_files = sorted(audio_dir.glob("*.npy")) if audio_dir.is_dir() else []
    if not spec_files:
        log.warning("no spectrogram artifacts under %s", audio_dir)
        return Manifest(root=str(root), mode=mode, segment=segment, examples=[])

    labels = read_labels(root)
    examples = []
    missing_labels = []
    missing_clips = []
    for path in spec_files:
        stem = path.stem
        utt_id, _, seg_idx = stem.rpartition("_")
        if not utt_id or not seg_idx.isdigit():
            raise ManifestError(f"artifact name {path.name} is not <utt>_<segIdx>.npy")
        rec = labels.get(utt_id)
        if rec is None:
            missing_labels.append(stem)
            continue
        clip_ref = None
        if mode == "audio+video":
            clip_path = root / "video" / f"{stem}.clip"
            if not clip_path.exists():
                missing_clips.append(stem)
                continue
            clip_ref = f"video/{stem}.clip"
        examples.append(Example(id=stem, utterance_id=utt_id, label=rec["label"],
                                spectrogram_ref=f"audio/{stem}.npy",
                                clip_ref=clip_ref))
    if missing_labels:
        raise ManifestError(f"no label for artifacts: {sorted(missing_labels)}")
    if missing_clips:
        raise ManifestError(f"no video clip for artifacts: {sorted(missing_clips)}")
    examples.sort(key=lambda e: e.id)
    return Manifest(root=str(root), mode=mode, segment=segment, examples=examples)


def _resize_pool(pool, target, rng, id_tag):
    """Duplicate or randomly drop examples to hit `target` exactly."""
    if target == len(pool):
        return list(pool)
    if target < len(pool):
        keep = np.sort(rng.choice(len(pool), size=target, replace=False))
        return [pool[i] for i in keep]
    out = list(pool)
    full, extra = divmod(target - len(pool), len(pool))
    dup_sources = list(range(len(pool))) * full
    dup_sources += list(np.sort(rng.choice(len(pool), size=extra, replace=False)))
    for n, i in enumerate(dup_sources):
        src = pool[i]
        out.append(dataclasses.replace(src, id=f"{src.id}~{id_tag}{n}"))
    return out


def balance_and_split(m: Manifest, per_class_total: int = 2000,
                      train_fraction: float = 0.8, seed: int = 0) -> Manifest:
    """Split utterances per class, then balance each side to fixed counts.

    Utterances are split train/val first so no utterance (or duplicate of
    one) ever appears on both sides. Within each side, classes are
    upsampled by duplication or downsampled by seeded random drops.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if per_class_total < 2:
        raise BalanceError(f"per_class_total={per_class_total} cannot cover "
                           "a train and a val side")
    target_train = int(round(per_class_total * train_fraction))
    target_train = min(max(target_train, 1), per_class_total - 1)
    target_val = per_class_total - target_train

    classes = m.classes()
    if not classes:
        raise BalanceError("manifest has no examples")
    rng = np.random.default_rng(seed)
    balanced = []
    for label in classes:
        pool = [e for e in m.examples if e.label == label]
        utterances = sorted({e.utterance_id for e in pool})
        if len(utterances) < 2:
            raise BalanceError(
                f"class {label!r} has {len(utterances)} unique utterance(s); "
                "cannot keep train and val utterance-disjoint")
        perm = rng.permutation(len(utterances))
        n_train_utt = min(max(int(round(train_fraction * len(utterances))), 1),
                          len(utterances) - 1)
        train_utts = {utterances[i] for i in perm[:n_train_utt]}
        train_pool = [e for e in pool if e.utterance_id in train_utts]
        val_pool = [e for e in pool if e.utterance_id not in train_utts]
        train = _resize_pool(train_pool, target_train, rng, "d")
        val = _resize_pool(val_pool, target_val, rng, "d")
        balanced += [dataclasses.replace(e, split="train") for e in train]
        balanced += [dataclasses.replace(e, split="val") for e in val]

    balanced.sort(key=lambda e: (e.split, e.id))
    return Manifest(root=m.root, mode=m.mode, segment=m.segment, examples=balanced)


def augment(m: Manifest, seed: int = 0) -> Manifest:
    """Expand each train example to (original, top-crop, small rotation).

    The rotation sign is a seeded per-example coin flip. Validation
    examples pass through untouched; flips are never generated.
    """
    rng = np.random.default_rng(seed)
    out = []
    for e in m.examples:
        if e.split != "train":
            out.append(e)
            continue
        sign = 1.0 if rng.integers(0, 2) == 1 else -1.0
        out.append(e)
        out.append(dataclasses.replace(e, id=f"{e.id}+crop10", augmentation="crop10"))
        out.append(dataclasses.replace(e, id=f"{e.id}+rot", augmentation="rotate",
                                       rotation_deg=sign * ROTATION_DEGREES))
    return Manifest(root=m.root, mode=m.mode, segment=m.segment, examples=out)


def make_batches(m: Manifest, batch_size: int = 64, seed: int = 0,
                 epoch: int = 0, split: str = "train") -> list:
    """Seeded per-epoch shuffle chunked into batches; the short tail is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    pool = [e for e in m.examples if split is None or e.split == split]
    if split is not None and not any(e.split == split for e in m.examples):
        pool = list(m.examples)  # unsplit manifest: use everything
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pool))
    shuffled = [pool[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _pair_counts(count: int, ratios) -> list:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"ratios must be 3 non-negative numbers, got {ratios}")
    scale = count / sum(ratios)
    raw = [r * scale for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    for _ in range(count - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    return counts


def sample_contrastive_pairs(m: Manifest, count: int,
                             ratios=(1 / 3, 1 / 3, 1 / 3),
                             seed: int = 0) -> list:
    """Draw typed (clip, spectrogram) pairs with seeded reproducibility.

    Positives reuse one example's own clip and spectrogram. Hard negatives
    mix different-label recordings; super hard negatives mix same-label
    recordings from different utterances.
    """
    pool = [e for e in m.examples if e.split == "train"]
    if not pool:
        pool = list(m.examples)
    pool = [e for e in pool if e.clip_ref is not None]
    if not pool:
        raise SamplingError("no examples with video clips to pair")

    n_pos, n_hard, n_super = _pair_counts(count, ratios)
    by_label = {}
    for i, e in enumerate(pool):
        by_label.setdefault(e.label, []).append(i)
    labels = sorted(by_label)
    if n_hard > 0 and len(labels) < 2:
        raise SamplingError("hard negatives need at least two classes")
    utts_per_label = {lab: {pool[i].utterance_id for i in idx}
                      for lab, idx in by_label.items()}
    super_eligible = [lab for lab in labels if len(utts_per_label[lab]) >= 2]
    if n_super > 0 and not super_eligible:
        raise SamplingError("super hard negatives need a class with >= 2 utterances")

    rng = np.random.default_rng(seed)
    pairs = []

    def _pair(clip_ex, spec_ex, pair_type, y):
        return ContrastivePair(
            clip_ref=clip_ex.clip_ref, spectrogram_ref=spec_ex.spectrogram_ref,
            clip_utterance_id=clip_ex.utterance_id,
            spec_utterance_id=spec_ex.utterance_id,
            clip_label=clip_ex.label, spec_label=spec_ex.label,
            pair_type=pair_type, y=y)

    for _ in range(n_pos):
        e = pool[rng.integers(len(pool))]
        pairs.append(_pair(e, e, "positive", 1))
    for _ in range(n_hard):
        e1 = pool[rng.integers(len(pool))]
        others = [i for lab in labels if lab != e1.label for i in by_label[lab]]
        e2 = pool[others[rng.integers(len(others))]]
        pairs.append(_pair(e1, e2, "hard_negative", 0))
    eligible = [i for lab in super_eligible for i in by_label[lab]]
    for _ in range(n_super):
        e1 = pool[eligible[rng.integers(len(eligible))]]
        mates = [i for i in by_label[e1.label]
                 if pool[i].utterance_id != e1.utterance_id]
        e2 = pool[mates[rng.integers(len(mates))]]
        pairs.append(_pair(e1, e2, "super_hard_negative", 0))
    return pairs


def apply_augmentation(pixels: np.ndarray, augmentation: str,
                       rotation_deg: float = 0.0) -> np.ndarray:
    """Apply a manifest-recorded augmentation to a [0, 1] spectrogram image."""
    if augmentation == "original":
        return pixels
    if augmentation == "crop10":
        cropped = pixels[CROP_TOP_PIXELS:, :, :]
        return cv2.resize(cropped, (SPEC_WIDTH, SPEC_HEIGHT),
                          interpolation=cv2.INTER_LINEAR)
    if augmentation == "rotate":
        h, w = pixels.shape[:2]
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
        mat = cv2.getRotationMatrix2D(center, rotation_deg, 1.0)
        return cv2.warpAffine(pixels, mat, (w, h), flags=cv2.INTER_LINEAR,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    raise ValueError(f"unknown augmentation {augmentation!r}")


class BatchLoader:
    """Materialize manifest examples into model-ready arrays.

    Spectrograms get their recorded augmentation plus channel
    normalization; clips are loaded as stored. Raw artifacts are cached
    per path, so repeated epochs do not re-read files.
    """

    def __init__(self, manifest: Manifest, num_classes: int | None = None,
                 normalize: bool = True, cache: bool = True):
        self.root = Path(manifest.root)
        self.names = class_names(num_classes) if num_classes else manifest.classes()
        self.normalize = normalize
        self._cache = {} if cache else None

    def _raw(self, ref: str) -> np.ndarray:
        if self._cache is not None and ref in self._cache:
            return self._cache[ref]
        with open(self.root / ref, "rb") as f:
            arr = np.load(f)
        if self._cache is not None:
            self._cache[ref] = arr
        return arr

    def spectrogram_array(self, example: Example) -> np.ndarray:
        """One example as (3, 200, 300) float32."""
        pixels = self._raw(example.spectrogram_ref)
        pixels = apply_augmentation(pixels, example.augmentation, example.rotation_deg)
        if self.normalize:
            pixels = standardize_pixels(pixels)
        return np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32)

    def clip_array(self, example: Example) -> np.ndarray:
        """One example's clip as (3, 20, 100, 60) float32."""
        frames = self._raw(example.clip_ref)
        return np.ascontiguousarray(frames.transpose(3, 0, 1, 2), dtype=np.float32)

    def batch_arrays(self, batch) -> dict:
        specs = np.stack([self.spectrogram_array(e) for e in batch])
        labels = np.array([label_index(e.label, self.names) for e in batch],
                          dtype=np.int64)
        out = {"spectrograms": specs, "labels": labels}
        if all(e.clip_ref is not None for e in batch):
            out["clips"] = np.stack([self.clip_array(e) for e in batch])
        return out

    def pair_arrays(self, pairs) -> dict:
        clips = []
        specs = []
        for p in pairs:
            clips.append(np.ascontiguousarray(
                self._raw(p.clip_ref).transpose(3, 0, 1, 2), dtype=np.float32))
            pixels = self._raw(p.spectrogram_ref)
            if self.normalize:
                pixels = standardize_pixels(pixels)
            specs.append(np.ascontiguousarray(pixels.transpose(2, 0, 1),
                                              dtype=np.float32))
        return {"clips": np.stack(clips), "spectrograms": np.stack(specs),
                "y": np.array([p.y for p in pairs], dtype=np.float32)}
