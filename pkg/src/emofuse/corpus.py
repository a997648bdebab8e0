"""Disk-facing corpus tools: synthetic fixtures and raw-file preprocessing."""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import cv2
import numpy as np

from .errors import EmofuseError, ManifestError
from .signal import (CANONICAL_RATE, SegmentSpec, Waveform, clip_segments,
                     crop_frequency_top, denoise, render_spectrogram,
                     save_spectrogram)
from .vision import (CLIP_FRAMES, DEFAULT_HEAD_BOX, FRAME_HEIGHT, FRAME_WIDTH,
                     CropRegion, VideoClip, build_clip, save_clip)
from .dataset import class_names

log = logging.getLogger(__name__)

SEGMENT_SECONDS = 3.0
CLASS_BAND_BASE_HZ = 500.0
CLASS_BAND_SPAN_HZ = 300.0
# pulse rates ~1.9x apart so the temporal envelope separates classes even
# for models that pool away the frequency axis
CLASS_PULSE_HZ = (0.7, 1.4, 2.6, 4.2)
RAW_FPS = 12.0
RAW_FRAME_SHAPE = (120, 160)


def class_band(class_idx: int) -> tuple:
    """Frequency band (low, high) in Hz that synthetic class tones occupy."""
    low = CLASS_BAND_BASE_HZ * (class_idx + 1)
    return low, low + CLASS_BAND_SPAN_HZ


def _synth_samples(rng, class_idx: int, duration_s: float,
                   rate: int = CANONICAL_RATE) -> np.ndarray:
    """Tone cluster inside the class band, pulsed at the class rate."""
    n = int(round(duration_s * rate))
    t = np.arange(n, dtype=np.float64) / rate
    low, high = class_band(class_idx)
    offsets = np.array([0.25, 0.5, 0.75]) * (high - low)
    jitter = rng.uniform(-20.0, 20.0, size=3)
    amps = np.array([1.0, 0.6, 0.4])
    sig = np.zeros(n)
    for f, a in zip(low + offsets + jitter, amps):
        sig += a * np.sin(2.0 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    pulse_hz = CLASS_PULSE_HZ[class_idx % len(CLASS_PULSE_HZ)]
    envelope = 0.5 + 0.5 * np.sin(2.0 * np.pi * pulse_hz * t
                                  + rng.uniform(0, 2 * np.pi))
    sig *= envelope ** 2  # squared for hard valleys between pulses
    noise = rng.normal(size=n)
    peak_rms = np.sqrt(np.sum(amps ** 2) / 2.0)
    noise *= peak_rms / (6.0 * np.sqrt(np.mean(noise ** 2)))
    x = sig + noise
    return 0.7 * x / np.max(np.abs(x))


_GRID_CACHE = {}


def _pixel_grid(h: int, w: int):
    key = (h, w)
    if key not in _GRID_CACHE:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        _GRID_CACHE[key] = (yy, xx)
    return _GRID_CACHE[key]


def _blob_frame(h: int, w: int, cx: float, cy: float, sigma: float,
                amplitude: float, background: float) -> np.ndarray:
    yy, xx = _pixel_grid(h, w)
    blob = amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    return np.clip(background + blob, 0.0, 1.0)


def _synth_clip_frames(rng, class_idx: int) -> np.ndarray:
    """A (20, 100, 60, 3) clip: one bright blob oscillating at a class rate."""
    freq = 0.4 + 0.35 * class_idx
    phase = rng.uniform(0, 2 * np.pi)
    times = (np.arange(CLIP_FRAMES) + 0.5) * SEGMENT_SECONDS / CLIP_FRAMES
    frames = np.empty((CLIP_FRAMES, FRAME_HEIGHT, FRAME_WIDTH, 3), dtype=np.float32)
    base_x = 30.0 + rng.uniform(-5, 5)
    base_y = 50.0 + rng.uniform(-5, 5)
    tint = rng.uniform(0.7, 1.0, size=3)
    for i, t in enumerate(times):
        cx = base_x + 12.0 * np.cos(2 * np.pi * freq * t + phase)
        cy = base_y + 20.0 * np.sin(2 * np.pi * freq * t + phase)
        gray = _blob_frame(FRAME_HEIGHT, FRAME_WIDTH, cx, cy, 8.0, 0.8, 0.1)
        frames[i] = (gray[:, :, None] * tint).astype(np.float32)
    return frames


def generate_synthetic_fixture(root, n_per_class: int = 10,
                               num_classes: int = 4, seed: int = 0,
                               segment: SegmentSpec = SegmentSpec(False, True),
                               duration_range=(2.4, 3.0),
                               crop_fraction: float = 0.6,
                               with_video: bool = True) -> Path:
    """Write a ready-to-train dataset root of synthetic class-banded data.

    Audio for class c concentrates energy in class_band(c); clips carry a
    blob oscillating at a class-specific rate. Artifacts pass through the
    real preprocessing ops, and the same seed reproduces every byte.
    """
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    if with_video:
        (root / "video").mkdir(parents=True, exist_ok=True)
    names = class_names(num_classes)
    records = []
    for c, name in enumerate(names):
        for u in range(n_per_class):
            rng = np.random.default_rng([seed, c, u])
            utt = f"{name.lower()[0]}{u:04d}"
            duration = rng.uniform(*duration_range)
            wave = Waveform(_synth_samples(rng, c, duration), CANONICAL_RATE)
            utt_seed = (zlib.crc32(utt.encode()) ^ seed) & 0xFFFFFFFF
            if segment.clip_3s:
                segs = clip_segments(wave, SEGMENT_SECONDS, seed=utt_seed)
            else:
                segs = [wave]
            for i, seg in enumerate(segs):
                if segment.noise_cleanup:
                    seg = denoise(seg)
                spec = render_spectrogram(seg, meta={
                    "utterance": utt, "segment_index": i, "label": name,
                    "segment": segment.to_dict()})
                if crop_fraction:
                    spec = crop_frequency_top(spec, crop_fraction)
                save_spectrogram(spec, root / "audio" / f"{utt}_{i}.npy")
                if with_video:
                    clip = VideoClip(_synth_clip_frames(rng, c),
                                     meta={"utterance": utt, "segment_index": i})
                    save_clip(clip, root / "video" / f"{utt}_{i}.clip")
            records.append({"id": utt, "label": name, "actor_side": "left",
                            "head_box": list(DEFAULT_HEAD_BOX)})
    with open(root / "labels.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"version": 1, "seed": seed, "n_per_class": n_per_class,
            "classes": list(names), "segment": segment.to_dict(),
            "crop_fraction": crop_fraction, "with_video": with_video}
    with open(root / "meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
    return root


def generate_raw_fixture(root, n_per_class: int = 3, num_classes: int = 4,
                         seed: int = 0, with_video: bool = True,
                         rate: int = 22050) -> Path:
    """Write undecoded synthetic recordings: WAV files, MJPG AVI, labels.

    Durations straddle 3 s so segmentation produces one- and two-segment
    utterances. WAVs use a non-canonical rate to exercise resampling.
    """
    from scipy.io import wavfile

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = class_names(num_classes)
    h, w = RAW_FRAME_SHAPE
    records = []
    for c, name in enumerate(names):
        for u in range(n_per_class):
            rng = np.random.default_rng([seed + 1, c, u])
            utt = f"{name.lower()[0]}{u:04d}"
            duration = rng.uniform(2.5, 4.5)
            samples = _synth_samples(rng, c, duration, rate=rate)
            wavfile.write(root / f"{utt}.wav",
                          rate, (samples * 32767.0).astype(np.int16))
            side = "left" if u % 2 == 0 else "right"
            if with_video:
                n_frames = int(np.ceil((duration + 0.5) * RAW_FPS))
                writer = cv2.VideoWriter(str(root / f"{utt}.avi"),
                                         cv2.VideoWriter_fourcc(*"MJPG"),
                                         RAW_FPS, (w, h))
                try:
                    freq = 0.4 + 0.35 * c
                    phase = rng.uniform(0, 2 * np.pi)
                    base_x = (w // 4) if side == "left" else (3 * w // 4)
                    for i in range(n_frames):
                        t = i / RAW_FPS
                        cx = base_x + 14.0 * np.cos(2 * np.pi * freq * t + phase)
                        cy = 36.0 + 18.0 * np.sin(2 * np.pi * freq * t + phase)
                        gray = _blob_frame(h, w, cx, cy, 9.0, 0.8, 0.1)
                        frame = (gray * 255.0).astype(np.uint8)
                        writer.write(np.repeat(frame[:, :, None], 3, axis=2))
                finally:
                    writer.release()
            records.append({"id": utt, "label": name, "actor_side": side,
                            "head_box": list(DEFAULT_HEAD_BOX)})
    with open(root / "labels.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return root


def _preprocess_one(task: dict) -> dict:
    """Process one utterance; returns {"id", "segments"} or {"id", "error"}."""
    rec = task["record"]
    try:
        return _preprocess_one_strict(task)
    except (EmofuseError, OSError, ValueError) as exc:
        return {"id": rec["id"], "error": str(exc)}


def _preprocess_one_strict(task: dict) -> dict:
    from .signal import load_waveform

    root = Path(task["out_root"])
    seg_dict = task["segment"]
    segment = SegmentSpec(noise_cleanup=seg_dict["noise_cleanup"],
                          clip_3s=seg_dict["clip_3s"])
    rec = task["record"]
    utt = rec["id"]
    wave = load_waveform(task["wav_path"])
    utt_seed = (zlib.crc32(utt.encode()) ^ task["seed"]) & 0xFFFFFFFF
    if segment.clip_3s:
        segs = clip_segments(wave, SEGMENT_SECONDS, seed=utt_seed)
    else:
        segs = [wave]
    region = None
    if task["video_path"] is not None:
        region = CropRegion(side=rec.get("actor_side", "left"),
                            head_box=tuple(rec.get("head_box", DEFAULT_HEAD_BOX)))
    for i, seg in enumerate(segs):
        if segment.noise_cleanup:
            seg = denoise(seg)
        spec = render_spectrogram(seg, meta={
            "utterance": utt, "segment_index": i, "label": rec["label"],
            "segment": segment.to_dict()})
        if task["crop_fraction"]:
            spec = crop_frequency_top(spec, task["crop_fraction"])
        save_spectrogram(spec, root / "audio" / f"{utt}_{i}.npy")
        if region is not None:
            clip = build_clip(task["video_path"], start_s=i * SEGMENT_SECONDS,
                              region=region,
                              meta={"utterance": utt, "segment_index": i})
            save_clip(clip, root / "video" / f"{utt}_{i}.clip")
    return {"id": utt, "segments": len(segs)}


def preprocess_corpus(raw_root, out_root, segment: SegmentSpec,
                      mode: str = "audio", crop_fraction: float = 0.6,
                      force: bool = False, jobs: int = 1,
                      seed: int = 0) -> dict:
    """Turn a directory of raw recordings into a dataset root.

    Expects raw_root/<utt>.wav (plus <utt>.avi in audio+video mode) and
    raw_root/labels.jsonl. Finished utterances are skipped unless `force`;
    per-file failures are logged to out_root/errors.log and do not stop
    the rest of the corpus. Returns a summary dict.
    """
    raw_root = Path(raw_root)
    out_root = Path(out_root)
    if not raw_root.is_dir():
        raise ManifestError(f"raw corpus directory {raw_root} does not exist")
    labels_path = raw_root / "labels.jsonl"
    if not labels_path.exists():
        raise ManifestError(f"missing label index {labels_path}")
    want_video = mode == "audio+video"
    (out_root / "audio").mkdir(parents=True, exist_ok=True)
    if want_video:
        (out_root / "video").mkdir(parents=True, exist_ok=True)

    records = []
    for line in labels_path.read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    records.sort(key=lambda r: r["id"])

    tasks = []
    skipped = 0
    errors = []
    for rec in records:
        utt = rec["id"]
        wav_path = raw_root / f"{utt}.wav"
        if not wav_path.exists():
            errors.append((utt, f"missing audio file {wav_path.name}"))
            continue
        video_path = None
        if want_video:
            video_path = raw_root / f"{utt}.avi"
            if not video_path.exists():
                errors.append((utt, f"missing video file {video_path.name}"))
                continue
        done = (out_root / "audio" / f"{utt}_0.npy").exists()
        if want_video:
            done = done and (out_root / "video" / f"{utt}_0.clip").exists()
        if done and not force:
            skipped += 1
            continue
        tasks.append({"record": rec, "wav_path": str(wav_path),
                      "video_path": str(video_path) if video_path else None,
                      "out_root": str(out_root), "segment": segment.to_dict(),
                      "crop_fraction": crop_fraction, "seed": seed})

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_preprocess_one, tasks))
    else:
        results = [_preprocess_one(task) for task in tasks]
    processed = 0
    for res in results:
        if "error" in res:
            errors.append((res["id"], res["error"]))
        else:
            processed += 1

    if errors:
        with open(out_root / "errors.log", "w") as f:
            for utt, msg in errors:
                f.write(f"{utt}\t{msg}\n")
        for utt, msg in errors:
            log.warning("preprocess failed for %s: %s", utt, msg)

    kept = [r for r in records if not any(u == r["id"] for u, _ in errors)]
    with open(out_root / "labels.jsonl", "w") as f:
        for rec in kept:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"version": 1, "segment": segment.to_dict(), "mode": mode,
            "crop_fraction": crop_fraction, "source": str(raw_root)}
    with open(out_root / "meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
    return {"processed": processed, "skipped": skipped, "errors": errors}
