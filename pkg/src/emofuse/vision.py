"""Video frame extraction and actor/head cropping aligned with 3 s audio segments."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import CropError, DecodeError

CLIP_FRAMES = 20
FRAME_HEIGHT = 100
FRAME_WIDTH = 60

DEFAULT_HEAD_BOX = (0.2, 0.0, 0.8, 0.6)


@dataclass(frozen=True)
class CropRegion:
    """Which half of the frame holds the actor, and the head box inside it.

    `head_box` is a fractional (x0, y0, x1, y1) rectangle within the actor half.
    """

    side: str = "left"
    head_box: tuple = DEFAULT_HEAD_BOX

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        x0, y0, x1, y1 = self.head_box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate head_box {self.head_box}")

    def to_dict(self) -> dict:
        return {"side": self.side, "head_box": list(self.head_box)}


@dataclass(frozen=True)
class VideoClip:
    """Exactly 20 frames of 100x60x3 pixels in [0, 1] covering one 3 s window."""

    frames: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        expected = (CLIP_FRAMES, FRAME_HEIGHT, FRAME_WIDTH, 3)
        if frames.shape != expected:
            raise ValueError(f"clip must have shape {expected}, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("clip contains non-finite values")
        object.__setattr__(self, "frames", frames)


def frame_timestamps(start_s: float, duration_s: float, count: int) -> np.ndarray:
    """Uniform mid-interval sampling times for `count` frames in a window."""
    i = np.arange(count)
    return start_s + (i + 0.5) * duration_s / count


def extract_frames(video, start_s: float, duration_s: float = 3.0,
                   count: int = CLIP_FRAMES) -> list[np.ndarray]:
    """Sample `count` frames at uniform mid-interval timestamps.

    Frames are RGB float arrays in [0, 1]. If the window runs past the end
    of the video the last decodable frame is repeated.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    cap = cv2.VideoCapture(str(video))
    try:
        if not cap.isOpened():
            raise DecodeError(f"cannot open video {video}")
        fps = cap.get(cv2.CAP_PROP_FPS)
        n_frames = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        if fps <= 0 or n_frames <= 0:
            raise DecodeError(f"video {video} reports no frames or fps")
        if start_s * fps >= n_frames:
            raise ValueError(f"start_s={start_s} is beyond the end of {video}")

        times = frame_timestamps(start_s, duration_s, count)
        indices = np.floor(times * fps + 0.5).astype(int)
        indices = np.clip(indices, 0, n_frames - 1)

        cache: dict[int, np.ndarray] = {}
        last_good = None
        frames = []
        for idx in indices:
            if idx not in cache:
                cap.set(cv2.CAP_PROP_POS_FRAMES, int(idx))
                ok, bgr = cap.read()
                if ok:
                    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
                    cache[idx] = rgb.astype(np.float32) / 255.0
                    last_good = cache[idx]
                elif last_good is not None:
                    cache[idx] = last_good
                else:
                    raise DecodeError(f"cannot decode any frame of {video}")
            frames.append(cache[idx])
        return frames
    finally:
        cap.release()


def crop_actor(frame: np.ndarray, region: CropRegion) -> np.ndarray:
    """Keep the actor half, crop the head box, resize to 100x60.

    Bilinear resize; output values stay in [0, 1] for [0, 1] input.
    """
    h, w = frame.shape[:2]
    if w < 2:
        raise ValueError(f"frame width must be >= 2, got {w}")
    half = frame[:, : w // 2] if region.side == "left" else frame[:, w // 2 :]
    hh, hw = half.shape[:2]
    x0, y0, x1, y1 = region.head_box
    px0, px1 = int(round(x0 * hw)), int(round(x1 * hw))
    py0, py1 = int(round(y0 * hh)), int(round(y1 * hh))
    px0, py0 = max(px0, 0), max(py0, 0)
    px1, py1 = min(px1, hw), min(py1, hh)
    if px1 - px0 < 1 or py1 - py0 < 1:
        raise CropError(f"head_box {region.head_box} rounds to zero area "
                        f"on a {hw}x{hh} half frame")
    box = half[py0:py1, px0:px1]
    return cv2.resize(box, (FRAME_WIDTH, FRAME_HEIGHT), interpolation=cv2.INTER_LINEAR)


def build_clip(video, start_s: float, region: CropRegion,
               duration_s: float = 3.0, meta: dict | None = None) -> VideoClip:
    """Extract, crop, and stack 20 frames for one window. Deterministic."""
    raw = extract_frames(video, start_s, duration_s, CLIP_FRAMES)
    frames = np.stack([crop_actor(f, region) for f in raw])
    info = {"window": [start_s, start_s + duration_s], "region": region.to_dict()}
    info.update(meta or {})
    return VideoClip(frames=frames, meta=info)


def save_clip(clip: VideoClip, path) -> None:
    """Write frames as raw .npy bytes under a .clip name, plus a JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as f:
        np.save(f, clip.frames.astype(np.float32))
    path.with_suffix(".json").write_text(
        json.dumps(clip.meta, sort_keys=True, indent=0) + "\n")


def load_clip(path) -> VideoClip:
    path = Path(path)
    with open(path, "rb") as f:
        frames = np.load(f)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return VideoClip(frames=frames, meta=meta)
