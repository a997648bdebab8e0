"""Audio DSP: waveform loading, denoising, padding, clipping, spectrogram rendering.

All operations are pure numpy given an explicit seed and never hold more
than one utterance in memory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, sosfiltfilt
from scipy.signal import istft as _scipy_istft
from scipy.signal import resample_poly
from scipy.signal import stft as _scipy_stft

from .errors import DecodeError, EmptyInputError, TooShortError

CANONICAL_RATE = 44100
STFT_WINDOW = 2048
STFT_HOP = 512
SPEC_HEIGHT = 200
SPEC_WIDTH = 300
DB_LIMIT = 60.0  # clip dB values to [-DB_LIMIT, +DB_LIMIT]

# Guard against zero variance when standardizing constant images.
STANDARDIZE_EPS = 1e-6

# Spectral gate defaults: noise floor from the lowest-energy fraction of
# frames, attenuate bins below floor + threshold_db by `attenuation`.
GATE_FLOOR_FRACTION = 0.1
GATE_THRESHOLD_DB = 6.0
GATE_ATTENUATION = 0.1


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise EmptyInputError("waveform has no samples")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class Spectrogram:
    """A 200x300x3 time/frequency/power image. Row 0 is the highest frequency."""

    pixels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.shape != (SPEC_HEIGHT, SPEC_WIDTH, 3):
            raise ValueError(
                f"spectrogram must be {SPEC_HEIGHT}x{SPEC_WIDTH}x3, got {pixels.shape}"
            )
        if not np.all(np.isfinite(pixels)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "pixels", pixels)


@dataclass(frozen=True)
class SegmentSpec:
    """How utterances are segmented before rendering (see `name`)."""

    noise_cleanup: bool = False
    clip_3s: bool = True

    _NAMES = {
        (False, False): "DS I",
        (False, True): "DS II",
        (True, False): "DS III",
        (True, True): "DS IV",
    }

    @property
    def name(self) -> str:
        return self._NAMES[(self.noise_cleanup, self.clip_3s)]

    @classmethod
    def from_name(cls, name: str) -> "SegmentSpec":
        key = name.strip().upper().replace(" ", "").replace("-", "")
        aliases = {"DSI": "DS I", "DS1": "DS I", "DSII": "DS II", "DS2": "DS II",
                   "DSIII": "DS III", "DS3": "DS III", "DSIV": "DS IV", "DS4": "DS IV"}
        canonical = aliases.get(key)
        if canonical is None:
            raise ValueError(f"unknown segment recipe {name!r}")
        flags = {v: k for k, v in cls._NAMES.items()}[canonical]
        return cls(noise_cleanup=flags[0], clip_3s=flags[1])

    def to_dict(self) -> dict:
        return {"noise_cleanup": self.noise_cleanup, "clip_3s": self.clip_3s,
                "name": self.name}


def _to_float(data: np.ndarray) -> np.ndarray:
    """Scale integer PCM to [-1, 1] floats."""
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def load_waveform(path, target_rate: int = CANONICAL_RATE) -> Waveform:
    """Read a PCM WAV file as mono float samples resampled to `target_rate`.

    Stereo channels are averaged. Resampling is polyphase (band-limited).
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if data.size == 0:
        raise EmptyInputError(f"{path} contains no audio samples")
    samples = _to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != target_rate:
        g = math.gcd(int(target_rate), int(rate))
        samples = resample_poly(samples, target_rate // g, rate // g)
    if samples.size == 0:
        raise EmptyInputError(f"{path} resampled to zero samples")
    return Waveform(samples=samples, sample_rate=target_rate)


def denoise(
    w: Waveform,
    low_hz: float = 1.0,
    high_hz: float = 30000.0,
    floor_fraction: float = GATE_FLOOR_FRACTION,
    threshold_db: float = GATE_THRESHOLD_DB,
    attenuation: float = GATE_ATTENUATION,
) -> Waveform:
    """Bandpass then spectral-gate a waveform. Output length equals input length.

    The upper band edge is clamped below Nyquist. The gate estimates a
    per-frequency noise floor from the lowest-energy `floor_fraction` of
    STFT frames and scales bins below floor + `threshold_db` by `attenuation`.
    """
    if not 0 <= low_hz < high_hz:
        raise ValueError(f"need 0 <= low_hz < high_hz, got {low_hz}, {high_hz}")
    n = len(w)
    if n < STFT_WINDOW:
        raise TooShortError(f"waveform of {n} samples is shorter than one "
                            f"{STFT_WINDOW}-sample analysis window")

    nyquist = w.sample_rate / 2.0
    high = min(high_hz, 0.999 * nyquist)
    if low_hz > 0:
        sos = butter(4, [low_hz, high], btype="bandpass", fs=w.sample_rate, output="sos")
    else:
        sos = butter(4, high, btype="lowpass", fs=w.sample_rate, output="sos")
    x = sosfiltfilt(sos, w.samples)

    _, _, z = _scipy_stft(x, fs=w.sample_rate, window="hann",
                          nperseg=STFT_WINDOW, noverlap=STFT_WINDOW - STFT_HOP)
    mag = np.abs(z)
    frame_energy = (mag ** 2).sum(axis=0)
    k = max(1, int(math.ceil(floor_fraction * frame_energy.size)))
    quiet = np.argsort(frame_energy, kind="stable")[:k]
    floor = mag[:, quiet].mean(axis=1, keepdims=True)
    gate = np.where(mag < floor * 10.0 ** (threshold_db / 20.0), attenuation, 1.0)
    _, y = _scipy_istft(z * gate, fs=w.sample_rate, window="hann",
                        nperseg=STFT_WINDOW, noverlap=STFT_WINDOW - STFT_HOP)
    if y.size < n:
        y = np.pad(y, (0, n - y.size))
    return Waveform(samples=y[:n], sample_rate=w.sample_rate)


def _noise_floor_rms(samples: np.ndarray) -> float:
    """RMS of the quietest 10% of analysis frames (whole signal if too short)."""
    if samples.size < STFT_WINDOW:
        return float(np.sqrt(np.mean(samples ** 2)))
    starts = range(0, samples.size - STFT_WINDOW + 1, STFT_HOP)
    frame_ms = np.array([np.mean(samples[s:s + STFT_WINDOW] ** 2) for s in starts])
    k = max(1, int(math.ceil(GATE_FLOOR_FRACTION * frame_ms.size)))
    quiet = np.sort(frame_ms, kind="stable")[:k]
    return float(np.sqrt(quiet.mean()))


def pad_to_duration(w: Waveform, duration_s: float = 3.0, seed: int = 0) -> Waveform:
    """Extend a waveform to exactly `duration_s` with matched-level Gaussian noise.

    The appended noise RMS matches the RMS of the quietest 10% of input
    frames so padding blends with the existing noise floor.
    """
    target = int(round(duration_s * w.sample_rate))
    n = len(w)
    if n > target:
        raise ValueError(f"input of {n} samples exceeds target of {target}; "
                         "clip before padding")
    if n == target:
        return w
    rng = np.random.default_rng(seed)
    sigma = _noise_floor_rms(w.samples)
    pad = rng.normal(0.0, sigma, target - n) if sigma > 0 else np.zeros(target - n)
    return Waveform(samples=np.concatenate([w.samples, pad]),
                    sample_rate=w.sample_rate)


def clip_segments(w: Waveform, duration_s: float = 3.0, seed: int = 0) -> list[Waveform]:
    """Split into consecutive non-overlapping windows of `duration_s`.

    The final partial window is noise-padded to full length.
    """
    seg_len = int(round(duration_s * w.sample_rate))
    out = []
    for i, start in enumerate(range(0, len(w), seg_len)):
        chunk = w.samples[start:start + seg_len]
        seg = Waveform(samples=chunk, sample_rate=w.sample_rate)
        if len(seg) < seg_len:
            seg = pad_to_duration(seg, duration_s, seed=seed + i)
        out.append(seg)
    return out


def _stft_magnitude(samples: np.ndarray) -> np.ndarray:
    """Magnitude STFT over frames fully inside the signal. Shape (bins, frames)."""
    if samples.size < STFT_WINDOW:
        raise TooShortError(f"waveform of {samples.size} samples is shorter than "
                            f"one {STFT_WINDOW}-sample analysis window")
    window = np.hanning(STFT_WINDOW + 1)[:-1]  # periodic Hann
    n_frames = 1 + (samples.size - STFT_WINDOW) // STFT_HOP
    idx = np.arange(STFT_WINDOW)[None, :] + STFT_HOP * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    return np.abs(np.fft.rfft(frames, axis=1)).T


# 0 dB reference: peak bin magnitude of a full-scale (amplitude 1.0) sine.
_FULL_SCALE = np.hanning(STFT_WINDOW + 1)[:-1].sum() / 2.0


def render_spectrogram(w: Waveform, meta: dict | None = None) -> Spectrogram:
    """Render the fixed-scale spectrogram image of a waveform.

    Magnitude STFT in dB relative to a full-scale sine, clipped to
    [-60, +60] dB, mapped linearly to [0, 1], resized to 200x300 with the
    highest frequency at row 0, and replicated to 3 channels. No axes or
    colorbar are drawn, and the dB reference is fixed so images are
    comparable across utterances.
    """
    mag = _stft_magnitude(w.samples)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / _FULL_SCALE)
    db = np.clip(db, -DB_LIMIT, DB_LIMIT)
    img = (db + DB_LIMIT) / (2.0 * DB_LIMIT)
    img = img[::-1, :]  # row 0 = highest frequency
    img = cv2.resize(img.astype(np.float32), (SPEC_WIDTH, SPEC_HEIGHT),
                     interpolation=cv2.INTER_LINEAR)
    pixels = np.repeat(img[:, :, None], 3, axis=2)
    return Spectrogram(pixels=pixels, meta=dict(meta or {}))


def crop_frequency_top(s: Spectrogram, fraction: float = 0.6) -> Spectrogram:
    """Drop the top `fraction` of rows (highest frequencies) and rescale back."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n_drop = min(int(round(SPEC_HEIGHT * fraction)), SPEC_HEIGHT - 1)
    kept = s.pixels[n_drop:, :, :]
    pixels = cv2.resize(kept, (SPEC_WIDTH, SPEC_HEIGHT), interpolation=cv2.INTER_LINEAR)
    return Spectrogram(pixels=pixels, meta=dict(s.meta))


def standardize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Zero-mean unit-std per channel, with statistics from the image itself.

    Spectrogram brightness depends on recording level and corpus, so fixed
    normalization constants would leave a large input offset that swamps the
    per-example signal; self-statistics center any corpus. Values may leave
    [0, 1]; a constant channel maps to zeros.
    """
    mean = pixels.mean(axis=(0, 1), dtype=np.float64)
    std = pixels.std(axis=(0, 1), dtype=np.float64)
    return ((pixels - mean) / (std + STANDARDIZE_EPS)).astype(np.float32)


def normalize_image(s: Spectrogram) -> Spectrogram:
    """Standardized copy of a spectrogram (see standardize_pixels)."""
    return Spectrogram(pixels=standardize_pixels(s.pixels), meta=dict(s.meta))


def save_spectrogram(s: Spectrogram, path) -> None:
    """Write pixels as .npy plus a JSON sidecar with the meta record."""
    path = Path(path)
    with open(path, "wb") as f:
        np.save(f, s.pixels.astype(np.float32))
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(s.meta, sort_keys=True, indent=0) + "\n")


def load_spectrogram(path) -> Spectrogram:
    path = Path(path)
    pixels = np.load(path)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Spectrogram(pixels=pixels, meta=meta)
