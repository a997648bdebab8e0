"""Shared independent oracles and builders used by several test modules."""

import numpy as np

from emofuse.dataset import Example, Manifest
from emofuse.signal import CANONICAL_RATE, SPEC_HEIGHT, STFT_WINDOW, SegmentSpec


def axis_coords(out_n, in_n):
    """Pixel-center resampling grid with edge-pinned fractions."""
    s = (np.arange(out_n) + 0.5) * in_n / out_n - 0.5
    i0 = np.floor(s).astype(int)
    frac = s - i0
    low = i0 < 0
    high = i0 >= in_n - 1
    i0[low] = 0
    frac[low] = 0.0
    i0[high] = in_n - 1
    frac[high] = 0.0
    return i0, np.minimum(i0 + 1, in_n - 1), frac


def bilinear_resize(a, oh, ow):
    y0, y1, fy = axis_coords(oh, a.shape[0])
    x0, x1, fx = axis_coords(ow, a.shape[1])
    fy = fy[:, None]
    fx = fx[None, :]
    return ((1 - fy) * (1 - fx) * a[np.ix_(y0, x0)]
            + (1 - fy) * fx * a[np.ix_(y0, x1)]
            + fy * (1 - fx) * a[np.ix_(y1, x0)]
            + fy * fx * a[np.ix_(y1, x1)])


def freq_to_row(freq):
    """Expected output row of a tone: bin -> flip -> 200-row resample."""
    bin_pos = freq * STFT_WINDOW / CANONICAL_RATE
    src_row = (STFT_WINDOW // 2) - bin_pos  # 1025 rows, row 0 = Nyquist
    return (src_row + 0.5) * SPEC_HEIGHT / (STFT_WINDOW // 2 + 1) - 0.5


def synthetic_manifest(counts, with_clips=False, segments_per_utt=1):
    """In-memory manifest: `counts[label]` utterances, no files behind it."""
    examples = []
    for label, n in counts.items():
        tag = label[0].lower()
        for u in range(n):
            utt = f"{tag}{u:05d}"
            for s in range(segments_per_utt):
                examples.append(Example(
                    id=f"{utt}_{s}", utterance_id=utt, label=label,
                    spectrogram_ref=f"audio/{utt}_{s}.npy",
                    clip_ref=f"video/{utt}_{s}.clip" if with_clips else None))
    mode = "audio+video" if with_clips else "audio"
    segment = SegmentSpec(noise_cleanup=False, clip_3s=True)
    return Manifest(root=".", mode=mode, segment=segment, examples=examples)
