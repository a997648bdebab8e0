"""Audio, video, and fused network architectures plus checkpoint I/O."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ShapeError
from .signal import SPEC_HEIGHT, SPEC_WIDTH
from .vision import CLIP_FRAMES, FRAME_HEIGHT, FRAME_WIDTH

AUDIO_VARIANTS = ("cnn", "cnn_rnn", "cnn_lstm")
VARIANTS = AUDIO_VARIANTS + ("two_stream",)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by every network variant."""

    variant: str = "cnn"
    num_classes: int = 4
    conv_channels: tuple = (16, 32, 64)
    width_multiplier: int = 1
    rnn_hidden: int = 128
    embed_dim: int = 128
    dropout_fc: float = 0.2
    dropout_rnn: float = 0.1
    audio_variant: str = "cnn_lstm"  # audio branch used inside two_stream

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, "
                             f"got {self.variant!r}")
        if self.num_classes not in (3, 4):
            raise ValueError(f"num_classes must be 3 or 4, got {self.num_classes}")
        if self.width_multiplier not in (1, 2, 4):
            raise ValueError(f"width_multiplier must be 1, 2, or 4, "
                             f"got {self.width_multiplier}")
        if self.audio_variant not in AUDIO_VARIANTS:
            raise ValueError(f"audio_variant must be one of {AUDIO_VARIANTS}, "
                             f"got {self.audio_variant!r}")
        if len(self.conv_channels) != 3 or any(c <= 0 for c in self.conv_channels):
            raise ValueError(f"conv_channels must be 3 positive ints, "
                             f"got {self.conv_channels}")
        for name in ("rnn_hidden", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d.get("conv_channels", (16, 32, 64)))
        return cls(**d)


def _check_input(x: torch.Tensor, shape: tuple, what: str) -> None:
    if x.dim() != len(shape) + 1 or tuple(x.shape[1:]) != shape:
        raise ShapeError(f"{what} batch must be (B, {', '.join(map(str, shape))}), "
                         f"got {tuple(x.shape)}")


class AudioNet(nn.Module):
    """Spectrogram classifier: three conv blocks, then an FC or recurrent head.

    Kernels shrink with depth (7, 5, 3) with matching zero padding so each
    2x2 pool exactly halves the grid. The recurrent variants average out
    the frequency axis and read the time columns as a sequence.
    """

    def __init__(self, cfg: ModelConfig, variant: str | None = None):
        super().__init__()
        self.cfg = cfg
        self.variant = variant or cfg.variant
        if self.variant not in AUDIO_VARIANTS:
            raise ValueError(f"audio variant must be one of {AUDIO_VARIANTS}, "
                             f"got {self.variant!r}")
        m = cfg.width_multiplier
        c1, c2, c3 = (c * m for c in cfg.conv_channels)
        self.conv = nn.Sequential(
            nn.Conv2d(3, c1, kernel_size=7, padding=3), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, kernel_size=5, padding=2), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c2, c3, kernel_size=3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        grid_h, grid_w = SPEC_HEIGHT, SPEC_WIDTH
        for _ in range(3):  # each pool floors: 300 -> 150 -> 75 -> 37
            grid_h //= 2
            grid_w //= 2
        self.grid = (grid_h, grid_w)
        if self.variant == "cnn":
            self.fc_hidden = nn.Linear(c3 * grid_h * grid_w, 256)
            self.dropout = nn.Dropout(cfg.dropout_fc)
            feat_dim = 256
        else:
            rnn_cls = nn.RNN if self.variant == "cnn_rnn" else nn.LSTM
            self.rnn = rnn_cls(input_size=c3, hidden_size=cfg.rnn_hidden,
                               num_layers=1, batch_first=True)
            self.dropout = nn.Dropout(cfg.dropout_rnn)
            feat_dim = cfg.rnn_hidden
        self.head_logits = nn.Linear(feat_dim, cfg.num_classes)
        self.head_embed = nn.Linear(feat_dim, cfg.embed_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, (3, SPEC_HEIGHT, SPEC_WIDTH), "spectrogram")
        h = self.conv(x)
        if self.variant == "cnn":
            h = torch.relu(self.fc_hidden(h.flatten(1)))
            return self.dropout(h)
        seq = h.mean(dim=2).permute(0, 2, 1)  # (B, time, channels)
        out, _ = self.rnn(seq)
        return self.dropout(out[:, -1, :])

    def forward(self, x: torch.Tensor, output: str = "logits") -> torch.Tensor:
        feat = self.features(x)
        if output == "logits":
            return self.head_logits(feat)
        if output == "embedding":
            return self.head_embed(feat)
        raise ValueError(f"output must be 'logits' or 'embedding', got {output!r}")


class VideoNet(nn.Module):
    """Clip embedder: four 3D conv blocks with pools after the first three."""

    CHANNELS = (8, 16, 32, 64)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        in_ch = 3
        for i, out_ch in enumerate(self.CHANNELS):
            layers += [nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1),
                       nn.ReLU()]
            if i < 3:
                layers.append(nn.MaxPool3d(2))
            in_ch = out_ch
        self.conv = nn.Sequential(*layers)
        t, h, w = CLIP_FRAMES, FRAME_HEIGHT, FRAME_WIDTH
        for _ in range(3):
            t, h, w = t // 2, h // 2, w // 2
        self.grid = (t, h, w)
        self.fc_hidden = nn.Linear(self.CHANNELS[-1] * t * h * w, 256)
        self.dropout = nn.Dropout(cfg.dropout_fc)
        self.head_embed = nn.Linear(256, cfg.embed_dim)

    def forward(self, x: torch.Tensor, output: str = "embedding") -> torch.Tensor:
        if output not in ("embedding", "features"):
            raise ValueError(f"output must be 'features' or 'embedding', "
                             f"got {output!r}")
        _check_input(x, (3, CLIP_FRAMES, FRAME_HEIGHT, FRAME_WIDTH), "clip")
        h = self.conv(x)
        h = torch.relu(self.fc_hidden(h.flatten(1)))
        if output == "features":
            return h
        return self.head_embed(self.dropout(h))


class TwoStreamNet(nn.Module):
    """Audio and video embeddings concatenated into one classifier layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.audio = AudioNet(cfg, variant=cfg.audio_variant)
        self.video = VideoNet(cfg)
        self.classifier = nn.Linear(2 * cfg.embed_dim, cfg.num_classes)

    def embeddings(self, spec: torch.Tensor, clip: torch.Tensor):
        if spec.shape[0] != clip.shape[0]:
            raise ShapeError(f"batch mismatch: {spec.shape[0]} spectrograms vs "
                             f"{clip.shape[0]} clips")
        za = self.audio(spec, output="embedding")
        zv = self.video(clip, output="embedding")
        return za, zv

    def forward(self, spec: torch.Tensor, clip: torch.Tensor) -> torch.Tensor:
        za, zv = self.embeddings(spec, clip)
        return self.classifier(torch.cat([za, zv], dim=1))


def build_model(cfg: ModelConfig, seed: int | None = None) -> nn.Module:
    """Construct the configured variant, optionally with seeded init."""
    if seed is not None:
        torch.manual_seed(seed)
    if cfg.variant == "two_stream":
        return TwoStreamNet(cfg)
    return AudioNet(cfg)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: nn.Module, path, cfg: ModelConfig,
                    iteration: int = 0, seed: int = 0,
                    extra: dict | None = None) -> None:
    """Write weights plus metadata into one versioned npz container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: tensor.detach().cpu().numpy()
              for name, tensor in model.state_dict().items()}
    meta = {"format_version": CHECKPOINT_VERSION, "config": cfg.to_dict(),
            "iteration": int(iteration), "seed": int(seed),
            "arrays": sorted(arrays)}
    if extra:
        meta["extra"] = extra
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, _meta_json=blob, **arrays)


def load_checkpoint(path):
    """Read a checkpoint back as (meta dict, {name: array})."""
    with open(path, "rb") as f:
        data = np.load(f, allow_pickle=False)
        arrays = {k: data[k] for k in data.files if k != "_meta_json"}
        blob = data["_meta_json"]
    meta = json.loads(bytes(blob.tobytes()).decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{meta.get('format_version')!r} in {path}")
    return meta, arrays


def restore_model(path) -> tuple:
    """Rebuild the checkpointed model; returns (model, meta)."""
    meta, arrays = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    model = build_model(cfg)
    state = {name: torch.tensor(arr) for name, arr in arrays.items()}
    model.load_state_dict(state)
    return model, meta
