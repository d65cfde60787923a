"""U-net transcriber with onset/frame fusion by relative local self-attention, and the reconstructor.

All tensors are batch-first: spectrograms are (B, T, n_mels), rolls (B, T, 88).
The U-nets only pool along frequency so every output frame lines up with an
input frame. There is no dropout anywhere; it destabilises the adversarial
gradient. Convolutions are batch-normalised; in eval mode that is a fixed
per-channel affine map, so each output frame depends only on nearby input
frames.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import InvalidInputError, N_MELS
from .labels import N_PITCHES


@dataclass
class TranscriberConfig:
    depth: int = 4
    base_channels: int = 16
    attention_window: int = 31
    two_channel: bool = True
    n_mels: int = N_MELS
    n_pitches: int = N_PITCHES
    recon_depth: int = 2

    def __post_init__(self):
        if self.depth < 1 or self.recon_depth < 1:
            raise ValueError("depth must be >= 1")
        if self.attention_window < 1 or self.attention_window % 2 == 0:
            raise ValueError(f"attention_window must be odd, got {self.attention_window}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelOutput:
    onset: Optional[torch.Tensor]  # (B, T, 88) probabilities, None for one-channel models
    frame: torch.Tensor  # (B, T, 88) unbounded features
    post: torch.Tensor  # (B, T, 88) posteriorgram

    def probabilities(self, include_onset: bool) -> dict[str, torch.Tensor]:
        """Probability heads entering the BCE sums."""
        heads = {"post": self.post}
        if include_onset:
            if self.onset is None:
                raise ValueError("model has no onset head")
            heads = {"onset": self.onset, "post": self.post}
        return heads

    def detach(self) -> "ModelOutput":
        return ModelOutput(None if self.onset is None else self.onset.detach(), self.frame.detach(),
                           self.post.detach())


def _conv(c_in, c_out, stride=(1, 1)):
    return nn.Sequential(nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1), nn.BatchNorm2d(c_out))


@contextmanager
def frozen_batch_stats(module: nn.Module):
    """Normalise with batch statistics without updating the running estimates."""
    norms = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.track_running_stats for m in norms]
    for m in norms:
        m.track_running_stats = False
    try:
        yield module
    finally:
        for m, flag in zip(norms, saved):
            m.track_running_stats = flag


class UNet(nn.Module):
    """Encoder/decoder over (time, frequency) that pools only along frequency.

    Each level has a 3x3 conv and a strided 3x3 conv (each batch-normalised,
    SiLU-activated); the decoder upsamples
    with a (1, 2) transposed conv and merges the skip with a 3x3 conv. Along
    time this gives a receptive radius of ``3 * depth + 1`` frames.
    """

    def __init__(self, in_channels: int, out_channels: int, depth: int, base_channels: int):
        super().__init__()
        widths = [base_channels * 2 ** i for i in range(depth)]
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.encoders.append(_conv(c, w))
            self.downs.append(_conv(w, w, stride=(1, 2)))
            c = w
        self.bottleneck = _conv(c, 2 * c)
        c = 2 * c
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(c, w, kernel_size=(1, 2), stride=(1, 2)))
            self.decoders.append(_conv(2 * w, w))
            c = w
        self.head = nn.Conv2d(c, out_channels, kernel_size=1)

    def forward(self, x):
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = F.silu(enc(x))
            skips.append(x)
            x = F.silu(down(x))
        x = F.silu(self.bottleneck(x))
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = up(x)[..., :skip.shape[-1]]
            if x.shape[-1] < skip.shape[-1]:
                x = F.pad(x, (0, skip.shape[-1] - x.shape[-1]))
            x = F.silu(dec(torch.cat([x, skip], dim=1)))
        return self.head(x)


class RelativeLocalAttention(nn.Module):
    """Single-head self-attention over a sliding window of ``window`` frames.

    Keys and values are offset by learned embeddings of the relative position
    (Shaw et al.); positions past either end of the sequence are masked out.
    """

    def __init__(self, in_dim: int, dim: int, window: int):
        super().__init__()
        self.window = window
        self.radius = window // 2
        self.query = nn.Linear(in_dim, dim)
        self.key = nn.Linear(in_dim, dim)
        self.value = nn.Linear(in_dim, dim)
        self.rel_key = nn.Parameter(torch.randn(window, dim) / math.sqrt(dim))
        self.rel_value = nn.Parameter(torch.randn(window, dim) / math.sqrt(dim))
        self.out = nn.Linear(dim, dim)

    def _windows(self, x):
        # (B, T, D) -> (B, T, window, D)
        x = F.pad(x, (0, 0, self.radius, self.radius))
        return x.unfold(1, self.window, 1).transpose(2, 3)

    def forward(self, x):
        T = x.shape[1]
        q = self.query(x)
        k = self._windows(self.key(x)) + self.rel_key
        v = self._windows(self.value(x)) + self.rel_value
        scores = torch.einsum("btd,btwd->btw", q, k) / math.sqrt(q.shape[-1])
        pos = torch.arange(T, device=x.device)[:, None] + torch.arange(self.window, device=x.device) - self.radius
        valid = (pos >= 0) & (pos < T)
        scores = scores.masked_fill(~valid, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        return self.out(torch.einsum("btw,btwd->btd", weights, v))


def _check_input(x: torch.Tensor, width: int, name: str):
    if x.dim() != 3 or x.shape[-1] != width:
        raise InvalidInputError(f"{name} must be (B, T, {width}), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{name} contains non-finite values")


class Transcriber(nn.Module):
    """Spectrogram -> (onset, frame features, posteriorgram)."""

    def __init__(self, config: TranscriberConfig):
        super().__init__()
        self.config = config
        channels = 2 if config.two_channel else 1
        self.unet = UNet(1, channels, config.depth, config.base_channels)
        self.frame_head = nn.Linear(config.n_mels, config.n_pitches)
        self.onset_head = nn.Linear(config.n_mels, config.n_pitches) if config.two_channel else None
        self.attention = RelativeLocalAttention(channels * config.n_pitches, config.n_pitches,
                                                config.attention_window)

    def forward(self, spec: torch.Tensor) -> ModelOutput:
        _check_input(spec, self.config.n_mels, "spectrogram")
        if spec.shape[1] < self.config.attention_window:
            raise InvalidInputError(f"need at least {self.config.attention_window} frames, got {spec.shape[1]}")
        maps = self.unet(spec.unsqueeze(1))
        frame = self.frame_head(maps[:, -1])
        if self.onset_head is not None:
            onset = torch.sigmoid(self.onset_head(maps[:, 0]))
            fused = torch.cat([onset, frame], dim=-1)
        else:
            onset = None
            fused = frame
        post = torch.sigmoid(self.attention(fused))
        return ModelOutput(onset, frame, post)

    # the reconstructed spectrogram goes through the very same network
    second_pass = forward

    def receptive_radius(self) -> int:
        return 3 * self.config.depth + 1 + self.config.attention_window // 2


class Reconstructor(nn.Module):
    """Posteriorgram (B, T, 88) -> spectrogram (B, T, n_mels) in [0, 1]."""

    def __init__(self, config: TranscriberConfig):
        super().__init__()
        self.config = config
        self.unet = UNet(1, 1, config.recon_depth, config.base_channels)
        self.head = nn.Linear(config.n_pitches, config.n_mels)

    def forward(self, post: torch.Tensor) -> torch.Tensor:
        _check_input(post, self.config.n_pitches, "posteriorgram")
        return torch.sigmoid(self.head(self.unet(post.unsqueeze(1))[:, 0]))


def build_models(config: TranscriberConfig, seed: int = 0, dtype=torch.float32):
    """Transcriber and reconstructor initialised deterministically from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        transcriber = Transcriber(config).to(dtype)
        reconstructor = Reconstructor(config).to(dtype)
    return transcriber, reconstructor


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
