"""Audio loading, resampling, cropping and log-Mel feature extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 16000
N_FFT = 2048
HOP_LENGTH = 512
N_MELS = 229
MEL_FMIN = 30.0
MEL_FMAX = 8000.0
SEGMENT_SAMPLES = 327_680
LOG_FLOOR = 1e-8


class InvalidInputError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (T, n_mels)
    hop_samples: int = HOP_LENGTH
    window_samples: int = N_FFT
    n_mels: int = N_MELS
    sample_rate: int = SAMPLE_RATE

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_samples

    @property
    def shape(self):
        return self.values.shape

    def replace_values(self, values: np.ndarray) -> "MelSpectrogram":
        return MelSpectrogram(values, self.hop_samples, self.window_samples, self.n_mels, self.sample_rate)


def load_wav(path: str | Path, target_rate: int | None = SAMPLE_RATE) -> AudioClip:
    """Read a PCM or float WAV file as a mono clip, optionally resampled.

    Integer PCM is scaled to [-1, 1); multichannel audio is averaged.
    """
    rate, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if info.min == 0:  # 8-bit unsigned
            data = (data.astype(np.float64) - (info.max + 1) / 2) / ((info.max + 1) / 2)
        else:
            data = data.astype(np.float64) / -float(info.min)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.size == 0:
        raise InvalidInputError(f"{path}: no samples")
    clip = AudioClip(data, int(rate))
    if target_rate is not None and clip.sample_rate != target_rate:
        clip = resample(clip, target_rate)
    return clip


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), clip.sample_rate, pcm)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise InvalidInputError(f"target_rate must be positive, got {target_rate}")
    if len(clip) == 0:
        raise InvalidInputError("cannot resample an empty clip")
    if clip.sample_rate == target_rate:
        return AudioClip(clip.samples.copy(), target_rate)
    ratio = Fraction(target_rate, clip.sample_rate)
    out = signal.resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(out, target_rate)


def crop_segment(clip: AudioClip, length_samples: int, seed: int | np.random.Generator | None = None) -> AudioClip:
    """Take a random contiguous window of ``length_samples``; short clips are zero-padded at the end."""
    if length_samples < 1:
        raise InvalidInputError("length_samples must be >= 1")
    start = random_offset(len(clip), length_samples, seed)
    return AudioClip(_slice_padded(clip.samples, start, length_samples), clip.sample_rate)


def random_offset(n_samples: int, length_samples: int, seed: int | np.random.Generator | None = None) -> int:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    max_start = n_samples - length_samples
    if max_start <= 0:
        return 0
    return int(rng.integers(0, max_start + 1))


def _slice_padded(samples: np.ndarray, start: int, length: int) -> np.ndarray:
    out = samples[start:start + length]
    if len(out) < length:
        out = np.concatenate([out, np.zeros(length - len(out), dtype=samples.dtype)])
    return out


def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """Triangular HTK-scale filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


_FILTERBANK_CACHE: dict[tuple, np.ndarray] = {}


def _cached_filterbank(sample_rate, n_fft, n_mels):
    key = (sample_rate, n_fft, n_mels)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank(sample_rate, n_fft, n_mels, MEL_FMIN, min(MEL_FMAX, sample_rate / 2))
    return _FILTERBANK_CACHE[key]


def n_frames(n_samples: int, hop_length: int = HOP_LENGTH) -> int:
    return math.ceil(n_samples / hop_length)


def mel_spectrogram(clip: AudioClip, n_fft: int = N_FFT, hop_length: int = HOP_LENGTH,
                    n_mels: int = N_MELS) -> MelSpectrogram:
    """Magnitude Mel spectrogram with a periodic Hann window and reflect-padded centred frames.

    Frame ``t`` is centred on sample ``t * hop_length`` and there are
    ``ceil(len / hop_length)`` frames, so 327,680 samples give 640 frames.
    """
    x = clip.samples
    if len(x) < n_fft:
        raise InvalidInputError(f"clip of {len(x)} samples is shorter than one window ({n_fft})")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("clip contains non-finite samples")
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    count = n_frames(len(x), hop_length)
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop_length][:count]
    window = signal.get_window("hann", n_fft, fftbins=True)
    magnitude = np.abs(np.fft.rfft(frames * window, axis=-1))
    mel = magnitude @ _cached_filterbank(clip.sample_rate, n_fft, n_mels).T
    return MelSpectrogram(mel, hop_length, n_fft, n_mels, clip.sample_rate)


def log_normalize(spec: MelSpectrogram, floor: float = LOG_FLOOR) -> MelSpectrogram:
    """Natural log then min-max scaling of the whole matrix into [0, 1].

    A constant matrix maps to all zeros.
    """
    values = np.asarray(spec.values, dtype=np.float64)
    if np.any(values < 0):
        raise InvalidInputError("magnitudes must be non-negative")
    logged = np.log(values + floor)
    lo, hi = logged.min(), logged.max()
    if hi == lo:
        return spec.replace_values(np.zeros_like(logged))
    return spec.replace_values((logged - lo) / (hi - lo))


def features(clip: AudioClip, n_mels: int = N_MELS) -> np.ndarray:
    """Model-ready (T, n_mels) float32 array for a 16 kHz clip."""
    return log_normalize(mel_spectrogram(clip, n_mels=n_mels)).values.astype(np.float32)
