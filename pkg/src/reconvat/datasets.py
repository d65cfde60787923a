"""Corpus manifests, directory scanning, synthetic corpora and batch sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import audio
from .audio import AudioClip, SAMPLE_RATE
from .labels import MIN_MIDI, MAX_MIDI, NoteEvent, Rolls, read_label_tsv, window_rolls, write_label_tsv

log = logging.getLogger(__name__)

AUDIO_SUFFIXES = (".wav",)
SPLIT_TAGS = ("train", "validation", "test")


class CorpusError(RuntimeError):
    pass


@dataclass
class CorpusManifest:
    labelled: list[tuple[Path, Path]] = field(default_factory=list)
    unlabelled: list[Path] = field(default_factory=list)
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        self.labelled = [(Path(a), Path(b)) for a, b in self.labelled]
        self.unlabelled = [Path(a) for a in self.unlabelled]
        overlap = {a for a, _ in self.labelled} & set(self.unlabelled)
        if overlap:
            raise CorpusError(f"paths in both labelled and unlabelled pools: {sorted(map(str, overlap))}")

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.labelled), len(self.unlabelled)

    def audio_paths(self) -> list[Path]:
        return [a for a, _ in self.labelled] + list(self.unlabelled)


def write_manifest(path: str | Path, manifest: CorpusManifest) -> None:
    lines = [f"# split: {manifest.split_tag}", "role\taudio_path\tlabel_path"]
    lines += [f"labelled\t{a}\t{b}" for a, b in manifest.labelled]
    lines += [f"unlabelled\t{a}\t" for a in manifest.unlabelled]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> CorpusManifest:
    """Read a manifest; relative paths are resolved against the manifest's directory."""
    path = Path(path)
    base = path.parent
    split, labelled, unlabelled = "train", [], []
    for line in path.read_text().splitlines():
        if line.startswith("# split:"):
            split = line.split(":", 1)[1].strip()
            continue
        if not line.strip() or line.startswith("#") or line.startswith("role\t"):
            continue
        role, audio_path, label_path = (line.split("\t") + ["", ""])[:3]
        if role == "labelled":
            labelled.append((base / audio_path, base / label_path))
        elif role == "unlabelled":
            unlabelled.append(base / audio_path)
        else:
            raise CorpusError(f"{path}: unknown role {role!r}")
    return CorpusManifest(labelled, unlabelled, split)


def read_exclusion_list(path: str | Path | None) -> set[str]:
    if path is None:
        return set()
    return {line.strip() for line in Path(path).read_text().splitlines() if line.strip() and not line.startswith("#")}


def _excluded(path: Path, exclude: set[str]) -> bool:
    return path.name in exclude or path.stem in exclude


def _readable(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            fh.read(12)
        return True
    except OSError as err:
        log.warning("skipping unreadable file %s: %s", path, err)
        return False


def scan_corpus(root: str | Path, layout: str = "maps_like", split: str = "train",
                exclude: set[str] | Sequence[str] = ()) -> CorpusManifest:
    """Pair audio files with their tsv labels.

    ``maps_like``: audio anywhere under ``root`` with a sibling ``<stem>.tsv``.
    ``musicnet_like``: audio in ``root/<split>_data`` with labels in
    ``root/<split>_labels/<stem>.tsv``. Audio without a label goes to the
    unlabelled pool. Files named in ``exclude`` (by name or stem) are skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root does not exist: {root}")
    exclude = set(exclude)
    if layout == "maps_like":
        audio_files = sorted(p for p in root.rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES)

        def label_for(p: Path) -> Path:
            return p.with_suffix(".tsv")
    elif layout == "musicnet_like":
        prefix = {"validation": "train"}.get(split, split)
        data_dir, label_dir = root / f"{prefix}_data", root / f"{prefix}_labels"
        audio_files = sorted(p for p in data_dir.glob("*") if p.suffix.lower() in AUDIO_SUFFIXES) \
            if data_dir.is_dir() else []

        def label_for(p: Path) -> Path:
            return label_dir / f"{p.stem}.tsv"
    else:
        raise ValueError(f"unknown layout {layout!r}")

    labelled, unlabelled = [], []
    for p in audio_files:
        if _excluded(p, exclude) or not _readable(p):
            continue
        lab = label_for(p)
        if lab.is_file() and _readable(lab):
            labelled.append((p, lab))
        else:
            unlabelled.append(p)
    if not labelled and not unlabelled:
        raise CorpusError(f"no audio found under {root} ({layout})")
    return CorpusManifest(labelled, unlabelled, split)


@dataclass
class Clip:
    """An in-memory 16 kHz clip with optional ground-truth notes."""

    audio: AudioClip
    notes: Optional[list[NoteEvent]] = None
    path: Optional[Path] = None
    split: str = "train"

    @property
    def labelled(self) -> bool:
        return self.notes is not None


def load_clips(manifest: CorpusManifest, include_unlabelled: bool = True) -> tuple[list[Clip], list[Clip]]:
    labelled = [Clip(audio.load_wav(a), read_label_tsv(b), a, manifest.split_tag) for a, b in manifest.labelled]
    unlabelled = []
    if include_unlabelled:
        unlabelled = [Clip(audio.load_wav(a), None, a, manifest.split_tag) for a in manifest.unlabelled]
    return labelled, unlabelled


# -- synthetic corpus -----------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_clips: int = 10
    notes_per_clip: tuple[int, int] = (4, 8)
    pitch_range: tuple[int, int] = (48, 72)
    duration: float = 4.0
    polyphony: int = 2
    seed: int = 0
    timbre: str = "sine+harmonics"
    note_length: tuple[float, float] = (0.2, 1.0)
    sample_rate: int = SAMPLE_RATE
    hop_length: int = audio.HOP_LENGTH

    def __post_init__(self):
        self.notes_per_clip = tuple(self.notes_per_clip)
        self.pitch_range = tuple(self.pitch_range)
        self.note_length = tuple(self.note_length)
        lo, hi = self.pitch_range
        if not MIN_MIDI <= lo <= hi <= MAX_MIDI:
            raise ValueError(f"pitch_range must lie in [{MIN_MIDI}, {MAX_MIDI}]")
        if self.timbre not in ("sine", "sine+harmonics"):
            raise ValueError(f"unknown timbre {self.timbre!r}")
        if self.polyphony < 1:
            raise ValueError("polyphony must be >= 1")


def midi_to_hz(pitch) -> np.ndarray:
    return 440.0 * 2.0 ** ((np.asarray(pitch, dtype=np.float64) - 69) / 12)


def render_notes(notes: Sequence[NoteEvent], duration: float, sample_rate: int = SAMPLE_RATE,
                 timbre: str = "sine+harmonics", ramp: float = 0.01, peak: float = 0.5) -> AudioClip:
    """Additive synthesis: each note is a sum of harmonics with 1/k amplitudes and linear attack/release ramps."""
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    harmonics = 3 if timbre == "sine+harmonics" else 1
    for note in notes:
        start = int(round(note.onset * sample_rate))
        stop = min(int(round(note.offset * sample_rate)), n)
        if stop <= start:
            continue
        t = np.arange(stop - start) / sample_rate
        f0 = float(midi_to_hz(note.pitch))
        wave = np.zeros_like(t)
        for k in range(1, harmonics + 1):
            if k * f0 < sample_rate / 2:
                wave += np.sin(2 * np.pi * k * f0 * t) / k
        ramp_len = min(int(ramp * sample_rate), len(t) // 2)
        if ramp_len > 0:
            env = np.ones_like(t)
            env[:ramp_len] = np.linspace(0.0, 1.0, ramp_len, endpoint=False)
            env[-ramp_len:] = np.linspace(1.0, 0.0, ramp_len, endpoint=False)
            wave *= env
        out[start:stop] += wave
    top = np.abs(out).max()
    if top > 0:
        out *= peak / top
    return AudioClip(out, sample_rate)


def random_notes(spec: SyntheticSpec, rng: np.random.Generator) -> list[NoteEvent]:
    """Frame-aligned notes with bounded polyphony and no same-pitch overlap."""
    frame = spec.hop_length / spec.sample_rate
    frame_rate = spec.sample_rate / spec.hop_length
    total = int(spec.duration / frame)
    lo_len = max(1, int(round(spec.note_length[0] / frame)))
    hi_len = max(lo_len, int(round(spec.note_length[1] / frame)))
    target = int(rng.integers(spec.notes_per_clip[0], spec.notes_per_clip[1] + 1))
    active = np.zeros(total, dtype=int)
    busy = {}
    notes = []
    for _ in range(target * 20):
        if len(notes) >= target:
            break
        length = int(rng.integers(lo_len, hi_len + 1))
        if length >= total:
            length = total - 1
        start = int(rng.integers(0, total - length))
        pitch = int(rng.integers(spec.pitch_range[0], spec.pitch_range[1] + 1))
        span = slice(start, start + length)
        if active[span].max() >= spec.polyphony:
            continue
        mask = busy.setdefault(pitch, np.zeros(total, dtype=bool))
        if mask[span].any():
            continue
        mask[span] = True
        active[span] += 1
        notes.append(NoteEvent(start / frame_rate, (start + length) / frame_rate, pitch))
    return sorted(notes)


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir: str | Path, prefix: str = "clip",
                              labelled: Optional[Sequence[bool]] = None,
                              split_tag: str = "train") -> CorpusManifest:
    """Write ``spec.n_clips`` WAV files with exact tsv labels and a manifest.

    Every clip gets a label file; ``labelled`` decides which ones the manifest
    lists as labelled (default: all).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    if labelled is None:
        labelled = [True] * spec.n_clips
    manifest = CorpusManifest(split_tag=split_tag)
    width = max(3, len(str(spec.n_clips - 1)))
    for i in range(spec.n_clips):
        notes = random_notes(spec, rng)
        clip = render_notes(notes, spec.duration, spec.sample_rate, spec.timbre)
        wav = out_dir / f"{prefix}{i:0{width}d}.wav"
        tsv = wav.with_suffix(".tsv")
        audio.write_wav(wav, clip)
        write_label_tsv(tsv, notes)
        if labelled[i]:
            manifest.labelled.append((wav, tsv))
        else:
            manifest.unlabelled.append(wav)
    write_manifest(out_dir / f"{prefix}_manifest.tsv", _relative(manifest, out_dir))
    return manifest


def _relative(manifest: CorpusManifest, base: Path) -> CorpusManifest:
    def rel(p: Path) -> Path:
        try:
            return p.relative_to(base)
        except ValueError:
            return p.resolve()
    return CorpusManifest([(rel(a), rel(b)) for a, b in manifest.labelled],
                          [rel(a) for a in manifest.unlabelled], manifest.split_tag)


# -- sampling -------------------------------------------------------------------------

@dataclass
class BatchSpec:
    n_labelled: int = 8
    n_unlabelled: int = 8

    def __post_init__(self):
        if self.n_labelled < 1:
            raise ValueError("n_labelled must be >= 1")
        if self.n_unlabelled < 0:
            raise ValueError("n_unlabelled must be >= 0")


@dataclass
class Batch:
    spec: np.ndarray  # (B, T, n_mels) float32
    frame: Optional[np.ndarray] = None  # (B, T, 88)
    onset: Optional[np.ndarray] = None
    paths: list = field(default_factory=list)

    def __len__(self):
        return self.spec.shape[0]


def segment_example(clip: Clip, segment_samples: int, rng: np.random.Generator, n_mels: int = audio.N_MELS,
                    onset_width: int = 2):
    """Random crop of a clip -> (features, rolls or None)."""
    start = audio.random_offset(len(clip.audio), segment_samples, rng)
    piece = AudioClip(audio._slice_padded(clip.audio.samples, start, segment_samples), clip.audio.sample_rate)
    feats = audio.features(piece, n_mels)
    rolls: Optional[Rolls] = None
    if clip.notes is not None:
        frame_rate = clip.audio.sample_rate / audio.HOP_LENGTH
        rolls = window_rolls(clip.notes, start / clip.audio.sample_rate, feats.shape[0], frame_rate, onset_width)
    return feats, rolls


class BatchSampler:
    """Draws independent labelled and unlabelled batches of random crops.

    Clips are picked uniformly with replacement, so a one-clip pool serves any
    batch size. The generator state lives on ``self.rng`` and is checkpointed.
    """

    def __init__(self, labelled: Sequence[Clip], unlabelled: Sequence[Clip], batch_spec: BatchSpec,
                 segment_samples: int = audio.SEGMENT_SAMPLES, seed: int | np.random.Generator = 0,
                 n_mels: int = audio.N_MELS, onset_width: int = 2, allow_test: bool = False):
        if batch_spec.n_labelled > 0 and not labelled:
            raise CorpusError("labelled pool is empty")
        if batch_spec.n_unlabelled > 0 and not unlabelled:
            raise CorpusError("unlabelled pool is empty but n_unlabelled > 0")
        if not allow_test:
            leaked = [c.path for c in list(labelled) + list(unlabelled) if c.split == "test"]
            if leaked:
                raise CorpusError(f"test clips in a training pool: {leaked}")
        self.labelled = list(labelled)
        self.unlabelled = list(unlabelled)
        self.batch_spec = batch_spec
        self.segment_samples = segment_samples
        self.n_mels = n_mels
        self.onset_width = onset_width
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def _draw(self, pool: Sequence[Clip], n: int, with_labels: bool) -> Batch:
        feats, frames, onsets, paths = [], [], [], []
        for _ in range(n):
            clip = pool[int(self.rng.integers(len(pool)))]
            x, rolls = segment_example(clip, self.segment_samples, self.rng, self.n_mels, self.onset_width)
            feats.append(x)
            paths.append(clip.path)
            if with_labels:
                frames.append(rolls.frame)
                onsets.append(rolls.onset)
        n_frames = audio.n_frames(self.segment_samples)
        spec = np.stack(feats) if feats else np.zeros((0, n_frames, self.n_mels), np.float32)
        if not with_labels:
            return Batch(spec, paths=paths)
        return Batch(spec, np.stack(frames).astype(np.float32), np.stack(onsets).astype(np.float32), paths)

    def next_batches(self) -> tuple[Batch, Batch]:
        labelled = self._draw(self.labelled, self.batch_spec.n_labelled, True)
        unlabelled = self._draw(self.unlabelled, self.batch_spec.n_unlabelled, False)
        return labelled, unlabelled

    def __iter__(self) -> Iterator[tuple[Batch, Batch]]:
        while True:
            yield self.next_batches()


def batch_sampler(labelled: Sequence[Clip], unlabelled: Sequence[Clip], batch_spec: BatchSpec,
                  seed: int = 0, **kwargs) -> Iterator[tuple[Batch, Batch]]:
    return iter(BatchSampler(labelled, unlabelled, batch_spec, seed=seed, **kwargs))
