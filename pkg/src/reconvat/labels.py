"""Note annotations <-> frame-level piano rolls."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

MIN_MIDI = 21
MAX_MIDI = 108
N_PITCHES = MAX_MIDI - MIN_MIDI + 1
FRAME_RATE = 16000 / 512
ONSET_WIDTH = 2
# slack for float round-off when converting seconds to frame indices
_FRAME_EPS = 1e-6


class InvalidLabelError(ValueError):
    pass


class NoteEvent(NamedTuple):
    onset: float
    offset: float
    pitch: int

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def validate_note(note: NoteEvent) -> None:
    if not MIN_MIDI <= note.pitch <= MAX_MIDI:
        raise InvalidLabelError(f"pitch outside [{MIN_MIDI}, {MAX_MIDI}]: {note}")
    if not note.offset > note.onset:
        raise InvalidLabelError(f"offset must be after onset: {note}")
    if note.onset < 0:
        raise InvalidLabelError(f"negative onset: {note}")


@dataclass
class Rolls:
    frame: np.ndarray  # (T, 88) uint8
    onset: np.ndarray  # (T, 88) uint8
    frame_rate: float = FRAME_RATE
    onset_width: int = ONSET_WIDTH


def _start_frame(t: float, frame_rate: float) -> int:
    # first frame whose start time is >= t
    return math.ceil(t * frame_rate - _FRAME_EPS)


def notes_to_rolls(notes: Iterable[NoteEvent], n_frames: int, frame_rate: float = FRAME_RATE,
                   onset_width: int = ONSET_WIDTH) -> Rolls:
    """Rasterise notes into frame and onset rolls of shape (n_frames, 88).

    A note covers every frame whose start time lies in [onset, offset). Notes
    too short to cover any frame start still get their first frame. The onset
    roll marks ``onset_width`` frames from each note's first frame.
    """
    frame = np.zeros((n_frames, N_PITCHES), dtype=np.uint8)
    onset = np.zeros((n_frames, N_PITCHES), dtype=np.uint8)
    for note in notes:
        validate_note(note)
        col = note.pitch - MIN_MIDI
        start = _start_frame(note.onset, frame_rate)
        end = max(_start_frame(note.offset, frame_rate), start + 1)
        if start >= n_frames:
            continue
        frame[start:min(end, n_frames), col] = 1
        onset[start:min(start + onset_width, end, n_frames), col] = 1
    return Rolls(frame, onset, frame_rate, onset_width)


def window_rolls(notes: Iterable[NoteEvent], start_time: float, n_frames: int, frame_rate: float = FRAME_RATE,
                 onset_width: int = ONSET_WIDTH) -> Rolls:
    """Rolls for the window [start_time, start_time + n_frames / frame_rate).

    Notes already sounding when the window opens keep their frames but get no onset mark.
    """
    end_time = start_time + n_frames / frame_rate
    inside, carried = [], []
    for note in notes:
        if note.offset <= start_time or note.onset >= end_time:
            continue
        shifted = NoteEvent(max(note.onset - start_time, 0.0), note.offset - start_time, note.pitch)
        if note.onset < start_time - _FRAME_EPS / frame_rate:
            carried.append(shifted)
        else:
            inside.append(shifted)
    rolls = notes_to_rolls(inside, n_frames, frame_rate, onset_width)
    held = notes_to_rolls(carried, n_frames, frame_rate, onset_width)
    rolls.frame |= held.frame
    return rolls


def binarize(post: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(post) > threshold).astype(np.uint8)


def rolls_to_notes(frame_roll: np.ndarray, onset_roll: np.ndarray | None = None,
                   frame_rate: float = FRAME_RATE) -> list[NoteEvent]:
    """Decode binary rolls into notes.

    Without an onset roll every maximal run of active frames is a note. With
    one, a run is kept only if its first frame carries an onset mark, and a
    fresh onset (rising edge) inside a run starts a new note there.
    """
    frame_roll = np.asarray(frame_roll).astype(bool)
    if onset_roll is not None:
        onset_roll = np.asarray(onset_roll).astype(bool)
        if onset_roll.shape != frame_roll.shape:
            raise ValueError(f"onset roll shape {onset_roll.shape} != frame roll shape {frame_roll.shape}")
    notes = []
    for col in range(frame_roll.shape[1]):
        active = frame_roll[:, col]
        if not active.any():
            continue
        padded = np.concatenate([[False], active, [False]])
        changes = np.flatnonzero(padded[1:] != padded[:-1])
        for run_start, run_end in zip(changes[::2], changes[1::2]):
            if onset_roll is None:
                segments = [(run_start, run_end)]
            else:
                on = onset_roll[run_start:run_end, col]
                prev = np.concatenate([[False], on[:-1]])
                # frames before the first rising edge have no onset and are dropped
                bounds = (np.flatnonzero(on & ~prev) + run_start).tolist() + [run_end]
                segments = list(zip(bounds[:-1], bounds[1:]))
            for s, e in segments:
                notes.append(NoteEvent(int(s) / frame_rate, int(e) / frame_rate, col + MIN_MIDI))
    notes.sort()
    return notes


def read_label_tsv(path: str | Path) -> list[NoteEvent]:
    """Read ``onset\\toffset\\tpitch`` rows; the header line is optional."""
    notes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if fields[0] == "onset":
            continue
        if len(fields) < 3:
            raise InvalidLabelError(f"{path}:{lineno}: expected 3 columns, got {len(fields)}")
        note = NoteEvent(float(fields[0]), float(fields[1]), int(round(float(fields[2]))))
        try:
            validate_note(note)
        except InvalidLabelError as err:
            raise InvalidLabelError(f"{path}:{lineno}: {err}") from None
        notes.append(note)
    return notes


def write_label_tsv(path: str | Path, notes: Iterable[NoteEvent]) -> None:
    lines = ["onset\toffset\tpitch"]
    lines += [f"{float(n.onset)!r}\t{float(n.offset)!r}\t{int(n.pitch)}" for n in notes]
    Path(path).write_text("\n".join(lines) + "\n")


def durations_to_offsets(rows: Iterable[tuple[float, float, int]]) -> list[NoteEvent]:
    """Convert (onset, duration, pitch) rows into notes with absolute offsets."""
    return [NoteEvent(float(on), float(on) + float(dur), int(p)) for on, dur, p in rows]
