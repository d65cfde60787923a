"""Frame-wise, note-wise and note-with-offset precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .labels import NoteEvent

ONSET_TOLERANCE = 0.05
OFFSET_RATIO = 0.2
OFFSET_MIN_TOLERANCE = 0.05
# distances are rounded before comparing so that e.g. 0.35 - 0.30 counts as 0.05
_DECIMALS = 4


@dataclass(frozen=True)
class ScoreTriple:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, n_pred: int, n_ref: int) -> "ScoreTriple":
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)

    def as_tuple(self):
        return (self.precision, self.recall, self.f1)


@dataclass
class MatchingResult:
    pairs: list[tuple[int, int]]  # (reference index, prediction index)
    n_ref: int
    n_pred: int

    @property
    def unmatched_ref(self) -> int:
        return self.n_ref - len(self.pairs)

    @property
    def unmatched_pred(self) -> int:
        return self.n_pred - len(self.pairs)


def frame_metrics(pred: np.ndarray, ref: np.ndarray) -> ScoreTriple:
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    tp = int(np.count_nonzero(pred & ref))
    return ScoreTriple.from_counts(tp, int(pred.sum()), int(ref.sum()))


def admissible_pairs(ref: Sequence[NoteEvent], pred: Sequence[NoteEvent], onset_tol: float = ONSET_TOLERANCE,
                     offset_ratio: float | None = None,
                     offset_min_tol: float = OFFSET_MIN_TOLERANCE) -> np.ndarray:
    """Boolean (len(ref), len(pred)) matrix of pairs allowed to match.

    ``offset_ratio=None`` ignores offsets.
    """
    if not ref or not pred:
        return np.zeros((len(ref), len(pred)), dtype=bool)
    r = np.asarray(ref, dtype=np.float64)
    e = np.asarray(pred, dtype=np.float64)
    ok = r[:, None, 2] == e[None, :, 2]
    ok &= np.round(np.abs(r[:, None, 0] - e[None, :, 0]), _DECIMALS) <= onset_tol
    if offset_ratio is not None:
        tol = np.maximum(offset_min_tol, offset_ratio * (r[:, 1] - r[:, 0]))
        ok &= np.round(np.abs(r[:, None, 1] - e[None, :, 1]), _DECIMALS) <= tol[:, None]
    return ok


def match_notes(ref: Sequence[NoteEvent], pred: Sequence[NoteEvent], onset_tol: float = ONSET_TOLERANCE,
                offset_ratio: float | None = None,
                offset_min_tol: float = OFFSET_MIN_TOLERANCE) -> MatchingResult:
    """Maximum-cardinality one-to-one matching under the tolerance rules (Hopcroft-Karp)."""
    ok = admissible_pairs(ref, pred, onset_tol, offset_ratio, offset_min_tol)
    if not ok.any():
        return MatchingResult([], len(ref), len(pred))
    assignment = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
    pairs = [(i, int(j)) for i, j in enumerate(assignment) if j >= 0]
    return MatchingResult(pairs, len(ref), len(pred))


def note_metrics(pred: Sequence[NoteEvent], ref: Sequence[NoteEvent],
                 onset_tol: float = ONSET_TOLERANCE) -> ScoreTriple:
    matching = match_notes(list(ref), list(pred), onset_tol)
    return ScoreTriple.from_counts(len(matching.pairs), len(pred), len(ref))


def note_offset_metrics(pred: Sequence[NoteEvent], ref: Sequence[NoteEvent], onset_tol: float = ONSET_TOLERANCE,
                        offset_ratio: float = OFFSET_RATIO,
                        offset_min_tol: float = OFFSET_MIN_TOLERANCE) -> ScoreTriple:
    matching = match_notes(list(ref), list(pred), onset_tol, offset_ratio, offset_min_tol)
    return ScoreTriple.from_counts(len(matching.pairs), len(pred), len(ref))


METRIC_FAMILIES = ("frame", "note", "note_offset")


def clip_scores(pred_notes, ref_notes, pred_roll=None, ref_roll=None) -> dict[str, ScoreTriple]:
    """All three metric families for one clip; frame scores need both rolls."""
    scores = {
        "note": note_metrics(pred_notes, ref_notes),
        "note_offset": note_offset_metrics(pred_notes, ref_notes),
    }
    if pred_roll is not None and ref_roll is not None:
        scores["frame"] = frame_metrics(pred_roll, ref_roll)
    return scores


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float

    def format(self, percent: bool = True) -> str:
        k = 100.0 if percent else 1.0
        return f"{self.mean * k:.1f} ± {self.std * k:.1f}"


def corpus_report(per_clip: Iterable[Mapping[str, ScoreTriple]]) -> dict[str, dict[str, Summary]]:
    """Unweighted mean and population std of P/R/F1 across clips, per metric family."""
    per_clip = list(per_clip)
    if not per_clip:
        raise ValueError("corpus_report needs at least one clip")
    report = {}
    for family in METRIC_FAMILIES:
        rows = [c[family].as_tuple() for c in per_clip if family in c]
        if not rows:
            continue
        arr = np.asarray(rows, dtype=np.float64)
        mean, std = arr.mean(axis=0), arr.std(axis=0)
        report[family] = {name: Summary(float(mean[i]), float(std[i]))
                          for i, name in enumerate(("precision", "recall", "f1"))}
    return report


_FAMILY_TITLES = {"frame": "Frame", "note": "Note", "note_offset": "Note w/ offset"}


def format_report(report: Mapping[str, Mapping[str, Summary]]) -> str:
    """Render a report as a metric x P/R/F1 table with percentages to one decimal."""
    lines = ["metric\tP\tR\tF1"]
    for family in METRIC_FAMILIES:
        if family not in report:
            continue
        row = report[family]
        lines.append("\t".join([_FAMILY_TITLES[family]] + [row[k].format() for k in ("precision", "recall", "f1")]))
    return "\n".join(lines)
