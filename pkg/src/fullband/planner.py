"""Piano sketch planning: a phrase database, fitness/transition scores, Viterbi
selection over phrase slots and rule-based re-harmonisation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import cosine, recognize_chords, rhythm_density, track_function, voice_number
from .score import (STEPS_PER_BAR, STEPS_PER_BEAT, ChordSymbol, LeadSheet, NoteEvent, Piece, Track,
                    slice_track, to_clips, track_from_dict, track_to_dict)

DELTA = 0.3
GAMMA = 0.7
RHYTHM_WEIGHT = 0.5
CHORD_WEIGHT = 0.5
CHORD_IOU_MIN = 0.5
PHRASE_LENGTHS = (4, 8, 16)
TIE_TOL = 1e-12
DB_FORMAT = "fullband-phrase-db"


class PlannerError(ValueError):
    pass


@dataclass(frozen=True)
class PlannerWeights:
    delta: float = DELTA
    gamma: float = GAMMA
    rhythm: float = RHYTHM_WEIGHT
    chord: float = CHORD_WEIGHT

    def __post_init__(self):
        if abs(self.delta + self.gamma - 1.0) > 1e-9:
            raise PlannerError("delta + gamma must equal 1")


def onset_grid(melody: Track, bars: int, first_bar: int = 0) -> np.ndarray:
    """(bars, 16) binary grid of melody onsets, bar-relative."""
    grid = np.zeros((bars, STEPS_PER_BAR), dtype=np.uint8)
    lo = first_bar * STEPS_PER_BAR
    for n in melody.notes:
        rel = n.onset - lo
        if 0 <= rel < bars * STEPS_PER_BAR:
            grid[rel // STEPS_PER_BAR, rel % STEPS_PER_BAR] = 1
    return grid


@dataclass(frozen=True)
class PhraseQuery:
    label: str
    start_bar: int
    length: int
    melody_onsets: np.ndarray   # (length, 16)
    chords: tuple[ChordSymbol, ...]


def query_phrases(lead: LeadSheet) -> list[PhraseQuery]:
    if not lead.phrases:
        raise PlannerError("lead sheet has no phrase annotation")
    out = []
    for label, start, length in lead.phrase_spans():
        beats = lead.chords[start * 4:(start + length) * 4]
        out.append(PhraseQuery(label, start, length, onset_grid(lead.melody, length, start), tuple(beats)))
    return out


@dataclass(frozen=True, eq=False)
class PhraseEntry:
    source_id: str
    label: str
    length: int
    accompaniment: Track
    melody: Track
    chords: tuple[ChordSymbol, ...]

    def __post_init__(self):
        if self.length not in PHRASE_LENGTHS:
            raise PlannerError(f"phrase length {self.length} not in {PHRASE_LENGTHS}")
        if len(self.chords) != self.length * 4:
            raise PlannerError(f"{len(self.chords)} chords for a {self.length}-bar phrase")

    @property
    def melody_onsets(self) -> np.ndarray:
        return onset_grid(self.melody, self.length)

    def piece(self) -> Piece:
        return Piece((4, 4), self.length, (self.accompaniment,))

    def boundary_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """Track-function vectors of the first and last 2-bar accompaniment clips."""
        clips = to_clips(self.piece())
        return track_function(clips[0], 0).vector(), track_function(clips[-1], 0).vector()

    def to_dict(self) -> dict:
        return {"source_id": self.source_id, "label": self.label, "length": self.length,
                "accompaniment": track_to_dict(self.accompaniment), "melody": track_to_dict(self.melody),
                "chords": [str(c) for c in self.chords]}

    @classmethod
    def from_dict(cls, d: dict) -> PhraseEntry:
        return cls(d["source_id"], d["label"], int(d["length"]), track_from_dict(d["accompaniment"]),
                   track_from_dict(d["melody"]), tuple(ChordSymbol.parse(c) for c in d["chords"]))


def entries_from_lead(source_id: str, lead: LeadSheet, accompaniment: Track) -> list[PhraseEntry]:
    """Cut an annotated (lead sheet, accompaniment) pair into phrase entries.

    Phrases whose length is not 4, 8 or 16 bars are skipped.
    """
    out = []
    for label, start, length in lead.phrase_spans():
        if length not in PHRASE_LENGTHS:
            continue
        out.append(PhraseEntry(source_id, label, length, slice_track(accompaniment, start, length),
                               slice_track(lead.melody, start, length),
                               tuple(lead.chords[start * 4:(start + length) * 4])))
    return out


def entries_from_piece(source_id: str, piece: Piece, phrases: Sequence[tuple[str, int]]) -> list[PhraseEntry]:
    """Track 0 is the melody; the remaining tracks are merged into the accompaniment.

    Chords are recovered from the accompaniment with the template recognizer.
    """
    if piece.n_tracks < 2:
        raise PlannerError(f"{source_id}: need a melody track and at least one accompaniment track")
    if piece.meter != (4, 4):
        raise PlannerError(f"{source_id}: phrase database sources must be in 4/4")
    accomp = Track(0, tuple(n for t in piece.tracks[1:] for n in t.notes))
    chords = recognize_chords(Piece((4, 4), piece.bar_count, (accomp,)))
    lead = LeadSheet(piece.tracks[0], tuple(chords), piece.bar_count, (4, 4), tuple(phrases))
    return entries_from_lead(source_id, lead, accomp)


@dataclass
class PhraseDB:
    entries: list[PhraseEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def candidates(self, length: int) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.length == length]

    def filter(self, min_voices: float | None = None, max_voices: float | None = None,
               min_onsets_per_bar: float | None = None, max_onsets_per_bar: float | None = None) -> PhraseDB:
        """Keep entries whose accompaniment voice number and rhythm density fall in range."""
        kept = []
        for e in self.entries:
            v = voice_number(e.piece())
            r = rhythm_density(e.piece())
            if min_voices is not None and v < min_voices:
                continue
            if max_voices is not None and v > max_voices:
                continue
            if min_onsets_per_bar is not None and r < min_onsets_per_bar:
                continue
            if max_onsets_per_bar is not None and r > max_onsets_per_bar:
                continue
            kept.append(e)
        return PhraseDB(kept)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"format": DB_FORMAT, "version": 1,
                                          "entries": [e.to_dict() for e in self.entries]}))

    @classmethod
    def load(cls, path: str | Path) -> PhraseDB:
        blob = json.loads(Path(path).read_text())
        if blob.get("format") != DB_FORMAT:
            raise PlannerError(f"{path} is not a phrase database")
        return cls([PhraseEntry.from_dict(d) for d in blob["entries"]])


def build_db(sources: Iterable[tuple[str, LeadSheet, Track]]) -> PhraseDB:
    db = PhraseDB()
    for source_id, lead, accomp in sources:
        db.entries.extend(entries_from_lead(source_id, lead, accomp))
    return db


# ---------------------------------------------------------------------------
# scores


def _chord_iou(a: ChordSymbol, b: ChordSymbol) -> float:
    sa, sb = set(a.tones), set(b.tones)
    return len(sa & sb) / len(sa | sb)


def fitness(entry: PhraseEntry, query: PhraseQuery, weights: PlannerWeights = PlannerWeights()) -> float:
    if entry.length != query.length:
        return float("-inf")
    hamming = np.mean(np.sum(entry.melody_onsets != query.melody_onsets, axis=1) / STEPS_PER_BAR)
    rhythm = 1.0 - float(hamming)
    chord = sum(_chord_iou(a, b) >= CHORD_IOU_MIN for a, b in zip(entry.chords, query.chords)) / len(query.chords)
    return weights.rhythm * rhythm + weights.chord * chord


def transition(a: PhraseEntry, b: PhraseEntry) -> float:
    """Cosine between a's closing clip and b's opening clip track functions."""
    return cosine(a.boundary_vectors()[1], b.boundary_vectors()[0])


def viterbi_path(unary: Sequence[np.ndarray], pairwise: Sequence[np.ndarray], delta: float = DELTA,
                 gamma: float = GAMMA) -> tuple[list[int], float]:
    """Exact argmax of delta * sum(unary) + gamma * sum(pairwise) over index chains.

    ``unary[l]`` has one score per candidate of slot l; ``pairwise[l][i, j]`` scores
    candidate i of slot l followed by candidate j of slot l+1. Among optimal chains
    (within 1e-12) the lexicographically smallest is returned.
    """
    n_slots = len(unary)
    if n_slots == 0:
        raise PlannerError("no slots to plan")
    if len(pairwise) != n_slots - 1:
        raise PlannerError("need one pairwise matrix between each pair of slots")
    unary = [np.asarray(u, dtype=np.float64) for u in unary]
    for l, u in enumerate(unary):
        if len(u) == 0:
            raise PlannerError(f"slot {l} has no candidates")
    # best[l][i]: best score of the suffix starting with candidate i at slot l
    best = [None] * n_slots
    best[-1] = delta * unary[-1]
    for l in range(n_slots - 2, -1, -1):
        step = gamma * np.asarray(pairwise[l], dtype=np.float64) + best[l + 1][None, :]
        best[l] = delta * unary[l] + step.max(axis=1)
    top = best[0].max()
    path = [int(np.flatnonzero(best[0] >= top - TIE_TOL)[0])]
    for l in range(n_slots - 1):
        i = path[-1]
        need = best[l][i] - delta * unary[l][i]
        step = gamma * np.asarray(pairwise[l], dtype=np.float64)[i] + best[l + 1]
        path.append(int(np.flatnonzero(step >= need - TIE_TOL)[0]))
    return path, float(top)


def path_score(path: Sequence[int], unary, pairwise, delta: float = DELTA, gamma: float = GAMMA) -> float:
    total = delta * sum(float(unary[l][i]) for l, i in enumerate(path))
    total += gamma * sum(float(pairwise[l][path[l], path[l + 1]]) for l in range(len(path) - 1))
    return total


def viterbi_select(lead: LeadSheet, db: PhraseDB,
                   weights: PlannerWeights = PlannerWeights()) -> tuple[list[PhraseEntry], float]:
    queries = query_phrases(lead)
    slots = []
    for q in queries:
        cands = db.candidates(q.length)
        if not cands:
            raise PlannerError(f"phrase {q.label}{q.length} at bar {q.start_bar} has no {q.length}-bar candidates")
        slots.append(cands)
    unary = [np.array([fitness(db.entries[i], q, weights) for i in cands]) for q, cands in zip(queries, slots)]
    boundary = {i: db.entries[i].boundary_vectors() for cands in slots for i in cands}
    pairwise = [np.array([[cosine(boundary[i][1], boundary[j][0]) for j in b] for i in a])
                for a, b in zip(slots, slots[1:])]
    path, score = viterbi_path(unary, pairwise, weights.delta, weights.gamma)
    return [db.entries[slots[l][i]] for l, i in enumerate(path)], score


# ---------------------------------------------------------------------------
# re-harmonisation


def signed_interval(semitones: int) -> int:
    """Map a pitch-class shift to [-6, 5]; the tritone goes down."""
    s = semitones % 12
    return s - 12 if s >= 6 else s


def _snap(pitch: int, tones: frozenset | set) -> int:
    best = None
    for cand in range(max(pitch - 6, 0), min(pitch + 7, 128)):
        if cand % 12 in tones:
            key = (abs(cand - pitch), cand)  # ties go to the lower pitch
            if best is None or key < best[0]:
                best = (key, cand)
    return pitch if best is None else best[1]


def reharmonize(accomp: Track, source_chords: Sequence[ChordSymbol], target_chords: Sequence[ChordSymbol]) -> Track:
    """Move each note with the root motion of its onset beat, then snap former chord tones."""
    if len(source_chords) != len(target_chords):
        raise PlannerError(f"chord count mismatch: {len(source_chords)} vs {len(target_chords)}")
    notes = []
    for n in accomp.notes:
        beat = n.onset // STEPS_PER_BEAT
        if beat >= len(source_chords):
            raise PlannerError(f"note at step {n.onset} lies past the last chord")
        src, dst = source_chords[beat], target_chords[beat]
        pitch = n.pitch + signed_interval(dst.root - src.root)
        if pitch % 12 not in dst.tones and n.pitch % 12 in src.tones:
            pitch = _snap(pitch, set(dst.tones))
        pitch = min(max(pitch, 0), 127)
        notes.append(NoteEvent(n.onset, n.duration, pitch))
    return accomp.with_notes(notes)


@dataclass
class PianoSketch:
    piece: Piece                 # (melody, accompaniment)
    accompaniment: Track
    selection: list[PhraseEntry]
    score: float


def arrange_piano(lead: LeadSheet, db: PhraseDB, weights: PlannerWeights = PlannerWeights()) -> PianoSketch:
    if lead.meter != (4, 4):
        raise PlannerError("piano arrangement expects a 4/4 lead sheet")
    selection, score = viterbi_select(lead, db, weights)
    notes = []
    for entry, (_, start, length) in zip(selection, lead.phrase_spans()):
        target = lead.chords[start * 4:(start + length) * 4]
        moved = reharmonize(entry.accompaniment, entry.chords, target)
        notes.extend(moved.shifted(start * STEPS_PER_BAR).notes)
    accomp = Track(0, tuple(notes))
    piece = Piece((4, 4), lead.bar_count, (lead.melody, accomp), lead.phrases)
    return PianoSketch(piece, accomp, selection, score)
