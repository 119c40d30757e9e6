"""Hand-crafted descriptors of clips and bars.

Track functions summarise one track of a 2-bar clip: the pitch function is the
fraction of the clip's steps each pitch sounds, and the time function is the
clipped onset count per step. Bar features (pitch histogram, voice intensity,
groove) feed the evaluation metrics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .score import (
    ALL_CHORDS, CHORD_INTERVALS, CLIP_STEPS, STEPS_PER_BAR, STEPS_PER_BEAT, ChordSymbol, ClipGrid,
    Piece, to_clips, to_common_time,
)

MAX_ONSETS = 4
MIXTURE = "mixture"
NON_CHORD_PENALTY = 0.5


@dataclass(frozen=True, eq=False)
class TrackFunction:
    pitch_fn: np.ndarray  # (128,)
    time_fn: np.ndarray   # (32,)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.pitch_fn, self.time_fn])


@dataclass(frozen=True, eq=False)
class BarFeatures:
    pitch_hist: np.ndarray       # (12,)
    voice_intensity: np.ndarray  # (16,)
    groove: np.ndarray           # (16,)


def track_function(clip: ClipGrid, track: int) -> TrackFunction:
    if not 0 <= track < clip.n_tracks:
        raise IndexError(f"track {track} out of range for {clip.n_tracks}-track clip")
    sounding = clip.onset[track] | clip.sustain[track]
    pitch_fn = sounding.sum(axis=0, dtype=np.float64) / CLIP_STEPS
    onsets = clip.onset[track].sum(axis=1, dtype=np.float64)
    time_fn = np.minimum(onsets, MAX_ONSETS) / MAX_ONSETS
    return TrackFunction(pitch_fn, time_fn)


def track_functions(clip: ClipGrid) -> list[TrackFunction]:
    return [track_function(clip, n) for n in range(clip.n_tracks)]


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; 1 if both vectors are zero, 0 if exactly one is."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 and nv == 0.0:
        return 1.0
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _scope_notes(piece: Piece, scope):
    if scope == MIXTURE:
        return [n for t in piece.tracks for n in t.notes]
    return list(piece.tracks[scope].notes)


def bar_feature_arrays(piece: Piece, scope=MIXTURE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pitch histograms (K,12), voice intensities (K,16) and grooves (K,16) for every bar."""
    piece = to_common_time(piece)
    steps = piece.total_steps
    hist_steps = np.zeros((steps, 12))
    onsets = np.zeros(steps)
    for note in _scope_notes(piece, scope):
        hist_steps[note.onset:note.end, note.pitch % 12] += 1
        onsets[note.onset] += 1
    k = piece.bar_count
    pitch_hist = hist_steps.reshape(k, STEPS_PER_BAR, 12).sum(axis=1)
    voice = onsets.reshape(k, STEPS_PER_BAR).astype(np.int64)
    return pitch_hist, voice, (voice >= 1).astype(np.int64)


def bar_features(piece: Piece, bar: int, scope=MIXTURE) -> BarFeatures:
    """Features of one (4/4) bar of the mixture or of track ``scope``."""
    hist, voice, groove = bar_feature_arrays(piece, scope)
    if not 0 <= bar < len(hist):
        raise IndexError(f"bar {bar} out of range")
    return BarFeatures(hist[bar], voice[bar], groove[bar])


def beat_profiles(piece: Piece) -> np.ndarray:
    """Duration-weighted pitch-class profile of the mixture per beat, shape (beats, 12)."""
    steps = piece.total_steps
    prof = np.zeros((steps, 12))
    for track in piece.tracks:
        for note in track.notes:
            prof[note.onset:note.end, note.pitch % 12] += 1
    return prof.reshape(steps // STEPS_PER_BEAT, STEPS_PER_BEAT, 12).sum(axis=1)


def _template_matrix() -> np.ndarray:
    tmpl = np.zeros((len(ALL_CHORDS), 12))
    for i, chord in enumerate(ALL_CHORDS):
        for iv in CHORD_INTERVALS[chord.quality]:
            tmpl[i, (chord.root + iv) % 12] = 1
    return tmpl


CHORD_TEMPLATES = _template_matrix()


def chord_scores(profile: np.ndarray) -> np.ndarray:
    """Score of each of the 96 chord templates against one 12-D profile."""
    mass = profile.sum()
    inside = CHORD_TEMPLATES @ profile
    return (inside - NON_CHORD_PENALTY * (mass - inside)) / mass


def best_chord(profile: np.ndarray) -> ChordSymbol:
    """Highest-scoring template for a non-silent profile.

    Ties go to the template with fewest absent chord tones (so an exact triad
    beats a seventh chord containing it), then lowest root, then quality order.
    """
    scores = chord_scores(profile)
    tied = np.flatnonzero(scores == scores.max())
    missing = ((CHORD_TEMPLATES[tied] > 0) & (profile == 0)).sum(axis=1)
    return ALL_CHORDS[int(tied[np.argmin(missing)])]


def recognize_chords(piece: Piece) -> list[ChordSymbol]:
    """One chord per beat by template matching; silent beats repeat the previous chord."""
    previous = ALL_CHORDS[0]
    chords = []
    for profile in beat_profiles(piece):
        if profile.sum() > 0:
            previous = best_chord(profile)
        chords.append(previous)
    return chords


def voice_number(piece: Piece, scope=MIXTURE) -> float:
    """Mean number of notes per onset position that has at least one onset."""
    _, voice, groove = bar_feature_arrays(piece, scope)
    active = groove.sum()
    return float(voice.sum() / active) if active else 0.0


def rhythm_density(piece: Piece, scope=MIXTURE) -> float:
    """Mean number of onset positions per bar."""
    _, _, groove = bar_feature_arrays(piece, scope)
    return float(groove.sum(axis=1).mean())


def feature_dump(pieces: dict[str, Piece]) -> dict:
    """JSON-ready bar and clip features keyed by piece id, then bar/clip index."""
    out = {}
    for pid, piece in pieces.items():
        hist, voice, groove = bar_feature_arrays(piece)
        bars = {str(k): {"pitch_hist": hist[k].tolist(), "voice_intensity": voice[k].tolist(),
                         "groove": groove[k].tolist()} for k in range(len(hist))}
        clips = {}
        for t, clip in enumerate(to_clips(piece)):
            clips[str(t)] = [{"pitch_fn": f.pitch_fn.tolist(), "time_fn": f.time_fn.tolist()}
                             for f in track_functions(clip)]
        out[pid] = {"bars": bars, "clips": clips}
    return out
