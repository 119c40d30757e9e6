from __future__ import annotations

import itertools

import numpy as np
import pytest

from fullband.features import (
    CHORD_TEMPLATES, bar_features, best_chord, cosine, recognize_chords, track_function,
)
from fullband.score import (
    ALL_CHORDS, CLIP_STEPS, ChordSymbol, ClipGrid, NoteEvent, Piece, Track, to_clips,
)
from helpers import random_piece


def _one_track_clip(notes, bars=2):
    return to_clips(Piece((4, 4), bars, (Track(0, tuple(notes)),)))[0]


def test_track_function_empty_track():
    clip = ClipGrid(np.zeros((2, CLIP_STEPS, 128)), np.zeros((2, CLIP_STEPS, 128)))
    fn = track_function(clip, 1)
    assert not fn.pitch_fn.any() and not fn.time_fn.any()
    with pytest.raises(IndexError):
        track_function(clip, 2)


def test_track_function_held_note():
    fn = track_function(_one_track_clip([NoteEvent(0, 32, 60)]), 0)
    expected_pitch = np.zeros(128)
    expected_pitch[60] = 32 / 32
    expected_time = np.zeros(32)
    expected_time[0] = min(1, 4) / 4
    assert np.array_equal(fn.pitch_fn, expected_pitch)
    assert np.array_equal(fn.time_fn, expected_time)


def test_time_function_clips_at_four_onsets():
    clip = _one_track_clip([NoteEvent(0, 4, p) for p in (48, 52, 55, 60, 64)])
    assert track_function(clip, 0).time_fn[0] == 1.0


def test_track_function_order_and_transposition_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        notes = [NoteEvent(int(rng.integers(0, 32)), int(rng.integers(1, 8)), int(rng.integers(20, 100)))
                 for _ in range(10)]
        notes = [n for n in notes if n.end <= 32]
        a = track_function(_one_track_clip(notes), 0)
        b = track_function(_one_track_clip(list(reversed(notes))), 0)
        assert np.array_equal(a.pitch_fn, b.pitch_fn) and np.array_equal(a.time_fn, b.time_fn)
        up = track_function(_one_track_clip([NoteEvent(n.onset, n.duration, n.pitch + 12) for n in notes]), 0)
        assert np.array_equal(up.time_fn, a.time_fn)
        assert np.array_equal(up.pitch_fn[12:], a.pitch_fn[:-12])


def test_bar_features_examples():
    empty = Piece((4, 4), 1, (Track(0, ()),))
    f = bar_features(empty, 0)
    assert not f.pitch_hist.any() and not f.voice_intensity.any() and not f.groove.any()

    whole = Piece((4, 4), 1, (Track(0, (NoteEvent(0, 16, 60),)),))
    f = bar_features(whole, 0)
    assert f.pitch_hist[0] == 16 and f.pitch_hist.sum() == 16
    assert f.voice_intensity.tolist() == [1] + [0] * 15
    assert f.groove.tolist() == [1] + [0] * 15

    triads = Piece((4, 4), 1, (Track(0, tuple(NoteEvent(s, 4, p) for s in (0, 8) for p in (60, 64, 67))),))
    f = bar_features(triads, 0)
    assert f.voice_intensity[0] == 3 and f.voice_intensity[8] == 3
    assert f.voice_intensity.sum() == 6


def test_bar_features_transposition_properties():
    rng = np.random.default_rng(11)
    for _ in range(20):
        piece = random_piece(rng, min_tracks=1)
        octave = Piece(piece.meter, piece.bar_count, tuple(
            t.with_notes(NoteEvent(n.onset, n.duration, n.pitch + 12 if n.pitch < 116 else n.pitch - 12)
                         for n in t.notes) for t in piece.tracks))
        shift = int(rng.integers(1, 12))
        moved = Piece(piece.meter, piece.bar_count, tuple(
            t.with_notes(NoteEvent(n.onset, n.duration, (n.pitch + shift) % 128) for n in t.notes)
            for t in piece.tracks))
        for k in range(piece.bar_count):
            a, b, c = bar_features(piece, k), bar_features(octave, k), bar_features(moved, k)
            assert np.array_equal(a.pitch_hist, b.pitch_hist)
            assert np.array_equal(a.voice_intensity, c.voice_intensity)
            assert np.array_equal(a.groove, c.groove)
            assert np.array_equal(a.groove, (a.voice_intensity >= 1).astype(int))


def _beat_piece(pitches):
    return Piece((4, 4), 1, (Track(0, tuple(NoteEvent(0, 4, p) for p in pitches)),))


def _oracle_chord(profile):
    best, best_key = None, None
    for chord in ALL_CHORDS:
        tones = chord.tones
        inside = sum(profile[c] for c in range(12) if c in tones)
        outside = sum(profile[c] for c in range(12) if c not in tones)
        score = (inside - 0.5 * outside) / sum(profile)
        absent = sum(1 for c in tones if profile[c] == 0)
        key = (-score, absent)
        if best_key is None or key < best_key:
            best, best_key = chord, key
    return best


def test_recognize_exact_templates():
    assert recognize_chords(_beat_piece([60, 64, 67]))[0] == ChordSymbol(0, "M")
    assert recognize_chords(_beat_piece([57, 60, 64]))[0] == ChordSymbol(9, "m")
    profile = [0] * 12
    for pc in (0, 4, 7, 11):
        profile[pc] = 4
    assert _oracle_chord(profile) == ChordSymbol(0, "M7")
    assert recognize_chords(_beat_piece([60, 64, 67, 71]))[0] == ChordSymbol(0, "M7")


def test_template_scores_match_oracle_on_random_profiles():
    rng = np.random.default_rng(5)
    for _ in range(200):
        profile = rng.integers(0, 5, 12).astype(float)
        if profile.sum() == 0:
            continue
        assert best_chord(profile) == _oracle_chord(profile)


def test_silence_conventions():
    piece = Piece((4, 4), 1, (Track(0, (NoteEvent(4, 4, 57), NoteEvent(4, 4, 60), NoteEvent(4, 4, 64))),))
    chords = recognize_chords(piece)
    assert chords[0] == ChordSymbol(0, "M")  # leading silence
    assert chords[1] == chords[2] == chords[3] == ChordSymbol(9, "m")  # carried forward


def test_recognizer_octave_invariance():
    rng = np.random.default_rng(8)
    for _ in range(50):
        piece = random_piece(rng, min_tracks=1, max_bars=2)
        moved = Piece(piece.meter, piece.bar_count, tuple(
            t.with_notes(NoteEvent(n.onset, n.duration, n.pitch - 12 if n.pitch >= 12 else n.pitch + 12)
                         for n in t.notes) for t in piece.tracks))
        assert recognize_chords(piece) == recognize_chords(moved)
    # doubling a chord tone at the octave keeps an exact template
    for chord in ALL_CHORDS:
        pitches = [48 + pc for pc in sorted(chord.tones)]
        doubled = pitches + [pitches[0] + 12]
        assert recognize_chords(_beat_piece(doubled))[0] == recognize_chords(_beat_piece(pitches))[0]


def test_cosine_zero_convention():
    z = np.zeros(4)
    assert cosine(z, z) == 1.0
    assert cosine(z, np.ones(4)) == 0.0
    assert cosine(np.array([2.0, 0]), np.array([1.0, 0])) == pytest.approx(1.0)


def test_templates_have_expected_sizes():
    sizes = {ALL_CHORDS[i].quality: int(CHORD_TEMPLATES[i].sum()) for i in range(8)}
    assert sizes == {"M": 3, "m": 3, "dim": 3, "aug": 3, "7": 4, "M7": 4, "m7": 4, "m7-5": 4}
    assert list(itertools.islice((c.index for c in ALL_CHORDS), 3)) == [0, 1, 2]
