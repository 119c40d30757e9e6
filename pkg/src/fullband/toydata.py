"""Deterministic synthetic corpora for desk-scale training and fixtures.

Pieces are built from diatonic progressions (one chord per bar) rendered with a
handful of idiomatic textures: block chords, Alberti bass, arpeggios, pads,
walking/pedal bass, guitar strums and brass stabs.
"""
from __future__ import annotations

import json
from importlib import resources
from typing import Callable

import numpy as np

from .score import ChordSymbol, LeadSheet, NoteEvent, Piece, Track, leadsheet_from_dict, parse_phrases

# (scale-degree offset, quality)
PROGRESSIONS = (
    ((0, "M"), (7, "M"), (9, "m"), (5, "M")),
    ((0, "M"), (9, "m"), (5, "M"), (7, "M")),
    ((2, "m7"), (7, "7"), (0, "M"), (0, "M")),
    ((0, "M"), (5, "M"), (7, "M"), (0, "M")),
    ((9, "m"), (5, "M"), (0, "M"), (7, "M")),
    ((0, "M7"), (9, "m7"), (2, "m7"), (7, "7")),
    ((0, "M"), (4, "m"), (5, "M"), (7, "7")),
)
# triads only, as in most folk tunes
FOLK_PROGRESSIONS = tuple(p for p in PROGRESSIONS if all(q in ("M", "m") for _, q in p))

MELODY_RHYTHMS = (
    (0, 4, 8, 12), (0, 6, 8, 12), (0, 2, 4, 8, 12), (0, 8), (0, 4, 6, 8, 10, 12),
    (0, 3, 6, 8, 12), (0, 12), (2, 4, 8, 14),
)

Texture = Callable[[ChordSymbol, int, np.random.Generator], list[NoteEvent]]


def _voicing(chord: ChordSymbol, low: int, count: int = 3) -> list[int]:
    """Close voicing of the chord's first ``count`` tones starting at or above ``low``."""
    tones = sorted(chord.tones, key=lambda pc: (pc - chord.root) % 12)[:count]
    base = low + (chord.root - low) % 12
    out = []
    for pc in tones:
        p = base + (pc - chord.root) % 12
        out.append(p)
    return sorted(out)


def _bass(chord: ChordSymbol, low: int = 36) -> int:
    return low + (chord.root - low) % 12


def _shell(chord: ChordSymbol, start: int) -> list[NoteEvent]:
    """Left hand: the full chord held through the bar, so every beat carries all chord tones."""
    return [NoteEvent(start, 16, p) for p in _voicing(chord, 43, len(chord.tones))]


def tex_block(chord, start, rng):
    return _shell(chord, start) + [NoteEvent(start + s, 8, p) for s in (0, 8) for p in _voicing(chord, 60)]


def tex_alberti(chord, start, rng):
    v = _voicing(chord, 60)
    order = (v[0], v[2], v[1], v[2]) * 2
    return _shell(chord, start) + [NoteEvent(start + 2 * i, 2, p) for i, p in enumerate(order)]


def tex_arpeggio(chord, start, rng):
    v = _voicing(chord, 60) + [p + 12 for p in _voicing(chord, 60)]
    seq = v[:4] + v[::-1][:4]
    return _shell(chord, start) + [NoteEvent(start + 2 * i, 2, p) for i, p in enumerate(seq)]


def tex_sustain(chord, start, rng):
    return _shell(chord, start) + [NoteEvent(start, 16, p) for p in _voicing(chord, 60)]


def tex_stride(chord, start, rng):
    return _shell(chord, start) + [NoteEvent(start + s, 4, p) for s in (4, 12) for p in _voicing(chord, 60)]


PIANO_TEXTURES: dict[str, Texture] = {
    "block": tex_block, "alberti": tex_alberti, "arpeggio": tex_arpeggio,
    "sustain": tex_sustain, "stride": tex_stride,
}


# Orchestral roles. Each factory draws a per-track rhythm/voicing once, so a
# track repeats its figure bar after bar the way real parts tend to.
RoleFactory = Callable[[np.random.Generator], Texture]


def _random_rhythm(rng: np.random.Generator, density: float) -> tuple[int, ...]:
    hits = rng.random(16) < density
    hits[0] = True
    return tuple(int(s) for s in np.flatnonzero(hits))


def _hits(rhythm, voices: Callable[[ChordSymbol, int], list[int]], length: int | None = None) -> Texture:
    def texture(chord, start, rng):
        notes = []
        for i, s in enumerate(rhythm):
            nxt = rhythm[i + 1] if i + 1 < len(rhythm) else 16
            dur = nxt - s if length is None else min(length, nxt - s)
            notes += [NoteEvent(start + s, dur, p) for p in voices(chord, i)]
        return notes
    return texture


def role_bass(rng):
    rhythm = ((0, 4, 8, 12), (0, 8), (0, 6, 8, 14), (0, 3, 8, 11), (0, 2, 4, 6, 8, 10, 12, 14))[int(rng.integers(5))]
    low = 33
    return _hits(rhythm, lambda c, i: [_bass(c, low) + (7 if i % 2 else 0)])


def role_pedal_bass(rng):
    return _hits((0, 8), lambda c, i: [_bass(c, 33)])


def role_pad(rng):
    count = int(rng.integers(2, 4))
    return _hits((0,), lambda c, i: _voicing(c, 60)[:count])


def role_strum(rng):
    rhythm = _random_rhythm(rng, 0.45)
    sizes = rng.integers(1, 4, size=len(rhythm))
    return _hits(rhythm, lambda c, i: _voicing(c, 52)[-int(sizes[i]):], 3)


def role_offbeat(rng):
    rhythm = ((2, 6, 10, 14), (4, 12), (2, 3, 6, 10, 11, 14))[int(rng.integers(3))]
    return _hits(rhythm, lambda c, i: _voicing(c, 60), 2)


def role_stabs(rng):
    rhythm = _random_rhythm(rng, 0.25)
    sizes = rng.integers(1, 4, size=len(rhythm))
    return _hits(rhythm, lambda c, i: _voicing(c, 60)[:int(sizes[i])], 2)


def role_arp_lead(rng):
    rhythm = _random_rhythm(rng, 0.55)
    return _hits(rhythm, lambda c, i: [_voicing(c, 72)[i % 3]], 2)


def role_riff(rng):
    rhythm = _random_rhythm(rng, 0.35)
    sizes = rng.integers(1, 4, size=len(rhythm))
    return _hits(rhythm, lambda c, i: _voicing(c, 48)[:int(sizes[i])], 4)


ROLES: dict[str, tuple[int, RoleFactory]] = {
    "bass": (8, role_bass),
    "pedal_bass": (7, role_pedal_bass),
    "strings": (15, role_pad),
    "guitar": (5, role_strum),
    "offbeat_piano": (1, role_offbeat),
    "brass": (23, role_stabs),
    "lead": (32, role_arp_lead),
    "organ": (3, role_pad),
    "riff": (4, role_riff),
}


def progression_chords(rng: np.random.Generator, bars: int, key: int | None = None,
                       progressions=PROGRESSIONS) -> list[ChordSymbol]:
    key = int(rng.integers(0, 12)) if key is None else key
    prog = progressions[int(rng.integers(len(progressions)))]
    return [ChordSymbol((key + prog[b % 4][0]) % 12, prog[b % 4][1]) for b in range(bars)]


def render(texture: Texture, bar_chords: list[ChordSymbol], rng: np.random.Generator,
           offset_bars: int = 0) -> list[NoteEvent]:
    notes = []
    for b, chord in enumerate(bar_chords):
        notes += texture(chord, (offset_bars + b) * 16, rng)
    return notes


def melody_for(bar_chords: list[ChordSymbol], rng: np.random.Generator, offset_bars: int = 0) -> list[NoteEvent]:
    notes = []
    for b, chord in enumerate(bar_chords):
        rhythm = MELODY_RHYTHMS[int(rng.integers(len(MELODY_RHYTHMS)))]
        tones = _voicing(chord, 67, 4 if len(chord.tones) == 4 else 3)
        for i, s in enumerate(rhythm):
            end = rhythm[i + 1] if i + 1 < len(rhythm) else 16
            notes.append(NoteEvent((offset_bars + b) * 16 + s, end - s, tones[int(rng.integers(len(tones)))]))
    return notes


def multitrack_piece(rng: np.random.Generator, bars: int = 8, n_tracks: int | None = None) -> Piece:
    """A multi-track toy piece whose tracks share one progression."""
    n = int(rng.integers(2, 5)) if n_tracks is None else n_tracks
    chords = progression_chords(rng, bars)
    names = list(ROLES)
    picks = rng.choice(len(names), size=n, replace=False)
    tracks = []
    for i in sorted(picks):
        instrument, factory = ROLES[names[i]]
        tracks.append(Track(instrument, tuple(render(factory(rng), chords, rng))))
    return Piece((4, 4), bars, tuple(tracks))


def toy_corpus(n_pieces: int, seed: int = 0, bars: int = 8) -> list[Piece]:
    rng = np.random.default_rng(seed)
    return [multitrack_piece(rng, bars) for _ in range(n_pieces)]


def lead_and_accompaniment(rng: np.random.Generator, phrases: str = "A8B8",
                           textures: dict[str, str] | None = None,
                           progressions=PROGRESSIONS) -> tuple[LeadSheet, Track]:
    """A lead sheet plus a piano accompaniment; repeated labels repeat material."""
    spec = parse_phrases(phrases)
    key = int(rng.integers(0, 12))
    material: dict[str, tuple[list[ChordSymbol], int, str]] = {}
    melody, accomp, beat_chords = [], [], []
    offset = 0
    for label, length in spec:
        if label not in material:
            tex = (textures or {}).get(label) or list(PIANO_TEXTURES)[int(rng.integers(len(PIANO_TEXTURES)))]
            material[label] = (progression_chords(rng, length, key, progressions), int(rng.integers(1 << 30)), tex)
        chords, mel_seed, tex = material[label]
        chords = [chords[b % len(chords)] for b in range(length)]
        melody += melody_for(chords, np.random.default_rng(mel_seed), offset)
        accomp += render(PIANO_TEXTURES[tex], chords, rng, offset)
        beat_chords += [c for c in chords for _ in range(4)]
        offset += length
    lead = LeadSheet(Track(0, tuple(melody), 73), tuple(beat_chords), offset, (4, 4), spec)
    return lead, Track(0, tuple(accomp))


def phrase_sources(n: int, seed: int = 0) -> list[tuple[LeadSheet, Track]]:
    """Annotated (lead sheet, piano accompaniment) pairs for building a phrase database."""
    rng = np.random.default_rng(seed)
    forms = ("A8B8", "A4B4A4B4", "A8A8B8B8", "A16", "A4B4C8")
    return [lead_and_accompaniment(rng, forms[i % len(forms)]) for i in range(n)]


def aabb_lead(seed: int = 7) -> LeadSheet:
    """A 32-bar AABB lead sheet (four 8-bar phrases)."""
    lead, _ = lead_and_accompaniment(np.random.default_rng(seed), "A8A8B8B8", progressions=FOLK_PROGRESSIONS)
    return lead


def bundled_aabb() -> LeadSheet:
    """The 32-bar AABB lead sheet shipped with the package."""
    text = resources.files("fullband").joinpath("data/aabb_lead.json").read_text()
    return leadsheet_from_dict(json.loads(text))
