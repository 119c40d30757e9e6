"""Symbolic score model: notes, tracks, pieces, 2-bar clip grids and chords.

Time is measured in steps of 1/4 beat. A 4/4 bar has 16 steps and a clip
spans two 4/4 bars (32 steps). Pieces in 2/4 are rebarred to 4/4 by merging
bar pairs before any clip-level processing.
"""
from __future__ import annotations

import json
import math
import re
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import smf

STEPS_PER_BEAT = 4
STEPS_PER_BAR = 16
CLIP_BARS = 2
CLIP_STEPS = CLIP_BARS * STEPS_PER_BAR
N_PITCH = 128
SUPPORTED_METERS = ((2, 4), (4, 4))
DRUM_CHANNEL = 9
WRITE_TICKS_PER_BEAT = 480

INSTRUMENT_CLASSES = (
    "Acoustic Piano", "Electric Piano", "Chromatic Percussion", "Organ",
    "Acoustic Guitar", "Clean Electric Guitar", "Distorted Electric Guitar",
    "Acoustic Bass", "Electric Bass", "Violin", "Viola", "Cello", "Contrabass",
    "Orchestral Harp", "Timpani", "String Ensemble", "Synth Strings",
    "Choir and Voice", "Orchestral Hit", "Trumpet", "Trombone", "Tuba",
    "French Horn", "Brass Section", "Soprano/Alto Sax", "Tenor Sax",
    "Baritone Sax", "Oboe", "English Horn", "Bassoon", "Clarinet", "Pipe",
    "Synth Lead", "Synth Pad",
)
N_INSTRUMENTS = len(INSTRUMENT_CLASSES)
PIANO = 0
SYNTH = INSTRUMENT_CLASSES.index("Synth Pad")


def _program_table() -> tuple[int, ...]:
    spans = [
        (0, 3, 0), (4, 7, 1), (8, 15, 2), (16, 23, 3), (24, 25, 4), (26, 28, 5),
        (29, 31, 6), (32, 32, 7), (33, 39, 8), (40, 40, 9), (41, 41, 10),
        (42, 42, 11), (43, 43, 12), (44, 45, 15), (46, 46, 13), (47, 47, 14),
        (48, 49, 15), (50, 51, 16), (52, 54, 17), (55, 55, 18), (56, 56, 19),
        (57, 57, 20), (58, 58, 21), (59, 59, 19), (60, 60, 22), (61, 63, 23),
        (64, 65, 24), (66, 66, 25), (67, 67, 26), (68, 68, 27), (69, 69, 28),
        (70, 70, 29), (71, 71, 30), (72, 79, 31), (80, 87, 32), (88, 95, 33),
    ]
    table = [SYNTH] * 128
    for lo, hi, cls in spans:
        for program in range(lo, hi + 1):
            table[program] = cls
    return tuple(table)


# GM program -> instrument class; programs 96-127 fall back to the synth class
PROGRAM_TO_CLASS = _program_table()
CLASS_TO_PROGRAM = (
    0, 4, 11, 19, 25, 27, 30, 32, 33, 40, 41, 42, 43, 46, 47, 48, 50, 52, 55,
    56, 57, 58, 60, 61, 65, 66, 67, 68, 69, 70, 71, 73, 80, 88,
)


class ScoreError(ValueError):
    """A score object violates its invariants."""


class UnsupportedMeterError(ScoreError):
    def __init__(self, meter: str):
        super().__init__(f"unsupported meter {meter}; only 2/4 and 4/4 are accepted")
        self.meter = meter


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: int
    duration: int
    pitch: int

    def __post_init__(self):
        if self.onset < 0 or self.duration < 1 or not 0 <= self.pitch < N_PITCH:
            raise ScoreError(f"invalid note {self}")

    @property
    def end(self) -> int:
        return self.onset + self.duration


def _note_key(n: NoteEvent) -> tuple[int, int, int]:
    return (n.onset, n.pitch, n.duration)


@dataclass(frozen=True)
class Track:
    instrument: int
    notes: tuple[NoteEvent, ...] = ()
    program: int | None = None

    def __post_init__(self):
        if not 0 <= self.instrument < N_INSTRUMENTS:
            raise ScoreError(f"instrument class {self.instrument} out of range")
        object.__setattr__(self, "notes", tuple(sorted(self.notes, key=_note_key)))
        if self.program is None:
            object.__setattr__(self, "program", CLASS_TO_PROGRAM[self.instrument])
        elif not 0 <= self.program < 128:
            raise ScoreError(f"GM program {self.program} out of range")

    def shifted(self, steps: int) -> Track:
        return Track(self.instrument, tuple(NoteEvent(n.onset + steps, n.duration, n.pitch)
                                            for n in self.notes), self.program)

    def with_notes(self, notes: Iterable[NoteEvent]) -> Track:
        return Track(self.instrument, tuple(notes), self.program)


@dataclass(frozen=True)
class Piece:
    meter: tuple[int, int] = (4, 4)
    bar_count: int = 1
    tracks: tuple[Track, ...] = ()
    phrases: tuple[tuple[str, int], ...] | None = None

    def __post_init__(self):
        meter = tuple(self.meter)
        object.__setattr__(self, "meter", meter)
        if meter not in SUPPORTED_METERS:
            raise UnsupportedMeterError(f"{meter[0]}/{meter[1]}")
        if self.bar_count < 1:
            raise ScoreError("bar_count must be >= 1")
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if self.phrases is not None:
            phrases = tuple((str(lbl), int(n)) for lbl, n in self.phrases)
            object.__setattr__(self, "phrases", phrases)
            if sum(n for _, n in phrases) != self.bar_count:
                raise ScoreError(
                    f"phrase lengths sum to {sum(n for _, n in phrases)}, piece has {self.bar_count} bars")
        total = self.total_steps
        for track in self.tracks:
            for note in track.notes:
                if note.end > total:
                    raise ScoreError(f"note {note} extends past the last bar ({total} steps)")

    @property
    def steps_per_bar(self) -> int:
        return STEPS_PER_BEAT * self.meter[0]

    @property
    def beats_per_bar(self) -> int:
        return self.meter[0]

    @property
    def total_steps(self) -> int:
        return self.bar_count * self.steps_per_bar

    @property
    def n_tracks(self) -> int:
        return len(self.tracks)


@dataclass(frozen=True)
class ChordSymbol:
    root: int
    quality: str

    QUALITIES = ("M", "m", "dim", "aug", "7", "M7", "m7", "m7-5")

    def __post_init__(self):
        if not 0 <= self.root < 12 or self.quality not in self.QUALITIES:
            raise ScoreError(f"invalid chord {self.root}:{self.quality}")

    @property
    def index(self) -> int:
        return self.root * len(self.QUALITIES) + self.QUALITIES.index(self.quality)

    @classmethod
    def from_index(cls, index: int) -> ChordSymbol:
        if not 0 <= index < 96:
            raise ScoreError(f"chord index {index} out of range")
        root, q = divmod(index, len(cls.QUALITIES))
        return cls(root, cls.QUALITIES[q])

    @property
    def tones(self) -> frozenset[int]:
        return frozenset((self.root + i) % 12 for i in CHORD_INTERVALS[self.quality])

    def __str__(self) -> str:
        return f"{PITCH_NAMES[self.root]}:{self.quality}"

    @classmethod
    def parse(cls, text: str) -> ChordSymbol:
        m = re.fullmatch(r"([A-G])([#b]?):(.+)", text.strip())
        if not m:
            raise ScoreError(f"cannot parse chord {text!r}")
        root = (PITCH_NAMES.index(m.group(1)) + {"": 0, "#": 1, "b": -1}[m.group(2)]) % 12
        return cls(root, m.group(3))


PITCH_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
CHORD_INTERVALS = {
    "M": (0, 4, 7), "m": (0, 3, 7), "dim": (0, 3, 6), "aug": (0, 4, 8),
    "7": (0, 4, 7, 10), "M7": (0, 4, 7, 11), "m7": (0, 3, 7, 10), "m7-5": (0, 3, 6, 10),
}
ALL_CHORDS = tuple(ChordSymbol.from_index(i) for i in range(96))


@dataclass(frozen=True)
class LeadSheet:
    melody: Track
    chords: tuple[ChordSymbol, ...]
    bar_count: int
    meter: tuple[int, int] = (4, 4)
    phrases: tuple[tuple[str, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "chords", tuple(self.chords))
        # reuse Piece validation for meter, bounds and phrases
        piece = self.as_piece()
        object.__setattr__(self, "meter", piece.meter)
        object.__setattr__(self, "phrases", piece.phrases)
        if len(self.chords) != self.meter[0] * self.bar_count:
            raise ScoreError(
                f"expected {self.meter[0] * self.bar_count} beat chords, got {len(self.chords)}")
        last_end = -1
        for note in self.melody.notes:
            if note.onset < last_end:
                raise ScoreError(f"melody is not monophonic near step {note.onset}")
            last_end = note.end

    def as_piece(self) -> Piece:
        return Piece(self.meter, self.bar_count, (self.melody,), self.phrases)

    def phrase_spans(self) -> list[tuple[str, int, int]]:
        """(label, start_bar, length) for each annotated phrase."""
        if not self.phrases:
            raise ScoreError("lead sheet has no phrase annotation")
        spans, start = [], 0
        for label, length in self.phrases:
            spans.append((label, start, length))
            start += length
        return spans


def parse_phrases(text: str) -> tuple[tuple[str, int], ...]:
    """Parse the sidecar phrase format, e.g. ``"A8A8B8B8"``."""
    text = "".join(text.split())
    pairs = re.findall(r"([A-Za-z])(\d+)", text)
    if not pairs or "".join(f"{a}{b}" for a, b in pairs) != text:
        raise ScoreError(f"malformed phrase annotation {text!r}")
    return tuple((label, int(n)) for label, n in pairs)


def format_phrases(phrases: Sequence[tuple[str, int]]) -> str:
    return "".join(f"{label}{n}" for label, n in phrases)


# ---------------------------------------------------------------------------
# MIDI I/O


def quantize_ticks(tick: int, ticks_per_beat: int) -> int:
    """Nearest 1/4-beat step; exact halves round toward the earlier step."""
    # ceil((8*tick - tpb) / (2*tpb)) in integer arithmetic
    return -((ticks_per_beat - 8 * tick) // (2 * ticks_per_beat))


def read_midi(path: str | Path, quantize: bool = True) -> Piece:
    """Read a type 0/1 MIDI file into a quantized :class:`Piece`.

    Drum-channel notes are dropped. Type-1 files give one track per chunk that
    holds notes or a program change; type-0 files are split by channel. ``quantize`` exists for API
    symmetry: the score model only holds grid-aligned notes, so it must be true.
    """
    if not quantize:
        raise ScoreError("the score model stores quantized notes only")
    data = smf.read_midi_file(path)
    tpb = data.ticks_per_beat

    meters = {ev.data for trk in data.tracks for ev in trk if ev.kind == "time_signature"}
    for num, den in sorted(meters):
        if (num, den) not in SUPPORTED_METERS:
            raise UnsupportedMeterError(f"{num}/{den}")
    if len(meters) > 1:
        raise UnsupportedMeterError(", ".join(f"{n}/{d}" for n, d in sorted(meters)) + " (mixed)")
    meter = meters.pop() if meters else (4, 4)

    groups: dict[tuple[int, int], list[NoteEvent]] = defaultdict(list)
    programs: dict[tuple[int, int], int] = {}
    file_end = 0
    for t_idx, events in enumerate(data.tracks):
        open_notes: dict[tuple[int, int], deque[int]] = defaultdict(deque)
        channel_program: dict[int, int] = {}
        end_tick = events[-1].tick if events else 0
        file_end = max(file_end, end_tick)
        pending: list[tuple[int, int, int, int]] = []
        for ev in events:
            if ev.kind == "program":
                channel_program.setdefault(ev.channel, ev.data[0])
            elif ev.kind == "note_on":
                open_notes[(ev.channel, ev.data[0])].append(ev.tick)
            elif ev.kind == "note_off":
                queue = open_notes.get((ev.channel, ev.data[0]))
                if queue:
                    pending.append((ev.channel, queue.popleft(), ev.tick, ev.data[0]))
        for (channel, pitch), queue in open_notes.items():
            pending.extend((channel, start, end_tick, pitch) for start in queue)
        for channel, start, stop, pitch in pending:
            if channel == DRUM_CHANNEL:
                continue
            key = (t_idx, channel) if data.format == 0 else (t_idx, 0)
            on = quantize_ticks(start, tpb)
            off = quantize_ticks(stop, tpb)
            groups[key].append(NoteEvent(on, max(off - on, 1), pitch))
            if key not in programs:
                programs[key] = channel_program.get(channel, 0)
        melodic = [ch for ch in channel_program if ch != DRUM_CHANNEL]
        if data.format != 0 and melodic and (t_idx, 0) not in programs:
            # a chunk that declares an instrument but plays nothing is an empty track
            groups[(t_idx, 0)] = []
            programs[(t_idx, 0)] = channel_program[min(melodic)]

    spb = STEPS_PER_BEAT * meter[0]
    max_end = max((n.end for notes in groups.values() for n in notes), default=0)
    bar_count = max(math.ceil(max_end / spb), quantize_ticks(file_end, tpb) // spb, 1)
    tracks = []
    for key in sorted(groups):
        program = programs[key]
        tracks.append(Track(PROGRAM_TO_CLASS[program], tuple(groups[key]), program))
    return Piece(meter, bar_count, tuple(tracks))


_CHANNELS = tuple(c for c in range(16) if c != DRUM_CHANNEL)


def _assign_lanes(notes: Sequence[NoteEvent]) -> list[int]:
    """Lane per note so that same-pitch notes in one lane never overlap."""
    lane_free: dict[int, list[int]] = defaultdict(list)  # pitch -> end step per lane
    lanes = []
    for note in notes:
        ends = lane_free[note.pitch]
        for i, end in enumerate(ends):
            if end <= note.onset:
                ends[i] = note.end
                lanes.append(i)
                break
        else:
            ends.append(note.end)
            lanes.append(len(ends) - 1)
    return lanes


def write_midi(piece: Piece, path: str | Path) -> None:
    """Write ``piece`` as a type-1 MIDI file (one meta track + one per Track).

    Same-pitch overlapping notes of one track are spread over extra channels so
    that the note tuples survive a read back exactly.
    """
    tpb = WRITE_TICKS_PER_BEAT
    tps = tpb // STEPS_PER_BEAT
    end_tick = piece.total_steps * tps
    chunks = [smf.meta_track(piece.meter[0], piece.meter[1], end_tick)]
    for t_idx, track in enumerate(piece.tracks):
        base = t_idx % len(_CHANNELS)
        lanes = _assign_lanes(track.notes)
        used = sorted(set(lanes)) or [0]
        events: list[tuple[int, int, bytes]] = []
        channel_of = {lane: _CHANNELS[(base + lane) % len(_CHANNELS)] for lane in used}
        for lane in used:
            events.append((0, 0, bytes([0xC0 | channel_of[lane], track.program])))
        for note, lane in zip(track.notes, lanes):
            ch = channel_of[lane]
            events.append((note.onset * tps, 2, bytes([0x90 | ch, note.pitch, 80])))
            events.append((note.end * tps, 1, bytes([0x80 | ch, note.pitch, 0])))
        chunks.append(smf.encode_track(events, end_tick))
    Path(path).write_bytes(smf.build_file(chunks, tpb))


# ---------------------------------------------------------------------------
# Clip grids


@dataclass(frozen=True, eq=False)
class ClipGrid:
    """Onset/sustain pianoroll of one 2-bar clip, shape (N, 32, 128)."""

    onset: np.ndarray
    sustain: np.ndarray

    def __post_init__(self):
        onset = np.asarray(self.onset, dtype=np.uint8)
        sustain = np.asarray(self.sustain, dtype=np.uint8)
        if onset.ndim != 3 or onset.shape[1:] != (CLIP_STEPS, N_PITCH) or onset.shape != sustain.shape:
            raise ScoreError(f"clip grid must be (N, {CLIP_STEPS}, {N_PITCH}), got {onset.shape}")
        onset.flags.writeable = False
        sustain.flags.writeable = False
        object.__setattr__(self, "onset", onset)
        object.__setattr__(self, "sustain", sustain)

    @property
    def n_tracks(self) -> int:
        return self.onset.shape[0]

    def track(self, n: int) -> ClipGrid:
        if not 0 <= n < self.n_tracks:
            raise IndexError(f"track {n} out of range for {self.n_tracks}-track clip")
        return ClipGrid(self.onset[n:n + 1], self.sustain[n:n + 1])

    def __eq__(self, other) -> bool:
        return (isinstance(other, ClipGrid) and np.array_equal(self.onset, other.onset)
                and np.array_equal(self.sustain, other.sustain))

    def __hash__(self):
        return hash((self.onset.tobytes(), self.sustain.tobytes()))


def empty_clip(n_tracks: int) -> ClipGrid:
    z = np.zeros((n_tracks, CLIP_STEPS, N_PITCH), dtype=np.uint8)
    return ClipGrid(z, z.copy())


def to_common_time(piece: Piece) -> Piece:
    """Rebar a 2/4 piece as 4/4 by merging bar pairs; 4/4 passes through."""
    if piece.meter == (4, 4):
        return piece
    bars = math.ceil(piece.bar_count / 2)
    phrases = None
    if piece.phrases and all(n % 2 == 0 for _, n in piece.phrases):
        phrases = tuple((lbl, n // 2) for lbl, n in piece.phrases)
    return Piece((4, 4), bars, piece.tracks, phrases)


def pianoroll(piece: Piece, n_steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Onset and sustain rolls of shape (N, steps, 128); onset wins on overlap."""
    steps = piece.total_steps if n_steps is None else n_steps
    onset = np.zeros((piece.n_tracks, steps, N_PITCH), dtype=np.uint8)
    sustain = np.zeros_like(onset)
    for n, track in enumerate(piece.tracks):
        for note in track.notes:
            if note.onset >= steps:
                continue
            onset[n, note.onset, note.pitch] = 1
            sustain[n, note.onset + 1:min(note.end, steps), note.pitch] = 1
    sustain &= 1 - onset
    return onset, sustain


def to_clips(piece: Piece) -> list[ClipGrid]:
    """Split a piece into ceil(K/2) two-bar clips (last clip zero-padded)."""
    piece = to_common_time(piece)
    n_clips = math.ceil(piece.bar_count / CLIP_BARS)
    onset, sustain = pianoroll(piece, n_clips * CLIP_STEPS)
    return [ClipGrid(onset[:, t * CLIP_STEPS:(t + 1) * CLIP_STEPS],
                     sustain[:, t * CLIP_STEPS:(t + 1) * CLIP_STEPS])
            for t in range(n_clips)]


def notes_from_roll(onset: np.ndarray, sustain: np.ndarray) -> list[NoteEvent]:
    """Notes of a single-track (steps, 128) roll. Orphan sustain cells are dropped."""
    notes = []
    steps = onset.shape[0]
    for s, p in zip(*np.nonzero(onset)):
        end = s + 1
        while end < steps and sustain[end, p] and not onset[end, p]:
            end += 1
        notes.append(NoteEvent(int(s), int(end - s), int(p)))
    return notes


def from_clips(clips: Sequence[ClipGrid], instruments: Sequence[int], bar_count: int | None = None,
               programs: Sequence[int] | None = None) -> Piece:
    """Reassemble clips into a 4/4 piece; notes past ``bar_count`` are cut."""
    if not clips:
        raise ScoreError("no clips to reassemble")
    n = clips[0].n_tracks
    if len(instruments) != n:
        raise ScoreError(f"{len(instruments)} instruments for {n}-track clips")
    onset = np.concatenate([c.onset for c in clips], axis=1)
    sustain = np.concatenate([c.sustain for c in clips], axis=1)
    bars = bar_count if bar_count is not None else len(clips) * CLIP_BARS
    limit = bars * STEPS_PER_BAR
    tracks = []
    for i in range(n):
        notes = [NoteEvent(nt.onset, min(nt.end, limit) - nt.onset, nt.pitch)
                 for nt in notes_from_roll(onset[i, :limit], sustain[i, :limit])]
        program = programs[i] if programs is not None else None
        tracks.append(Track(int(instruments[i]), tuple(notes), program))
    return Piece((4, 4), bars, tuple(tracks))


def downmix(clip: ClipGrid) -> ClipGrid:
    """Track-wise OR into one track; a cell that is both onset and sustain keeps the onset."""
    if clip.n_tracks < 1:
        raise ScoreError("cannot downmix an empty clip")
    onset = clip.onset.max(axis=0, keepdims=True)
    sustain = clip.sustain.max(axis=0, keepdims=True) & (1 - onset)
    return ClipGrid(onset, sustain)


def slice_track(track: Track, first_bar: int, bars: int) -> Track:
    """Notes with onsets inside the 4/4 bar span, shifted to start at 0 and cut at its end."""
    lo, hi = first_bar * STEPS_PER_BAR, (first_bar + bars) * STEPS_PER_BAR
    return track.with_notes(NoteEvent(n.onset - lo, min(n.end, hi) - n.onset, n.pitch)
                            for n in track.notes if lo <= n.onset < hi)


def slice_piece(piece: Piece, first_bar: int, bars: int) -> Piece:
    """A ``bars``-bar excerpt of a piece (converted to 4/4 first)."""
    piece = to_common_time(piece)
    if first_bar < 0 or bars < 1 or first_bar + bars > piece.bar_count:
        raise ScoreError(f"bars [{first_bar}, {first_bar + bars}) outside a {piece.bar_count}-bar piece")
    return Piece((4, 4), bars, tuple(slice_track(t, first_bar, bars) for t in piece.tracks))


def mixture_track(piece: Piece, instrument: int = PIANO) -> Track:
    """All notes of a piece merged into one track (duplicates kept)."""
    return Track(instrument, tuple(n for t in piece.tracks for n in t.notes))


# ---------------------------------------------------------------------------
# JSON fixtures


def track_to_dict(track: Track) -> dict:
    return {"instrument": track.instrument, "program": track.program,
            "notes": [[n.onset, n.duration, n.pitch] for n in track.notes]}


def track_from_dict(d: dict) -> Track:
    return Track(int(d["instrument"]), tuple(NoteEvent(*map(int, n)) for n in d["notes"]),
                 d.get("program"))


def piece_to_dict(piece: Piece) -> dict:
    return {
        "meter": f"{piece.meter[0]}/{piece.meter[1]}",
        "bar_count": piece.bar_count,
        "tracks": [track_to_dict(t) for t in piece.tracks],
        "phrases": format_phrases(piece.phrases) if piece.phrases else None,
    }


def _meter(text: str) -> tuple[int, int]:
    num, den = text.split("/")
    return int(num), int(den)


def piece_from_dict(d: dict) -> Piece:
    phrases = parse_phrases(d["phrases"]) if d.get("phrases") else None
    return Piece(_meter(d.get("meter", "4/4")), int(d["bar_count"]),
                 tuple(track_from_dict(t) for t in d["tracks"]), phrases)


def leadsheet_to_dict(lead: LeadSheet) -> dict:
    return {
        "meter": f"{lead.meter[0]}/{lead.meter[1]}",
        "bar_count": lead.bar_count,
        "melody": track_to_dict(lead.melody),
        "chords": [str(c) for c in lead.chords],
        "phrases": format_phrases(lead.phrases) if lead.phrases else None,
    }


def leadsheet_from_dict(d: dict) -> LeadSheet:
    chords = tuple(ChordSymbol.from_index(c) if isinstance(c, int) else ChordSymbol.parse(c)
                   for c in d["chords"])
    phrases = parse_phrases(d["phrases"]) if d.get("phrases") else None
    return LeadSheet(track_from_dict(d["melody"]), chords, int(d["bar_count"]),
                     _meter(d.get("meter", "4/4")), phrases)


def save_json(obj: Piece | LeadSheet, path: str | Path) -> None:
    d = piece_to_dict(obj) if isinstance(obj, Piece) else leadsheet_to_dict(obj)
    Path(path).write_text(json.dumps(d, indent=1))


def load_leadsheet(path: str | Path) -> LeadSheet:
    return leadsheet_from_dict(json.loads(Path(path).read_text()))


def load_piece(path: str | Path) -> Piece:
    return piece_from_dict(json.loads(Path(path).read_text()))
