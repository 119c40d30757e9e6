"""Minimal Standard MIDI File (SMF type 0/1) reader and writer.

Only the events the score model needs are decoded: note on/off, program
change, time signature and end-of-track. Everything else is skipped while
parsing. Parse failures carry the byte offset where decoding stopped.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path


class MidiParseError(ValueError):
    """Malformed MIDI data; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class MidiEvent:
    tick: int
    kind: str  # "note_on" | "note_off" | "program" | "time_signature" | "end_of_track"
    channel: int = 0
    data: tuple = ()


@dataclass
class MidiFileData:
    format: int
    ticks_per_beat: int
    tracks: list[list[MidiEvent]] = field(default_factory=list)


# data-byte count for channel messages, keyed by status high nibble
_CHANNEL_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _read_varlen(buf: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for i in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = buf[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos - 1)


def _write_varlen(value: int) -> bytes:
    if value < 0:
        raise ValueError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _parse_track(buf: bytes, pos: int, end: int) -> list[MidiEvent]:
    events: list[MidiEvent] = []
    tick = 0
    running: int | None = None
    while pos < end:
        delta, pos = _read_varlen(buf, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("missing event after delta time", pos)
        status = buf[pos]
        if status == 0xFF:
            if pos + 1 >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = buf[pos + 1]
            length, data_pos = _read_varlen(buf, pos + 2, end)
            if data_pos + length > end:
                raise MidiParseError("meta event runs past end of track chunk", data_pos)
            payload = buf[data_pos:data_pos + length]
            if meta_type == 0x58:
                if length < 2:
                    raise MidiParseError("short time-signature meta event", data_pos)
                events.append(MidiEvent(tick, "time_signature", data=(payload[0], 2 ** payload[1])))
            elif meta_type == 0x2F:
                events.append(MidiEvent(tick, "end_of_track"))
                return events
            pos = data_pos + length
            running = None
            continue
        if status in (0xF0, 0xF7):
            length, data_pos = _read_varlen(buf, pos + 1, end)
            if data_pos + length > end:
                raise MidiParseError("sysex event runs past end of track chunk", data_pos)
            pos = data_pos + length
            running = None
            continue
        if status & 0x80:
            if status >= 0xF0:
                raise MidiParseError(f"unexpected system message 0x{status:02X} in track", pos)
            running = status
            pos += 1
        elif running is None:
            raise MidiParseError("data byte without running status", pos)
        else:
            status = running
        n_data = _CHANNEL_DATA_LEN[status & 0xF0]
        if pos + n_data > end:
            raise MidiParseError("truncated channel message", pos)
        data = buf[pos:pos + n_data]
        if any(b & 0x80 for b in data):
            raise MidiParseError("status byte where data byte expected", pos)
        pos += n_data
        kind = status & 0xF0
        channel = status & 0x0F
        if kind == 0x90 and data[1] > 0:
            events.append(MidiEvent(tick, "note_on", channel, (data[0], data[1])))
        elif kind in (0x80, 0x90):
            events.append(MidiEvent(tick, "note_off", channel, (data[0],)))
        elif kind == 0xC0:
            events.append(MidiEvent(tick, "program", channel, (data[0],)))
    # track chunk without explicit end-of-track
    events.append(MidiEvent(tick, "end_of_track"))
    return events


def parse_midi(buf: bytes) -> MidiFileData:
    if len(buf) < 14 or buf[:4] != b"MThd":
        raise MidiParseError("missing MThd header chunk", 0)
    (hlen,) = struct.unpack(">I", buf[4:8])
    if hlen < 6:
        raise MidiParseError("header chunk shorter than 6 bytes", 4)
    fmt, ntrks, division = struct.unpack(">HHH", buf[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks per beat", 12)
    data = MidiFileData(format=fmt, ticks_per_beat=division)
    pos = 8 + hlen
    while len(data.tracks) < ntrks:
        if pos + 8 > len(buf):
            raise MidiParseError(
                f"expected {ntrks} track chunks, found {len(data.tracks)}", pos)
        chunk_id = buf[pos:pos + 4]
        (length,) = struct.unpack(">I", buf[pos + 4:pos + 8])
        start = pos + 8
        if start + length > len(buf):
            raise MidiParseError("chunk length exceeds file size", pos + 4)
        if chunk_id == b"MTrk":
            data.tracks.append(_parse_track(buf, start, start + length))
        pos = start + length
    return data


def read_midi_file(path: str | Path) -> MidiFileData:
    return parse_midi(Path(path).read_bytes())


def _meta(meta_type: int, payload: bytes) -> bytes:
    return bytes([0xFF, meta_type]) + _write_varlen(len(payload)) + payload


def encode_track(events: list[tuple[int, int, bytes]], end_tick: int) -> bytes:
    """Encode ``(tick, order, message)`` triples into an MTrk chunk.

    ``order`` breaks ties at equal ticks (lower first), which lets callers
    put note-offs ahead of note-ons.
    """
    body = bytearray()
    tick = 0
    for ev_tick, _, message in sorted(events, key=lambda e: (e[0], e[1])):
        body += _write_varlen(ev_tick - tick)
        body += message
        tick = ev_tick
    body += _write_varlen(max(end_tick - tick, 0)) + _meta(0x2F, b"")
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def meta_track(numerator: int, denominator: int, end_tick: int, tempo_us: int = 500_000) -> bytes:
    dd = denominator.bit_length() - 1
    events = [
        (0, 0, _meta(0x58, bytes([numerator, dd, 24, 8]))),
        (0, 1, _meta(0x51, tempo_us.to_bytes(3, "big"))),
    ]
    return encode_track(events, end_tick)


def build_file(track_chunks: list[bytes], ticks_per_beat: int) -> bytes:
    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(track_chunks), ticks_per_beat)
    return header + b"".join(track_chunks)
