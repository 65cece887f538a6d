"""Standard MIDI file reading and writing.

Reads format 0 and 1 files: tracks are merged, tempo changes are
integrated to give every message an absolute time in seconds, and note
on/off pairs are matched per (channel, pitch) in FIFO order. A note-on
with velocity zero counts as a note-off. Writes single-track format 0
files at a fixed tempo.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

DEFAULT_TEMPO = 500_000      # microseconds per quarter note (120 bpm)
DRUM_CHANNEL = 9


@dataclass(frozen=True)
class MidiNote:
    onset: float             # seconds
    offset: float
    channel: int             # 0..15
    program: int             # 0..127, program active at the onset
    pitch: int
    velocity: int


def read_varint(data: bytes, i: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        b = data[i]
        i += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, i
    raise ValueError("variable-length quantity longer than 4 bytes")


def write_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


_VOICE_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track(chunk: bytes) -> list[tuple[int, int, bytes]]:
    """(tick, status, data) triples; meta events use status 0xFF00|type."""
    events = []
    i = 0
    tick = 0
    running = None
    while i < len(chunk):
        delta, i = read_varint(chunk, i)
        tick += delta
        status = chunk[i]
        if status & 0x80:
            i += 1
            if status < 0xF0:
                running = status
        else:
            if running is None:
                raise ValueError("data byte with no running status")
            status = running
        if status < 0xF0:
            n = _VOICE_LEN[status & 0xF0]
            events.append((tick, status, chunk[i:i + n]))
            i += n
        elif status == 0xFF:
            mtype = chunk[i]
            i += 1
            length, i = read_varint(chunk, i)
            events.append((tick, 0xFF00 | mtype, chunk[i:i + length]))
            i += length
            if mtype == 0x2F:
                break
        elif status in (0xF0, 0xF7):
            length, i = read_varint(chunk, i)
            i += length
        else:
            raise ValueError(f"unsupported status byte 0x{status:02X}")
    return events


def _chunks(data: bytes):
    i = 0
    while i + 8 <= len(data):
        tag = data[i:i + 4]
        (length,) = struct.unpack_from(">I", data, i + 4)
        yield tag, data[i + 8:i + 8 + length]
        i += 8 + length


def parse_smf(data: bytes) -> list[MidiNote]:
    """Notes with absolute second times, sorted by onset."""
    it = _chunks(data)
    try:
        tag, head = next(it)
    except StopIteration:
        raise ValueError("empty file") from None
    if tag != b"MThd" or len(head) < 6:
        raise ValueError("missing MThd header")
    fmt, ntrks, division = struct.unpack_from(">HHH", head)
    if fmt not in (0, 1):
        raise ValueError(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise ValueError("SMPTE time divisions are not supported")
    if division == 0:
        raise ValueError("zero ticks per quarter note")

    merged: list[tuple[int, int, int, bytes]] = []
    order = 0
    for tag, chunk in it:
        if tag != b"MTrk":
            continue
        for tick, status, payload in _parse_track(chunk):
            merged.append((tick, order, status, payload))
            order += 1
    merged.sort(key=lambda e: (e[0], e[1]))

    # integrate the tempo map tick by tick
    tempo = DEFAULT_TEMPO
    last_tick = 0
    seconds = 0.0
    programs = [0] * 16
    open_notes: dict[tuple[int, int], list[tuple[float, int, int]]] = {}
    notes: list[MidiNote] = []

    def close(ch, pitch, time):
        stack = open_notes.get((ch, pitch))
        if stack:
            onset, program, vel = stack.pop(0)
            notes.append(MidiNote(onset, time, ch, program, pitch, vel))

    for tick, _, status, payload in merged:
        seconds += (tick - last_tick) * tempo / (division * 1e6)
        last_tick = tick
        if status == 0xFF51 and len(payload) == 3:
            tempo = int.from_bytes(payload, "big")
            continue
        if status > 0xFF:
            continue
        kind = status & 0xF0
        ch = status & 0x0F
        if kind == 0xC0:
            programs[ch] = payload[0]
        elif kind == 0x80 or (kind == 0x90 and payload[1] == 0):
            close(ch, payload[0], seconds)
        elif kind == 0x90:
            open_notes.setdefault((ch, payload[0]), []).append(
                (seconds, programs[ch], payload[1]))

    for (ch, pitch), stack in open_notes.items():
        for onset, program, vel in stack:   # close dangling notes at the end
            notes.append(MidiNote(onset, seconds, ch, program, pitch, vel))
    notes.sort(key=lambda n: (n.onset, n.channel, n.pitch))
    return notes


def write_smf(messages, tpq: int = 480, tempo: int = DEFAULT_TEMPO) -> bytes:
    """Encode (time_s, kind, channel, a, b) messages as a format 0 file.

    kind is "on", "off" or "program"; a/b are pitch/velocity (program
    number for "program"). Messages are stably sorted by time.
    """
    ticks_per_second = tpq * 1e6 / tempo
    body = bytearray()
    body += write_varint(0) + bytes([0xFF, 0x51, 0x03]) + tempo.to_bytes(3, "big")
    last = 0
    for time, kind, ch, a, b in sorted(messages, key=lambda m: m[0]):
        tick = max(0, round(time * ticks_per_second))
        body += write_varint(tick - last)
        last = tick
        if kind == "on":
            body += bytes([0x90 | ch, a & 0x7F, max(1, min(127, int(b)))])
        elif kind == "off":
            body += bytes([0x80 | ch, a & 0x7F, 0x40])
        elif kind == "program":
            body += bytes([0xC0 | ch, a & 0x7F])
        else:
            raise ValueError(f"unknown message kind {kind!r}")
    body += write_varint(0) + bytes([0xFF, 0x2F, 0x00])

    out = bytearray()
    out += b"MThd" + struct.pack(">IHHH", 6, 0, 1, tpq)
    out += b"MTrk" + struct.pack(">I", len(body)) + body
    return bytes(out)
