"""Data pipeline: MIDI files to event streams to the packed training
format, plus rendering generated streams back to MIDI.

Instrument numbering: melodic program p (0-based) becomes id p+1, so
1..128; drum-channel notes use program+129, so 129..256; 257..264 and
265..272 are anonymous melodic / drum slots used by augmentation.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .events import (ANON_DRUM_RANGE, ANON_MELODIC_RANGE, DRUM_RANGE,
                     Event, EventStream, InstrumentKind, MELODIC_RANGE,
                     instrument_kind)
from .midifile import DRUM_CHANNEL, MidiNote, parse_smf, write_smf

log = logging.getLogger(__name__)

NCRD_MAGIC = b"NCRD"
NCRD_VERSION = 1
FLAG_TERMINATED = 0x01
MIN_GAP = 0.001


@dataclass
class NoteRecord:
    """One note with absolute times; velocity may be fractional."""
    instrument: int
    pitch: int
    onset: float
    offset: float
    velocity: float


@dataclass
class AugmentConfig:
    tempo_range: tuple = (0.9, 1.1)
    transpose_range: tuple = (-5, 5)       # inclusive, melodic parts only
    velocity_curve_sigma: float = 1.0 / 3.0
    jitter: float = 0.001
    dequantize: bool = True
    anonymize_p: float = 0.10


def notes_from_midi(data: bytes) -> list[NoteRecord]:
    out = []
    for n in parse_smf(data):
        if n.channel == DRUM_CHANNEL:
            inst = n.program + DRUM_RANGE[0]
        else:
            inst = n.program + MELODIC_RANGE[0]
        out.append(NoteRecord(inst, n.pitch, n.onset, n.offset, float(n.velocity)))
    return out


def trim_overlaps(notes: list[NoteRecord]) -> list[NoteRecord]:
    """Shorten notes so same-instrument same-pitch notes never overlap.

    The earlier note ends at least MIN_GAP before the next onset; notes
    squeezed to non-positive length are dropped.
    """
    groups: dict[tuple[int, int], list[NoteRecord]] = {}
    for n in notes:
        groups.setdefault((n.instrument, n.pitch), []).append(n)
    out = []
    for group in groups.values():
        group.sort(key=lambda n: n.onset)
        for i, n in enumerate(group):
            offset = n.offset
            if i + 1 < len(group):
                offset = min(offset, group[i + 1].onset - MIN_GAP)
            if offset > n.onset:
                out.append(NoteRecord(n.instrument, n.pitch,
                                      n.onset, offset, n.velocity))
    out.sort(key=lambda n: (n.onset, n.instrument, n.pitch))
    return out


def augment(notes: list[NoteRecord], rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> list[NoteRecord]:
    """Random tempo / transposition / velocity-curve / jitter augmentation."""
    stretch = rng.uniform(*cfg.tempo_range)
    semitones = int(rng.integers(cfg.transpose_range[0],
                                 cfg.transpose_range[1] + 1))
    gamma = float(np.exp(rng.normal(0.0, cfg.velocity_curve_sigma)))
    out = []
    for n in notes:
        pitch = n.pitch
        if not instrument_kind(n.instrument).is_drum:
            pitch = min(127, max(0, pitch + semitones))
        vel = 127.0 * (n.velocity / 127.0) ** gamma
        if cfg.dequantize and 0.0 < n.velocity < 127.0:
            vel = float(np.clip(vel + rng.uniform(-0.5, 0.5), 0.5, 127.0))
        onset = n.onset * stretch + rng.uniform(-cfg.jitter, cfg.jitter)
        offset = n.offset * stretch + rng.uniform(-cfg.jitter, cfg.jitter)
        onset = max(0.0, onset)
        offset = max(onset + MIN_GAP / 2, offset)
        out.append(NoteRecord(n.instrument, pitch, onset, offset, vel))
    out.sort(key=lambda n: (n.onset, n.instrument, n.pitch))
    return out


def anonymize(notes: list[NoteRecord], rng: np.random.Generator,
              p: float = 0.10) -> list[NoteRecord]:
    """Remap each instrument to an anonymous slot with probability p.

    Kind is preserved (melodic to anonymous-melodic, drums to
    anonymous-drums) and the mapping is consistent within the sequence.
    """
    mapping: dict[int, int] = {}
    for inst in sorted({n.instrument for n in notes}):
        kind = instrument_kind(inst)
        if kind in (InstrumentKind.ANON_MELODIC, InstrumentKind.ANON_DRUM):
            continue
        if rng.random() < p:
            lo, hi = ANON_DRUM_RANGE if kind.is_drum else ANON_MELODIC_RANGE
            mapping[inst] = int(rng.integers(lo, hi + 1))
    if not mapping:
        return list(notes)
    return [NoteRecord(mapping.get(n.instrument, n.instrument), n.pitch,
                       n.onset, n.offset, n.velocity) for n in notes]


def flatten(notes: list[NoteRecord], terminated: bool = True) -> EventStream:
    """Note list to an interleaved on/off event stream.

    Note-offs are events with velocity zero. Ties at the same instant
    put offs first. Time deltas are raw differences; consumers clamp.
    """
    points = []
    for n in notes:
        points.append((n.onset, 1, n.instrument, n.pitch, n.velocity))
        points.append((n.offset, 0, n.instrument, n.pitch, 0.0))
    points.sort(key=lambda p: (p[0], p[1], p[2], p[3]))
    events = []
    prev = 0.0
    for time, _, inst, pitch, vel in points:
        events.append(Event(inst, pitch, max(0.0, time - prev), vel))
        prev = time
    return EventStream(events, terminated=terminated)


# -- packed event format -----------------------------------------------------

_EVENT = struct.Struct("<HBff")     # instrument, pitch, dt, velocity


def write_ncrd(stream: EventStream) -> bytes:
    out = bytearray()
    out += NCRD_MAGIC
    flags = FLAG_TERMINATED if stream.terminated else 0
    out += struct.pack("<HBI", NCRD_VERSION, flags, len(stream.events))
    for e in stream.events:
        out += _EVENT.pack(e.instrument, e.pitch, e.time_delta, e.velocity)
    return bytes(out)


def read_ncrd(data: bytes) -> EventStream:
    if data[:4] != NCRD_MAGIC:
        raise ValueError("not a packed event stream")
    if len(data) < 11:
        raise ValueError("truncated header")
    version, flags, count = struct.unpack_from("<HBI", data, 4)
    if version != NCRD_VERSION:
        raise ValueError(f"unsupported version {version}")
    events = []
    off = 4 + 7
    if len(data) < off + count * _EVENT.size:
        raise ValueError("truncated event data")
    for _ in range(count):
        inst, pitch, dt, vel = _EVENT.unpack_from(data, off)
        off += _EVENT.size
        events.append(Event(inst, pitch, float(dt), float(vel)))
    return EventStream(events, terminated=bool(flags & FLAG_TERMINATED))


def preprocess(in_dir: str, out_dir: str, seed: int = 0,
               augment_copies: int = 0,
               aug: AugmentConfig = AugmentConfig()) -> dict:
    """Convert a directory of .mid files to packed streams.

    Writes one .ncrd per input (plus augment_copies augmented variants);
    corrupt inputs are skipped with a warning. Returns counters.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    stats = {"files": 0, "skipped": 0, "events": 0}
    names = sorted(f for f in os.listdir(in_dir)
                   if f.lower().endswith((".mid", ".midi")))
    for name in names:
        path = os.path.join(in_dir, name)
        try:
            with open(path, "rb") as f:
                notes = notes_from_midi(f.read())
        except (ValueError, IndexError, struct.error) as exc:
            log.warning("skipping %s: %s", name, exc)
            stats["skipped"] += 1
            continue
        notes = trim_overlaps(notes)
        base = os.path.splitext(name)[0]
        variants = [(base, notes)]
        for k in range(augment_copies):
            v = augment(notes, rng, aug)
            v = anonymize(v, rng, aug.anonymize_p)
            variants.append((f"{base}.aug{k}", v))
        for vname, vnotes in variants:
            stream = flatten(vnotes)
            with open(os.path.join(out_dir, vname + ".ncrd"), "wb") as f:
                f.write(write_ncrd(stream))
            stats["files"] += 1
            stats["events"] += len(stream.events)
    return stats


def load_dataset(path: str) -> list[EventStream]:
    """All .ncrd streams under a directory (or a single file)."""
    if os.path.isfile(path):
        names = [path]
    else:
        names = [os.path.join(path, f) for f in sorted(os.listdir(path))
                 if f.endswith(".ncrd")]
    out = []
    for p in names:
        with open(p, "rb") as f:
            out.append(read_ncrd(f.read()))
    return out


def render_midi(stream: EventStream) -> bytes:
    """Event stream to a playable format 0 MIDI file.

    Drum instruments share channel 9; melodic instruments get their own
    channel (reused round-robin past 15 parts). Anonymous melodic slots
    render as program 0.
    """
    melodic_channels = [c for c in range(16) if c != DRUM_CHANNEL]
    assign: dict[int, int] = {}
    messages = []
    time = 0.0
    held = set()
    for e in stream.events:
        time += e.time_delta
        kind = instrument_kind(e.instrument)
        if kind.is_drum:
            ch = DRUM_CHANNEL
        elif e.instrument in assign:
            ch = assign[e.instrument]
        else:
            ch = melodic_channels[len(assign) % len(melodic_channels)]
            assign[e.instrument] = ch
            program = (e.instrument - MELODIC_RANGE[0]
                       if kind is InstrumentKind.MELODIC else 0)
            messages.append((time, "program", ch, program, 0))
        if e.velocity > 0:
            messages.append((time, "on", ch, e.pitch, round(e.velocity)))
            held.add((ch, e.pitch))
        else:
            messages.append((time, "off", ch, e.pitch, 0))
            held.discard((ch, e.pitch))
    for ch, pitch in sorted(held):
        messages.append((time, "off", ch, pitch, 0))
    return write_smf(messages)
