"""Domain types for MIDI-derived event streams.

An event is (instrument, pitch, time_delta, velocity) with velocity 0.0
reserved for note-offs. Instrument IDs cover General MIDI melodic (1-128),
drums (129-256) and anonymous stand-ins (257-264 melodic, 265-272 drum).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

N_PITCHES = 128
N_INSTRUMENTS = 272

MELODIC_RANGE = (1, 128)
DRUM_RANGE = (129, 256)
ANON_MELODIC_RANGE = (257, 264)
ANON_DRUM_RANGE = (265, 272)

# hard ceiling on inter-event time fed to the model, in seconds
MAX_TIME_DELTA = 10.0


class InstrumentKind(Enum):
    MELODIC = "melodic"
    DRUM = "drum"
    ANON_MELODIC = "anon_melodic"
    ANON_DRUM = "anon_drum"

    @property
    def is_drum(self) -> bool:
        return self in (InstrumentKind.DRUM, InstrumentKind.ANON_DRUM)


def instrument_kind(instrument: int) -> InstrumentKind:
    """Classify an instrument ID into its range band."""
    if not isinstance(instrument, (int,)) or isinstance(instrument, bool):
        raise TypeError(f"instrument ID must be an int, got {instrument!r}")
    if MELODIC_RANGE[0] <= instrument <= MELODIC_RANGE[1]:
        return InstrumentKind.MELODIC
    if DRUM_RANGE[0] <= instrument <= DRUM_RANGE[1]:
        return InstrumentKind.DRUM
    if ANON_MELODIC_RANGE[0] <= instrument <= ANON_MELODIC_RANGE[1]:
        return InstrumentKind.ANON_MELODIC
    if ANON_DRUM_RANGE[0] <= instrument <= ANON_DRUM_RANGE[1]:
        return InstrumentKind.ANON_DRUM
    raise ValueError(f"instrument ID {instrument} outside [1, {N_INSTRUMENTS}]")


@dataclass(frozen=True, slots=True)
class Event:
    """One stream element. velocity == 0.0 means note-off."""

    instrument: int
    pitch: int
    time_delta: float  # seconds since the previous event
    velocity: float

    def __post_init__(self):
        instrument_kind(self.instrument)
        if not 0 <= self.pitch < N_PITCHES:
            raise ValueError(f"pitch {self.pitch} outside [0, 127]")
        if not (math.isfinite(self.time_delta) and self.time_delta >= 0):
            raise ValueError(f"time_delta must be finite and >= 0, got {self.time_delta}")
        if not (math.isfinite(self.velocity) and 0 <= self.velocity <= 127):
            raise ValueError(f"velocity {self.velocity} outside [0, 127]")


def is_noteoff(e: Event) -> bool:
    return e.velocity == 0


@dataclass(slots=True)
class EventStream:
    """Ordered events plus whether end-of-sequence was observed."""

    events: list[Event] = field(default_factory=list)
    terminated: bool = False

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


def absolute_times(stream: EventStream) -> list[float]:
    """Prefix sums of time_delta, one entry per event."""
    out, t = [], 0.0
    for e in stream.events:
        t += e.time_delta
        out.append(t)
    return out
