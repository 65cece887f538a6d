"""MIDI byte stream to engine events and back.

Ports are an abstraction so tests (and headless machines) can run the
bridge without a MIDI stack: anything with send(msg) and
set_callback(cb) works, where msg is a (status, data1, data2) tuple.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from ..events import DRUM_RANGE, Event, MELODIC_RANGE, instrument_kind
from ..midifile import DRUM_CHANNEL
from .server import Session

log = logging.getLogger(__name__)


class LoopbackPort:
    """In-memory port: inject() plays bytes into the bridge, sent
    collects everything the bridge emits."""

    def __init__(self):
        self.sent: list[tuple[int, int, int]] = []
        self._callback = None

    def set_callback(self, cb):
        self._callback = cb

    def send(self, msg):
        self.sent.append(tuple(msg))

    def inject(self, status: int, d1: int, d2: int):
        if self._callback is not None:
            self._callback((status, d1, d2))


@dataclass
class MidiBridge:
    """Feeds incoming note on/off messages to the engine with measured
    inter-event times, and renders outgoing events to MIDI messages."""

    session: Session
    port: object
    clock: object = time.monotonic
    _programs: list = field(default_factory=lambda: [0] * 16)
    _assign: dict = field(default_factory=dict)
    _last_in: float | None = None
    _last_out: float | None = None

    def __post_init__(self):
        self.port.set_callback(self.on_message)

    # -- inbound -------------------------------------------------------------

    def _instrument_for(self, channel: int) -> int:
        base = DRUM_RANGE[0] if channel == DRUM_CHANNEL else MELODIC_RANGE[0]
        return self._programs[channel] + base

    def on_message(self, msg):
        status, d1, d2 = msg
        kind = status & 0xF0
        channel = status & 0x0F
        if kind == 0xC0:
            self._programs[channel] = d1
            return
        if kind not in (0x80, 0x90):
            return
        velocity = 0.0 if kind == 0x80 or d2 == 0 else float(d2)
        now = self.clock()
        dt = 0.0 if self._last_in is None else max(0.0, now - self._last_in)
        self._last_in = now
        inst = self._instrument_for(channel)
        self.session.submit(lambda eng: eng.feed(inst, d1, dt, velocity))

    # -- outbound ------------------------------------------------------------

    def _channel_for(self, instrument: int) -> int:
        if instrument_kind(instrument).is_drum:
            return DRUM_CHANNEL
        if instrument not in self._assign:
            free = [c for c in range(16) if c != DRUM_CHANNEL]
            ch = free[len(self._assign) % len(free)]
            self._assign[instrument] = ch
            program = (instrument - MELODIC_RANGE[0]
                       if instrument <= MELODIC_RANGE[1] else 0)
            self.port.send((0xC0 | ch, program, 0))
        return self._assign[instrument]

    def send_event(self, e: Event):
        ch = self._channel_for(e.instrument)
        if e.velocity > 0:
            vel = max(1, min(127, round(e.velocity)))
            self.port.send((0x90 | ch, e.pitch, vel))
        else:
            self.port.send((0x80 | ch, e.pitch, 0))
        self._last_out = self.clock()
