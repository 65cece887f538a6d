"""Interactive applications built on the engine: free generation,
pitch replacement, live harmonization, call-and-response improvisation,
and a surprise meter.

All wall-clock time is passed in explicitly (`now` in seconds) so the
state machines are deterministic under test.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

from .distributions import SamplingControls
from .engine import Engine, Prediction, QuerySpec
from .events import Event, EventStream, MELODIC_RANGE

log = logging.getLogger(__name__)

NOTE_ON_VELOCITY = SamplingControls(truncation=(0.5, 127.0))


def _merge_whitelist(controls: dict, modality: str, ids) -> dict:
    out = dict(controls)
    base = out.get(modality, SamplingControls())
    out[modality] = dataclasses.replace(base, whitelist=frozenset(ids))
    return out


def generate(engine: Engine, max_events: int,
             steering: QuerySpec | None = None,
             instruments: frozenset | None = None,
             uniform_first_instrument: bool = True,
             stop_on_eos: bool = False,
             reset: bool = True) -> EventStream:
    """Sample a free-running performance, one query/feed round per event.

    The first event's instrument is drawn uniformly (from `instruments`
    or the melodic bank) rather than from the model, which is otherwise
    heavily biased toward its most common training instrument. The
    steering template's fixed values and controls are re-applied at
    every step.
    """
    if reset:
        engine.reset()
    template = steering if steering is not None else QuerySpec()
    controls = dict(template.controls)
    if instruments is not None:
        controls = _merge_whitelist(controls, "instrument", instruments)

    events = []
    for i in range(max_events):
        spec = template
        if i == 0 and uniform_first_instrument and template.instrument is None:
            pool = sorted(instruments) if instruments else \
                list(range(MELODIC_RANGE[0], MELODIC_RANGE[1] + 1))
            first = int(pool[engine.rng.integers(len(pool))])
            spec = dataclasses.replace(template, instrument=first,
                                       controls=controls, order=None)
        elif controls is not template.controls:
            spec = dataclasses.replace(template, controls=controls)
        pred = engine.query(spec)
        e = pred.to_event()
        engine.feed_event(e)
        events.append(e)
        if stop_on_eos and engine.rng.random() < engine.eos_probability():
            return EventStream(events, terminated=True)
    return EventStream(events, terminated=False)


def autopitch_step(engine: Engine, instrument: int, time_delta: float,
                   velocity: float,
                   controls: SamplingControls | None = None) -> int:
    """Query only the pitch for a note-on whose other sub-values came
    from a controller, then feed the completed event."""
    if velocity <= 0:
        raise ValueError("autopitch completes note-ons; velocity must be > 0")
    spec = QuerySpec(instrument=instrument, time_delta=time_delta,
                     velocity=velocity,
                     controls={} if controls is None else {"pitch": controls},
                     order=("pitch",))
    pred = engine.query(spec)
    engine.feed_event(pred.to_event())
    return pred.pitch


def autopitch(engine: Engine, stream: EventStream,
              controls: SamplingControls | None = None,
              reset: bool = True) -> EventStream:
    """Replace every note-on pitch in a stream with a model-chosen one.

    Timing, velocity and instrument pass through unchanged. Note-offs
    follow whatever pitch their note-on was mapped to; a held pitch is
    never doubled on the same instrument.
    """
    if reset:
        engine.reset()
    active: dict[tuple, int] = {}   # (instrument, played pitch) -> new pitch
    out = []
    for e in stream.events:
        if e.velocity > 0:
            held = {p for (inst, p) in engine.held_notes if inst == e.instrument}
            base = controls or SamplingControls()
            c = dataclasses.replace(base, blacklist=base.blacklist | held)
            pitch = autopitch_step(engine, e.instrument, e.time_delta,
                                   e.velocity, controls=c)
            active[(e.instrument, e.pitch)] = pitch
            out.append(Event(e.instrument, pitch, e.time_delta, e.velocity))
        else:
            pitch = active.pop((e.instrument, e.pitch), e.pitch)
            new = Event(e.instrument, pitch, e.time_delta, e.velocity)
            engine.feed_event(new)
            out.append(new)
    return EventStream(out, terminated=stream.terminated)


class Harmonizer:
    """Answers every played note-on with `voices` simultaneous harmony
    notes, and ties their note-offs to the player's release.

    The caller feeds player events itself and then calls harmonize_on /
    harmonize_off; harmony events are queried with time fixed at zero
    and velocity constrained to the note-on range, and are fed by the
    harmonizer. By default the model also chooses the harmony
    instrument; pass `instrument` to pin it.
    """

    def __init__(self, engine: Engine, voices: int = 1,
                 instrument: int | None = None):
        if voices < 1:
            raise ValueError("need at least one harmony voice")
        self.engine = engine
        self.voices = voices
        self.instrument = instrument
        self._map: dict[tuple, list] = {}

    def harmonize_on(self, instrument: int, pitch: int,
                     velocity: float) -> list[Event]:
        """Harmony note-ons for an already-fed player note-on."""
        chosen = []
        out = []
        for _ in range(self.voices):
            # sounding pitches are excluded so on/off pairing stays legal
            if self.instrument is None:
                sounding = {p for (_, p) in self.engine.held_notes}
            else:
                sounding = {p for (i, p) in self.engine.held_notes
                            if i == self.instrument}
            pred = self.engine.query(QuerySpec(
                instrument=self.instrument, time_delta=0.0,
                controls={"pitch": SamplingControls(blacklist=frozenset(sounding)),
                          "velocity": NOTE_ON_VELOCITY}))
            h = Event(pred.instrument, pred.pitch, 0.0, pred.velocity)
            self.engine.feed_event(h)
            chosen.append((h.instrument, h.pitch))
            out.append(h)
        self._map[(instrument, pitch)] = chosen
        return out

    def harmonize_off(self, instrument: int, pitch: int) -> list[Event]:
        """Matching harmony note-offs for an already-fed player note-off."""
        entry = self._map.pop((instrument, pitch), None)
        if entry is None:
            log.warning("note-off for unmapped note (%d, %d)", instrument, pitch)
            return []
        out = []
        for h_inst, h_pitch in entry:
            h = Event(h_inst, h_pitch, 0.0, 0.0)
            self.engine.feed_event(h)
            out.append(h)
        return out

    @property
    def harmony_map(self) -> dict:
        return {k: list(v) for k, v in self._map.items()}


@dataclass
class PendingEvent:
    prediction: Prediction
    deadline: float


class Improviser:
    """Call-and-response loop: the model keeps one event queued; player
    input cancels it and triggers a requery.

    poll(now) emits the queued event once its deadline passes, feeding
    it with the actually elapsed time (which can exceed the sampled
    delta when polling is slow). Instruments in `reserved` belong to the
    player and are never sampled.
    """

    def __init__(self, engine: Engine, reserved: frozenset = frozenset(),
                 controls: dict | None = None):
        self.engine = engine
        self.reserved = frozenset(reserved)
        self.controls = dict(controls or {})
        self._last_time: float | None = None
        self._pending: PendingEvent | None = None

    @property
    def pending(self) -> PendingEvent | None:
        return self._pending

    def start(self, now: float):
        self._last_time = now
        self._requery()

    def _requery(self):
        controls = dict(self.controls)
        if self.reserved:
            base = controls.get("instrument", SamplingControls())
            controls["instrument"] = dataclasses.replace(
                base, blacklist=base.blacklist | self.reserved)
        pred = self.engine.query(QuerySpec(controls=controls))
        self._pending = PendingEvent(pred, self._last_time + pred.time_delta)

    def on_external(self, now: float, instrument: int, pitch: int,
                    velocity: float):
        """Player input: feed it and replace the queued event."""
        if self._last_time is None:
            raise RuntimeError("start() must be called first")
        dt = max(0.0, now - self._last_time)
        self.engine.feed(instrument, pitch, dt, velocity)
        self._last_time = now
        self._requery()

    def poll(self, now: float) -> Event | None:
        """Emit the queued event if its time has come."""
        if self._pending is None or now < self._pending.deadline:
            return None
        p = self._pending.prediction
        dt = max(0.0, now - self._last_time)   # re-measure at emission
        e = Event(p.instrument, p.pitch, dt, p.velocity)
        self.engine.feed_event(e)
        self._last_time = now
        self._requery()
        return e


def surprise(engine: Engine, stream: EventStream,
             reset: bool = True) -> list[dict]:
    """Per-event negative log likelihood, scored before each feed."""
    if reset:
        engine.reset()
    out = []
    for e in stream.events:
        lp = engine.event_log_prob(e.instrument, e.pitch,
                                   e.time_delta, e.velocity)
        out.append({k: -v for k, v in lp.items()})
        engine.feed_event(e)
    return out
