"""Stateful inference engine.

feed() advances the hidden state with an observed event; query() samples
any subset of a next event's sub-values without touching engine state,
so callers are free to query many times, commit to an event, and only
then feed it back.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .distributions import (NEUTRAL, SamplingControls, categorical_log_prob,
                            categorical_log_probs, categorical_sample,
                            dmol_bin_log_prob, dmol_sample)
from .events import (MAX_TIME_DELTA, N_INSTRUMENTS, N_PITCHES, Event,
                     instrument_kind)
from .model import (MODALITIES, ModelConfig, ModelParameters, condition,
                    embed_categorical, embed_continuous, eos_logit,
                    gru_step, head_forward, hidden_projection, initial_state)

log = logging.getLogger(__name__)

_FIXED_FIELDS = {"instrument": "instrument", "pitch": "pitch",
                 "time": "time_delta", "velocity": "velocity"}

# a sampled velocity in the lowest half-bin means "note off"
NOTEOFF_THRESHOLD = 0.5


@dataclass(frozen=True)
class QuerySpec:
    """What to sample: fixed sub-values plus per-modality controls.

    Modalities with a fixed value enter the conditioning set up front;
    the rest are sampled in `order` (canonical order when omitted), each
    conditioning on everything chosen before it.
    """
    instrument: int | None = None
    pitch: int | None = None
    time_delta: float | None = None
    velocity: float | None = None
    controls: dict = field(default_factory=dict)
    order: tuple | None = None

    def __post_init__(self):
        if self.instrument is not None:
            instrument_kind(int(self.instrument))
        if self.pitch is not None and not 0 <= int(self.pitch) < N_PITCHES:
            raise ValueError(f"pitch {self.pitch} out of range")
        if self.time_delta is not None and not 0 <= self.time_delta <= MAX_TIME_DELTA:
            raise ValueError(f"time_delta {self.time_delta} outside "
                             f"[0, {MAX_TIME_DELTA}]")
        if self.velocity is not None and not 0 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside [0, 127]")
        for k, c in self.controls.items():
            if k not in MODALITIES:
                raise ValueError(f"unknown modality {k!r}")
            if not isinstance(c, SamplingControls):
                raise TypeError("controls values must be SamplingControls")
        if self.order is not None:
            unfixed = {m for m in MODALITIES if self.fixed_value(m) is None}
            got = set(self.order)
            if len(self.order) != len(got) or got not in (unfixed, set(MODALITIES)):
                raise ValueError(
                    f"order must be a permutation of {sorted(unfixed)} "
                    f"or of all four modalities")

    def fixed_value(self, modality: str):
        return getattr(self, _FIXED_FIELDS[modality])

    def full_order(self) -> tuple:
        """Processing order: fixed values first unless order names all four."""
        fixed = [m for m in MODALITIES if self.fixed_value(m) is not None]
        if self.order is not None and len(self.order) == len(MODALITIES):
            return tuple(self.order)
        tail = self.order if self.order is not None else \
            tuple(m for m in MODALITIES if m not in fixed)
        return tuple(fixed) + tuple(tail)


@dataclass(frozen=True)
class Prediction:
    """A complete event plus the model's log probability of every
    sub-value under its (unconstrained) conditional, in query order."""
    instrument: int
    pitch: int
    time_delta: float
    velocity: float
    log_probs: dict

    def to_event(self) -> Event:
        return Event(self.instrument, self.pitch, self.time_delta, self.velocity)


@dataclass(frozen=True)
class Snapshot:
    state: tuple
    held: frozenset
    events_fed: int = 0


class Engine:
    def __init__(self, params: ModelParameters, seed: int | None = None):
        self.params = params
        self.cfg: ModelConfig = params.config
        self.rng = np.random.default_rng(seed)
        self._p = params.view(train=False)
        self._state = None
        self._fh = None
        self._held: set = set()
        self.reset()

    @classmethod
    def from_checkpoint(cls, path: str, seed: int | None = None) -> "Engine":
        params, _, _ = load_checkpoint(path)
        return cls(params, seed=seed)

    # -- state ---------------------------------------------------------------

    def reset(self):
        self._state = [s.copy() for s in initial_state(self._p, self.cfg, 1)]
        self._held.clear()
        self._fh = None
        self.events_fed = 0

    def snapshot(self) -> Snapshot:
        return Snapshot(state=tuple(s.copy() for s in self._state),
                        held=frozenset(self._held),
                        events_fed=self.events_fed)

    def restore(self, snap: Snapshot):
        if len(snap.state) != self.cfg.gru_layers:
            raise ValueError("snapshot does not match this model")
        self._state = [s.copy() for s in snap.state]
        self._held = set(snap.held)
        self._fh = None
        self.events_fed = snap.events_fed

    @property
    def held_notes(self) -> frozenset:
        return frozenset(self._held)

    def _hidden_projection(self):
        if self._fh is None:
            self._fh = hidden_projection(self._p, self.cfg, self._state[-1][0])
        return self._fh

    # -- observation ---------------------------------------------------------

    def feed(self, instrument: int, pitch: int, time_delta: float,
             velocity: float):
        """Advance the state with one observed event."""
        instrument_kind(instrument)
        if not 0 <= pitch < N_PITCHES:
            raise ValueError(f"pitch {pitch} out of range")
        if not 0 <= velocity <= 127:
            raise ValueError(f"velocity {velocity} outside [0, 127]")
        if not np.isfinite(time_delta) or time_delta < 0:
            raise ValueError(f"bad time_delta {time_delta}")
        if time_delta > MAX_TIME_DELTA:
            log.warning("time_delta %.3f clamped to %.1f s",
                        time_delta, MAX_TIME_DELTA)
            time_delta = MAX_TIME_DELTA
        x = self._event_embedding(instrument, pitch, time_delta, velocity)
        self._state, _ = gru_step(self._p, self.cfg, self._state, x[None, :])
        self._fh = None
        self.events_fed += 1
        key = (instrument, pitch)
        if velocity >= NOTEOFF_THRESHOLD:
            self._held.add(key)
        else:
            self._held.discard(key)

    def feed_event(self, e: Event):
        self.feed(e.instrument, e.pitch, e.time_delta, e.velocity)

    def _event_embedding(self, instrument, pitch, dt, vel):
        p = self._p
        return (embed_categorical(p["emb.instrument"], instrument - 1)
                + embed_categorical(p["emb.pitch"], pitch)
                + embed_continuous(p, "time", float(dt))
                + embed_continuous(p, "velocity", float(vel)))

    def _modality_embedding(self, modality: str, value):
        p = self._p
        if modality == "instrument":
            return embed_categorical(p["emb.instrument"], int(value) - 1)
        if modality == "pitch":
            return embed_categorical(p["emb.pitch"], int(value))
        return embed_continuous(p, modality, float(value))

    def _head(self, modality: str, cond_emb: dict):
        z = condition(self._hidden_projection(), cond_emb)
        return head_forward(self._p, self.cfg, modality, z)

    # -- prediction ----------------------------------------------------------

    def query(self, spec: QuerySpec = QuerySpec(),
              rng: np.random.Generator | None = None) -> Prediction:
        """Sample a complete next event. Engine state is not modified.

        Fixed sub-values are returned verbatim but still scored, so
        log_probs always has all four entries and their sum equals
        event_log_prob of the result under the same order.
        """
        rng = rng if rng is not None else self.rng
        values = {}
        cond_emb = {}
        log_probs = {}
        for m in spec.full_order():
            dist = self._head(m, cond_emb)
            fixed = spec.fixed_value(m)
            if fixed is not None:
                value = int(fixed) if m in ("instrument", "pitch") else float(fixed)
                if m == "instrument":
                    lp = categorical_log_prob(dist, value - 1)
                elif m == "pitch":
                    lp = categorical_log_prob(dist, value)
                else:
                    lp = dmol_bin_log_prob(dist, value)
            else:
                c = spec.controls.get(m, NEUTRAL)
                if m in ("instrument", "pitch"):
                    idx = categorical_sample(dist, self._index_controls(m, c), rng)
                    value = idx + 1 if m == "instrument" else idx
                    lp = categorical_log_prob(dist, idx)
                else:
                    value = dmol_sample(dist, c, rng)
                    if m == "velocity" and value < NOTEOFF_THRESHOLD:
                        value = 0.0
                    lp = dmol_bin_log_prob(dist, value)
            values[m] = value
            log_probs[m] = float(ad.val(lp))
            cond_emb[m] = self._modality_embedding(m, value)
        return Prediction(instrument=int(values["instrument"]),
                          pitch=int(values["pitch"]),
                          time_delta=float(values["time"]),
                          velocity=float(values["velocity"]),
                          log_probs=log_probs)

    @staticmethod
    def _index_controls(modality: str, c: SamplingControls) -> SamplingControls:
        """Instrument constraints arrive as 1-based ids; heads use indices."""
        if modality != "instrument":
            return c
        wl = frozenset(i - 1 for i in c.whitelist) if c.whitelist else None
        bl = frozenset(i - 1 for i in c.blacklist)
        return replace(c, whitelist=wl, blacklist=bl)

    def event_log_prob(self, instrument: int, pitch: int, time_delta: float,
                       velocity: float, order: tuple = MODALITIES) -> dict:
        """Per-modality log probability of an event under the current
        state (chain factorization in `order`), without feeding it."""
        values = {"instrument": instrument, "pitch": pitch,
                  "time": float(np.clip(time_delta, 0, MAX_TIME_DELTA)),
                  "velocity": velocity}
        cond_emb = {}
        out = {}
        for m in order:
            dist = self._head(m, cond_emb)
            if m == "instrument":
                lp = categorical_log_prob(dist, instrument - 1)
            elif m == "pitch":
                lp = categorical_log_prob(dist, pitch)
            else:
                lp = dmol_bin_log_prob(dist, values[m])
            out[m] = float(ad.val(lp))
            cond_emb[m] = self._modality_embedding(m, values[m])
        out["total"] = sum(out[m] for m in order)
        return out

    def pitch_ranking(self, instrument: int | None = None,
                      time_delta: float | None = None,
                      velocity: float | None = None,
                      whitelist=None, blacklist=frozenset(),
                      top_k: int | None = None) -> list:
        """Pitches ranked by conditional log probability, descending."""
        cond_emb = {}
        if instrument is not None:
            cond_emb["instrument"] = self._modality_embedding("instrument", instrument)
        if time_delta is not None:
            cond_emb["time"] = self._modality_embedding("time", time_delta)
        if velocity is not None:
            cond_emb["velocity"] = self._modality_embedding("velocity", velocity)
        dist = self._head("pitch", cond_emb)
        lp = np.asarray(ad.val(categorical_log_probs(dist))).reshape(-1)
        pitches = range(N_PITCHES) if whitelist is None else sorted(whitelist)
        ranked = [(p, float(lp[p])) for p in pitches if p not in blacklist]
        ranked.sort(key=lambda t: -t[1])
        return ranked[:top_k] if top_k is not None else ranked

    def eos_probability(self) -> float:
        """Probability that the stream ends here."""
        x = float(ad.val(eos_logit(self._p, self._state[-1]))[0])
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        return math.exp(x) / (1.0 + math.exp(x))
