"""Serving core: one ordered command queue in front of the engine, the
flat key/value query grammar shared by all transports, and the OSC
endpoint handlers.

Wire contract (OSC, all replies go to the datagram sender):

    /notochord/feed   ,iiff   instrument pitch time velocity
    /notochord/query  key/value pairs, see QUERY_KEYS
    /notochord/reset  (no arguments, no reply)
    /notochord/query-reply ,iiffffff  instrument pitch time velocity
                                      + four per-modality log probs
                                      (fixed sub-values are scored too)
    /notochord/error  ,s      human-readable message
"""

from __future__ import annotations

import dataclasses
import logging
import queue
import threading
from concurrent.futures import Future

from ..distributions import SamplingControls
from ..engine import Engine, Prediction, QuerySpec
from .osc import OscServer

log = logging.getLogger(__name__)

FEED_ADDRESS = "/notochord/feed"
QUERY_ADDRESS = "/notochord/query"
RESET_ADDRESS = "/notochord/reset"
REPLY_ADDRESS = "/notochord/query-reply"
ERROR_ADDRESS = "/notochord/error"

# keys accepted by /notochord/query and the WebSocket "query" command
QUERY_KEYS = {
    "instrument": int, "pitch": int, "time": float, "velocity": float,
    "instrument_temperature": float, "pitch_temperature": float,
    "rhythm_temperature": float, "timing_temperature": float,
    "velocity_rhythm_temperature": float, "velocity_timing_temperature": float,
    "min_time": float, "max_time": float,
    "min_velocity": float, "max_velocity": float,
    "instrument_whitelist": list, "instrument_blacklist": list,
    "pitch_whitelist": list, "pitch_blacklist": list,
    "order": list,   # modality names, comma-separated over OSC
}


class Session:
    """Serializes all engine access through a single consumer thread."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self._q: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            item = self._q.get()
            if item is None:
                break
            fn, fut = item
            if fut.set_running_or_notify_cancel():
                try:
                    fut.set_result(fn(self.engine))
                except Exception as exc:   # noqa: BLE001 - delivered via future
                    fut.set_exception(exc)

    def submit(self, fn) -> Future:
        fut: Future = Future()
        self._q.put((fn, fut))
        return fut

    def call(self, fn, timeout: float = 10.0):
        return self.submit(fn).result(timeout)

    def close(self):
        self._q.put(None)
        self._thread.join(timeout=2)


def _int_list(value) -> frozenset:
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        return frozenset(int(p) for p in parts)
    if isinstance(value, (list, tuple, set, frozenset)):
        return frozenset(int(v) for v in value)
    raise ValueError(f"expected an id list, got {value!r}")


def spec_from_kv(kv: dict) -> QuerySpec:
    """Build a QuerySpec from the flat wire key/value mapping."""
    unknown = set(kv) - set(QUERY_KEYS)
    if unknown:
        raise ValueError(f"unknown query keys: {', '.join(sorted(unknown))}")
    fixed = {}
    for k in ("instrument", "pitch"):
        if k in kv:
            fixed[k] = int(kv[k])
    if "time" in kv:
        fixed["time_delta"] = float(kv["time"])
    if "velocity" in kv:
        fixed["velocity"] = float(kv["velocity"])

    controls = {}

    def put(modality, **fields):
        base = controls.get(modality, SamplingControls())
        controls[modality] = dataclasses.replace(base, **fields)

    if "instrument_temperature" in kv:
        put("instrument", class_temperature=float(kv["instrument_temperature"]))
    if "pitch_temperature" in kv:
        put("pitch", class_temperature=float(kv["pitch_temperature"]))
    if "rhythm_temperature" in kv:
        put("time", weight_temperature=float(kv["rhythm_temperature"]))
    if "timing_temperature" in kv:
        put("time", scale_temperature=float(kv["timing_temperature"]))
    if "velocity_rhythm_temperature" in kv:
        put("velocity", weight_temperature=float(kv["velocity_rhythm_temperature"]))
    if "velocity_timing_temperature" in kv:
        put("velocity", scale_temperature=float(kv["velocity_timing_temperature"]))
    if "min_time" in kv or "max_time" in kv:
        put("time", truncation=(float(kv.get("min_time", 0.0)),
                                float(kv.get("max_time", 10.0))))
    if "min_velocity" in kv or "max_velocity" in kv:
        put("velocity", truncation=(float(kv.get("min_velocity", 0.0)),
                                    float(kv.get("max_velocity", 127.0))))
    for key, modality in (("instrument_whitelist", "instrument"),
                          ("pitch_whitelist", "pitch")):
        if key in kv:
            put(modality, whitelist=_int_list(kv[key]))
    for key, modality in (("instrument_blacklist", "instrument"),
                          ("pitch_blacklist", "pitch")):
        if key in kv:
            put(modality, blacklist=_int_list(kv[key]))
    order = None
    if "order" in kv:
        raw = kv["order"]
        names = ([p for p in raw.replace(" ", "").split(",") if p]
                 if isinstance(raw, str) else [str(p) for p in raw])
        order = tuple(names)
    return QuerySpec(**fixed, controls=controls, order=order)


def kv_from_osc_args(args: list) -> dict:
    if len(args) % 2:
        raise ValueError("query expects key/value pairs")
    kv = {}
    for i in range(0, len(args), 2):
        key = args[i]
        if not isinstance(key, str):
            raise ValueError(f"query key must be a string, got {key!r}")
        kv[key] = args[i + 1]
    return kv


def reply_args(pred: Prediction) -> tuple:
    lp = pred.log_probs
    return (int(pred.instrument), int(pred.pitch),
            float(pred.time_delta), float(pred.velocity),
            float(lp.get("instrument", 0.0)), float(lp.get("pitch", 0.0)),
            float(lp.get("time", 0.0)), float(lp.get("velocity", 0.0)))


def wire_osc(server: OscServer, session: Session):
    """Attach the engine handlers; replies are sent by the queue consumer."""

    def guarded(reply, fn):
        def job(engine):
            try:
                fn(engine)
            except Exception as exc:   # noqa: BLE001 - goes back over the wire
                reply(ERROR_ADDRESS, (f"{type(exc).__name__}: {exc}",))
        return job

    def h_feed(args, reply):
        if len(args) != 4:
            raise ValueError("feed expects instrument, pitch, time, velocity")
        inst, pitch, dt, vel = args
        session.submit(guarded(reply, lambda eng: eng.feed(
            int(inst), int(pitch), float(dt), float(vel))))

    def h_query(args, reply):
        spec = spec_from_kv(kv_from_osc_args(args))

        def run(engine):
            reply(REPLY_ADDRESS, reply_args(engine.query(spec)))
        session.submit(guarded(reply, run))

    def h_reset(args, reply):
        session.submit(guarded(reply, lambda eng: eng.reset()))

    server.on(FEED_ADDRESS, h_feed)
    server.on(QUERY_ADDRESS, h_query)
    server.on(RESET_ADDRESS, h_reset)
    return server


def serve_osc(engine_or_session, host: str = "127.0.0.1",
              port: int = 9999) -> tuple[OscServer, Session]:
    session = (engine_or_session if isinstance(engine_or_session, Session)
               else Session(engine_or_session))
    server = OscServer(host, port, error_address=ERROR_ADDRESS)
    wire_osc(server, session)
    server.start()
    log.info("OSC listening on %s:%d", *server.address)
    return server, session
