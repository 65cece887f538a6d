"""WebSocket bridge: JSON text frames mirroring the OSC semantics.

Client frames ("type" selects the command):

    {"type": "feed", "instrument": i, "pitch": p, "time": t, "velocity": v}
    {"type": "query", ...any QUERY_KEYS fields...}
    {"type": "ranking", "instrument"?, "time"?, "velocity"?, "top_k"?}
    {"type": "reset"}
    {"type": "mode", "mode": "raw|autopitch|harmonize|improvise|generate|surprise",
     "reserved"?: [ids], "voices"?: n, "poll_ms"?: n}

Server frames all carry a per-connection monotonic "seq":

    {"type": "event", "seq", "source": "player"|"model", "event": {...},
     "log_probs"?: {...}}
    {"type": "ranking", "seq", "ranking": [[pitch, log_prob], ...]}
    {"type": "surprise", "seq", "nll": {...}}
    {"type": "ack", "seq", "of": "reset"|"mode"}
    {"type": "error", "seq", "error": "..."}

Feeds are acknowledged by echoing the event (source "player"); app
modes may push additional model events. JSON is serialized with sorted
keys and no spaces so the schema is byte-stable.
"""

from __future__ import annotations

import asyncio
import functools
import http.server
import json
import logging
import threading
import time

from ..apps import Harmonizer, Improviser, autopitch_step
from ..events import Event
from .server import QUERY_KEYS, Session, spec_from_kv

log = logging.getLogger(__name__)

MODES = ("raw", "autopitch", "harmonize", "improvise", "generate", "surprise")


def dump_frame(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _event_dict(e) -> dict:
    return {"instrument": int(e.instrument), "pitch": int(e.pitch),
            "time": float(e.time_delta), "velocity": float(e.velocity)}


class WsConnection:
    """Per-connection protocol state: mode, app helpers, seq counter."""

    def __init__(self, session: Session, ws, clock=time.monotonic):
        self.session = session
        self.ws = ws
        self.clock = clock
        self.seq = 0
        self.mode = "raw"
        self.harmonizer: Harmonizer | None = None
        self.improviser: Improviser | None = None
        self.poll_ms = 10
        self._autopitch_map: dict = {}
        self._poll_task = None

    async def send(self, frame: dict):
        self.seq += 1
        await self.ws.send(dump_frame({**frame, "seq": self.seq}))

    async def call(self, fn):
        return await asyncio.wrap_future(self.session.submit(fn))

    # -- frame handlers ------------------------------------------------------

    async def handle(self, msg: dict):
        kind = msg.get("type")
        if kind == "feed":
            await self.on_feed(msg)
        elif kind == "query":
            kv = {k: v for k, v in msg.items() if k in QUERY_KEYS}
            spec = spec_from_kv(kv)
            pred = await self.call(lambda eng: eng.query(spec))
            await self.send({"type": "event", "source": "model",
                             "event": _event_dict(pred.to_event()),
                             "log_probs": pred.log_probs})
        elif kind == "ranking":
            inst = msg.get("instrument")
            dt = msg.get("time")
            vel = msg.get("velocity")
            top_k = msg.get("top_k")
            ranked = await self.call(lambda eng: eng.pitch_ranking(
                instrument=None if inst is None else int(inst),
                time_delta=None if dt is None else float(dt),
                velocity=None if vel is None else float(vel),
                top_k=None if top_k is None else int(top_k)))
            await self.send({"type": "ranking",
                             "ranking": [[p, lp] for p, lp in ranked]})
        elif kind == "reset":
            await self._stop_poll()
            await self.call(lambda eng: eng.reset())
            self._autopitch_map.clear()
            if self.harmonizer is not None:
                self.harmonizer = Harmonizer(self.session.engine,
                                             voices=self.harmonizer.voices,
                                             instrument=self.harmonizer.instrument)
            if self.improviser is not None:
                await self._start_improviser(self.improviser.reserved)
            await self.send({"type": "ack", "of": "reset"})
        elif kind == "mode":
            await self.set_mode(msg)
        else:
            raise ValueError(f"unknown frame type {kind!r}")

    async def set_mode(self, msg: dict):
        mode = msg.get("mode")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        await self._stop_poll()
        self.harmonizer = None
        self.improviser = None
        self._autopitch_map.clear()
        self.mode = mode
        self.poll_ms = int(msg.get("poll_ms", 10))
        if mode == "harmonize":
            self.harmonizer = Harmonizer(
                self.session.engine, voices=int(msg.get("voices", 1)),
                instrument=msg.get("instrument"))
        elif mode in ("improvise", "generate"):
            reserved = frozenset(int(i) for i in msg.get("reserved", []))
            await self._start_improviser(reserved)
        await self.send({"type": "ack", "of": "mode"})

    async def _start_improviser(self, reserved: frozenset):
        self.improviser = Improviser(self.session.engine, reserved=reserved)
        now = self.clock()
        imp = self.improviser
        await self.call(lambda eng: imp.start(now))
        self._poll_task = asyncio.ensure_future(self._poll_loop(imp))

    async def _stop_poll(self):
        if self._poll_task is not None:
            self._poll_task.cancel()
            try:
                await self._poll_task
            except asyncio.CancelledError:
                pass
            self._poll_task = None

    async def _poll_loop(self, imp: Improviser):
        while True:
            await asyncio.sleep(self.poll_ms / 1000.0)
            now = self.clock()
            emitted = await self.call(lambda eng: imp.poll(now))
            if emitted is not None:
                await self.send({"type": "event", "source": "model",
                                 "event": _event_dict(emitted)})

    async def on_feed(self, msg: dict):
        inst = int(msg["instrument"])
        pitch = int(msg["pitch"])
        dt = float(msg["time"])
        vel = float(msg["velocity"])

        if self.mode == "surprise":
            nll = await self.call(lambda eng: {
                k: -v for k, v in
                eng.event_log_prob(inst, pitch, dt, vel).items()})
            await self.send({"type": "surprise", "nll": nll})

        if self.mode == "autopitch" and vel > 0:
            new_pitch = await self.call(
                lambda eng: autopitch_step(eng, inst, dt, vel))
            self._autopitch_map[(inst, pitch)] = new_pitch
            e = Event(inst, new_pitch, dt, vel)
            await self.send({"type": "event", "source": "model",
                             "event": _event_dict(e)})
            return
        if self.mode == "autopitch":
            pitch = self._autopitch_map.pop((inst, pitch), pitch)

        e = Event(inst, pitch, dt, vel)
        if self.mode in ("improvise", "generate") and self.improviser is not None:
            imp = self.improviser
            now = self.clock()
            await self.call(lambda eng: imp.on_external(now, inst, pitch, vel))
        else:
            await self.call(lambda eng: eng.feed(inst, pitch, dt, vel))
        await self.send({"type": "event", "source": "player",
                         "event": _event_dict(e)})

        if self.mode == "harmonize" and self.harmonizer is not None:
            h = self.harmonizer
            if vel > 0:
                events = await self.call(
                    lambda eng: h.harmonize_on(inst, pitch, vel))
            else:
                events = await self.call(
                    lambda eng: h.harmonize_off(inst, pitch))
            for ev in events:
                await self.send({"type": "event", "source": "model",
                                 "event": _event_dict(ev)})

    async def run(self, initial_mode: str = "raw"):
        try:
            if initial_mode != "raw":
                await self.set_mode({"mode": initial_mode})
            async for frame in self.ws:
                try:
                    msg = json.loads(frame)
                    if not isinstance(msg, dict):
                        raise ValueError("frame must be a JSON object")
                    await self.handle(msg)
                except asyncio.CancelledError:
                    raise
                except Exception as exc:   # noqa: BLE001 - reported in-band
                    await self.send({"type": "error",
                                     "error": f"{type(exc).__name__}: {exc}"})
        finally:
            await self._stop_poll()


async def _handle(session: Session, clock, initial_mode, ws):
    await WsConnection(session, ws, clock=clock).run(initial_mode)


def start_ws_thread(session: Session, host: str = "127.0.0.1",
                    port: int = 8765, clock=time.monotonic,
                    initial_mode: str = "raw"):
    """Run the bridge in a daemon thread; returns (thread, stop, port)."""
    import websockets

    loop = asyncio.new_event_loop()
    ready = threading.Event()
    info = {}

    async def main():
        handler = functools.partial(_handle, session, clock, initial_mode)
        async with websockets.serve(handler, host, port) as server:
            info["port"] = next(iter(server.sockets)).getsockname()[1]
            ready.set()
            await asyncio.get_running_loop().create_future()

    def run():
        asyncio.set_event_loop(loop)
        try:
            loop.run_until_complete(main())
        except asyncio.CancelledError:
            pass
        finally:
            loop.close()

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    if not ready.wait(timeout=10):
        raise RuntimeError("WebSocket server did not start")

    def stop():
        def cancel_all():
            for task in asyncio.all_tasks(loop):
                task.cancel()
        loop.call_soon_threadsafe(cancel_all)
        thread.join(timeout=5)

    return thread, stop, info["port"]


def start_static_server(directory: str, host: str = "127.0.0.1",
                        port: int = 0):
    """Serve the frontend build directory; returns (server, port)."""
    handler = functools.partial(http.server.SimpleHTTPRequestHandler,
                                directory=directory)
    httpd = http.server.ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    log.info("static files from %s on %s:%d", directory,
             host, httpd.server_address[1])
    return httpd, httpd.server_address[1]
