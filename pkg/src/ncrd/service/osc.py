"""Minimal OSC 1.0 codec and a UDP dispatcher.

Only the argument types the wire contract needs are implemented:
int32 (i), float32 (f), string (s) and blob (b). Bundles are not
supported; every datagram is a single message.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading

log = logging.getLogger(__name__)


def _pad(b: bytes) -> bytes:
    return b + b"\x00" * (-len(b) % 4)


def _encode_string(s: str) -> bytes:
    return _pad(s.encode("utf-8") + b"\x00")


def _decode_string(data: bytes, i: int) -> tuple[str, int]:
    end = data.index(b"\x00", i)
    s = data[i:end].decode("utf-8")
    end += 1
    return s, end + (-end % 4)


def encode_message(address: str, args=()) -> bytes:
    """Types are inferred: bool/int -> i, float -> f, str -> s, bytes -> b."""
    if not address.startswith("/"):
        raise ValueError("OSC address must start with /")
    tags = ","
    body = b""
    for a in args:
        if isinstance(a, bool) or isinstance(a, int):
            tags += "i"
            body += struct.pack(">i", int(a))
        elif isinstance(a, float):
            tags += "f"
            body += struct.pack(">f", a)
        elif isinstance(a, str):
            tags += "s"
            body += _encode_string(a)
        elif isinstance(a, (bytes, bytearray)):
            tags += "b"
            body += struct.pack(">i", len(a)) + _pad(bytes(a))
        else:
            raise TypeError(f"unsupported OSC argument {a!r}")
    return _encode_string(address) + _encode_string(tags) + body


def decode_message(data: bytes) -> tuple[str, list]:
    address, i = _decode_string(data, 0)
    if not address.startswith("/"):
        raise ValueError("not an OSC message")
    tags, i = _decode_string(data, i)
    if not tags.startswith(","):
        raise ValueError("missing type tag string")
    args = []
    for t in tags[1:]:
        if t == "i":
            args.append(struct.unpack_from(">i", data, i)[0])
            i += 4
        elif t == "f":
            args.append(struct.unpack_from(">f", data, i)[0])
            i += 4
        elif t == "s":
            s, i = _decode_string(data, i)
            args.append(s)
        elif t == "b":
            (n,) = struct.unpack_from(">i", data, i)
            i += 4
            args.append(data[i:i + n])
            i += n + (-n % 4)
        else:
            raise ValueError(f"unsupported OSC type tag {t!r}")
    return address, args


class OscServer:
    """Dispatches incoming messages to per-address handlers.

    A handler gets (args, reply) where reply(address, args) sends a
    message back to the datagram's sender. Handler exceptions become
    /notochord/error replies.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 error_address: str = "/notochord/error"):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.address = self.sock.getsockname()
        self.handlers: dict = {}
        self.error_address = error_address
        self._thread = None
        self._closed = False

    def on(self, address: str, handler):
        self.handlers[address] = handler

    def _reply_to(self, sender):
        def reply(address, args=()):
            self.sock.sendto(encode_message(address, args), sender)
        return reply

    def handle_datagram(self, data: bytes, sender):
        reply = self._reply_to(sender)
        try:
            address, args = decode_message(data)
        except (ValueError, IndexError, struct.error) as exc:
            reply(self.error_address, (f"malformed message: {exc}",))
            return
        handler = self.handlers.get(address)
        if handler is None:
            reply(self.error_address, (f"unknown address {address}",))
            return
        try:
            handler(args, reply)
        except Exception as exc:   # noqa: BLE001 - report, keep serving
            log.exception("handler for %s failed", address)
            reply(self.error_address, (f"{type(exc).__name__}: {exc}",))

    def serve_forever(self):
        while not self._closed:
            try:
                data, sender = self.sock.recvfrom(65536)
            except OSError:
                break
            self.handle_datagram(data, sender)

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self._closed = True
        try:
            self.sock.close()
        finally:
            if self._thread is not None:
                self._thread.join(timeout=2)
