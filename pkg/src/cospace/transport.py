"""Live network shell: asyncio TCP (and WebSocket) front end for the core.

Connection I/O runs concurrently but only enqueues events; one pump task
consumes the queue and mutates the session core, preserving the
serialized-event contract. Backend calls run in worker threads under the
retry policy; completions come back as events.

The WebSocket endpoint exists for browser clients and wraps the identical
byte framing: every binary message carries framed bytes. The handshake
and frame codec are implemented here directly (RFC 6455, server side,
binary/ping/close opcodes) to keep the dependency set unchanged.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import logging
import struct
import threading
import time
from dataclasses import dataclass

from . import protocol, server
from .pipeline import RetryPolicy, timed_call
from .errors import BackendError
from .sim import EventLog

logger = logging.getLogger(__name__)

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


def _ws_accept(key: str) -> str:
    digest = hashlib.sha1((key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def _ws_encode(payload: bytes, opcode: int = 0x2) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


async def _ws_read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes]:
    b0, b1 = await reader.readexactly(2)
    opcode = b0 & 0x0F
    masked = b1 & 0x80
    length = b1 & 0x7F
    if length == 126:
        (length,) = struct.unpack(">H", await reader.readexactly(2))
    elif length == 127:
        (length,) = struct.unpack(">Q", await reader.readexactly(8))
    mask = await reader.readexactly(4) if masked else b""
    payload = await reader.readexactly(length)
    if mask:
        payload = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
    return opcode, payload


@dataclass
class _Conn:
    conn_id: int
    send: object  # callable(bytes frame) -> None, scheduled on the loop
    kind: str  # "tcp" | "ws"


class EdgeServer:
    """Authoritative server over real sockets, one session per process."""

    def __init__(self, core: server.SessionCore, backend,
                 host: str = "127.0.0.1", port: int = 4750,
                 ws_port: int | None = None,
                 retry_policy: RetryPolicy = RetryPolicy()):
        self.core = core
        self.backend = backend
        self.host = host
        self.port = port
        self.ws_port = ws_port
        self.retry_policy = retry_policy
        self.log = EventLog()
        self._queue: asyncio.Queue = asyncio.Queue()
        self._conns: dict[int, _Conn] = {}
        self._next_conn = 1
        self._t0 = time.monotonic()
        self._servers: list[asyncio.base_events.Server] = []
        self._pump_task: asyncio.Task | None = None
        self.bound_port: int | None = None
        self.bound_ws_port: int | None = None

    def _now(self) -> float:
        return time.monotonic() - self._t0

    async def start(self) -> None:
        self._pump_task = asyncio.create_task(self._pump())
        tcp = await asyncio.start_server(self._handle_tcp, self.host, self.port)
        self._servers.append(tcp)
        self.bound_port = tcp.sockets[0].getsockname()[1]
        if self.ws_port is not None:
            ws = await asyncio.start_server(self._handle_ws, self.host, self.ws_port)
            self._servers.append(ws)
            self.bound_ws_port = ws.sockets[0].getsockname()[1]
        logger.info("listening on %s:%s (ws: %s)", self.host, self.bound_port,
                    self.bound_ws_port)

    async def stop(self) -> None:
        for srv in self._servers:
            srv.close()
            await srv.wait_closed()
        if self._pump_task:
            self._pump_task.cancel()
            try:
                await self._pump_task
            except asyncio.CancelledError:
                pass

    async def serve_forever(self) -> None:
        await asyncio.gather(*(srv.serve_forever() for srv in self._servers))

    # -- event pump -----------------------------------------------------------

    def _submit(self, ev: server.Event) -> None:
        self._queue.put_nowait(ev)

    async def _pump(self) -> None:
        while True:
            ev = await self._queue.get()
            self._log_event(ev)
            try:
                effects = self.core.on_event(ev)
            except Exception:
                logger.exception("core failed on %r", ev)
                continue
            for effect in effects:
                self._apply(effect)

    def _log_event(self, ev: server.Event) -> None:
        if isinstance(ev, server.FrameReceived):
            self.log.add("event", t=ev.time, event="frame_received", conn=ev.conn_id,
                         frameType=ev.frame_type, payloadHex=ev.payload.hex())
        elif isinstance(ev, server.ClientConnected):
            self.log.add("event", t=ev.time, event="client_connected", conn=ev.conn_id)
        elif isinstance(ev, server.ClientDisconnected):
            self.log.add("event", t=ev.time, event="client_disconnected", conn=ev.conn_id)
        elif isinstance(ev, server.BackendCompleted):
            self.log.add("event", t=ev.time, event="backend_completed",
                         requestId=ev.request_id, stage=ev.stage, ok=ev.ok,
                         raw=ev.raw, error=ev.error, durationS=ev.duration_s)
        elif isinstance(ev, server.TimerFired):
            self.log.add("event", t=ev.time, event="timer_fired", timerId=ev.timer_id)

    def _apply(self, effect: server.Effect) -> None:
        loop = asyncio.get_running_loop()
        if isinstance(effect, server.SendFrame):
            conn = self._conns.get(effect.conn_id)
            if conn is None:
                return
            frame = protocol.encode_frame(effect.frame_type, effect.payload)
            self.log.add("effect", t=self._now(), effect="send_frame",
                         conn=effect.conn_id, frameType=effect.frame_type,
                         size=len(frame), payloadHex=effect.payload.hex())
            conn.send(frame)
        elif isinstance(effect, server.CallBackend):
            self.log.add("effect", t=self._now(), effect="call_backend",
                         requestId=effect.request_id, stage=effect.stage,
                         promptSha256=hashlib.sha256(effect.prompt.encode()).hexdigest(),
                         attachmentBytes=len(effect.attachment) if effect.attachment else 0)
            loop.create_task(self._call_backend(effect))
        elif isinstance(effect, server.StartTimer):
            self.log.add("effect", t=self._now(), effect="start_timer",
                         timerId=effect.timer_id, delayS=effect.delay_s)
            timer_id = effect.timer_id
            loop.call_later(
                effect.delay_s,
                lambda: self._submit(server.TimerFired(time=self._now(), timer_id=timer_id)),
            )

    async def _call_backend(self, call: server.CallBackend) -> None:
        loop = asyncio.get_running_loop()

        def blocking():
            return timed_call(self.backend, call.prompt, call.attachment,
                              policy=self.retry_policy)

        try:
            result = await loop.run_in_executor(None, blocking)
            self._submit(server.BackendCompleted(
                time=self._now(), request_id=call.request_id, stage=call.stage,
                ok=True, raw=result.raw, duration_s=result.generation_time_s,
            ))
        except BackendError as exc:
            self._submit(server.BackendCompleted(
                time=self._now(), request_id=call.request_id, stage=call.stage,
                ok=False, error=str(exc),
            ))

    # -- TCP ----------------------------------------------------------------------

    async def _handle_tcp(self, reader: asyncio.StreamReader,
                          writer: asyncio.StreamWriter) -> None:
        conn_id = self._next_conn
        self._next_conn += 1

        def send(frame: bytes) -> None:
            if not writer.is_closing():
                writer.write(frame)

        self._conns[conn_id] = _Conn(conn_id, send, "tcp")
        self.log.add("event", t=self._now(), event="client_connected", conn=conn_id)
        self._submit(server.ClientConnected(time=self._now(), conn_id=conn_id))
        decoder = protocol.FrameDecoder()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for ftype, payload in decoder.feed(data):
                    self._submit(server.FrameReceived(
                        time=self._now(), conn_id=conn_id,
                        frame_type=ftype, payload=payload,
                    ))
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        except Exception as exc:
            logger.warning("conn %d dropped: %s", conn_id, exc)
        finally:
            self._conns.pop(conn_id, None)
            self._submit(server.ClientDisconnected(time=self._now(), conn_id=conn_id))
            writer.close()

    # -- WebSocket -------------------------------------------------------------------

    async def _handle_ws(self, reader: asyncio.StreamReader,
                         writer: asyncio.StreamWriter) -> None:
        try:
            request = await reader.readuntil(b"\r\n\r\n")
        except (asyncio.IncompleteReadError, asyncio.LimitOverrunError):
            writer.close()
            return
        headers = {}
        for line in request.decode("latin-1").split("\r\n")[1:]:
            if ":" in line:
                name, value = line.split(":", 1)
                headers[name.strip().lower()] = value.strip()
        key = headers.get("sec-websocket-key")
        if key is None or "websocket" not in headers.get("upgrade", "").lower():
            writer.write(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            await writer.drain()
            writer.close()
            return
        writer.write(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {_ws_accept(key)}\r\n\r\n"
            ).encode("latin-1")
        )
        await writer.drain()

        conn_id = self._next_conn
        self._next_conn += 1

        def send(frame: bytes) -> None:
            if not writer.is_closing():
                writer.write(_ws_encode(frame))

        self._conns[conn_id] = _Conn(conn_id, send, "ws")
        self.log.add("event", t=self._now(), event="client_connected", conn=conn_id)
        self._submit(server.ClientConnected(time=self._now(), conn_id=conn_id))
        decoder = protocol.FrameDecoder()
        try:
            while True:
                opcode, payload = await _ws_read_frame(reader)
                if opcode == 0x8:  # close
                    writer.write(_ws_encode(b"", opcode=0x8))
                    break
                if opcode == 0x9:  # ping
                    writer.write(_ws_encode(payload, opcode=0xA))
                    continue
                if opcode in (0x1, 0x2, 0x0):
                    for ftype, frame_payload in decoder.feed(payload):
                        self._submit(server.FrameReceived(
                            time=self._now(), conn_id=conn_id,
                            frame_type=ftype, payload=frame_payload,
                        ))
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        except Exception as exc:
            logger.warning("ws conn %d dropped: %s", conn_id, exc)
        finally:
            self._conns.pop(conn_id, None)
            self._submit(server.ClientDisconnected(time=self._now(), conn_id=conn_id))
            writer.close()


class ServerThread:
    """Run an EdgeServer on a private event loop in a daemon thread."""

    def __init__(self, core, backend, host="127.0.0.1", port=0, ws_port=None,
                 retry_policy: RetryPolicy = RetryPolicy()):
        self.server = EdgeServer(core, backend, host=host, port=port,
                                 ws_port=ws_port, retry_policy=retry_policy)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._started = threading.Event()

    def _run(self) -> None:
        asyncio.set_event_loop(self._loop)
        self._loop.run_until_complete(self.server.start())
        self._started.set()
        self._loop.run_forever()

    def start(self) -> "ServerThread":
        self._thread.start()
        if not self._started.wait(timeout=10):
            raise RuntimeError("server did not start in time")
        return self

    @property
    def port(self) -> int:
        return self.server.bound_port

    @property
    def ws_port(self) -> int | None:
        return self.server.bound_ws_port

    def stop(self) -> None:
        async def shutdown():
            await self.server.stop()
            self._loop.stop()

        asyncio.run_coroutine_threadsafe(shutdown(), self._loop)
        self._thread.join(timeout=5)
        if not self._loop.is_closed():
            self._loop.close()
