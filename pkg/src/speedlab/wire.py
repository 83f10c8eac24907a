"""Real-socket backend: framed measurement protocol, server and client provider.

Frame = 4-byte big-endian length, 1-byte type, then ``length`` payload bytes.
One TCP connection carries one session:

    client -> START {"direction": "down"|"up"}
    down:  server streams DATA until the client sends CLOSE
    up:    client streams DATA, server answers with COUNTER_REPORT every 250 ms
    client -> CLOSE, server -> RESULT {"bytes_sent": n, "bytes_received": m}
"""
from __future__ import annotations

import enum
import json
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass

from .transport import Counters, Direction

log = logging.getLogger(__name__)

HEADER = struct.Struct(">IB")
REPORT = struct.Struct(">dQ")
MAX_PAYLOAD = 1 << 20
REPORT_INTERVAL_S = 0.25
DOWN_CHUNK = 64 << 10
UP_MESSAGE = 1 << 20
SOCK_BUF = 128 << 10
CONNECT_TIMEOUT_S = 5.0
_TCP_INFO_RTT_OFFSET = 68  # tcpi_rtt, microseconds


class FrameType(enum.IntEnum):
    DATA = 0x01
    COUNTER_REPORT = 0x02
    START = 0x03
    RESULT = 0x04
    CLOSE = 0x05


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class Frame:
    type: FrameType
    payload: bytes = b""

    @property
    def length(self):
        return len(self.payload)


@dataclass(frozen=True)
class CounterReport:
    t_offset_s: float
    bytes_received_cum: int

    def encode(self):
        return REPORT.pack(self.t_offset_s, self.bytes_received_cum)

    @classmethod
    def decode(cls, payload):
        if len(payload) != REPORT.size:
            raise ProtocolError(f"COUNTER_REPORT payload must be {REPORT.size} bytes, got {len(payload)}")
        return cls(*REPORT.unpack(payload))


def _check_header(length, ftype):
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds {MAX_PAYLOAD}")
    try:
        return FrameType(ftype)
    except ValueError:
        raise ProtocolError(f"unknown frame type 0x{ftype:02x}") from None


def encode_frame(frame: Frame) -> bytes:
    _check_header(len(frame.payload), int(frame.type))
    return HEADER.pack(len(frame.payload), int(frame.type)) + bytes(frame.payload)


def decode_frame(buf) -> tuple[Frame | None, int]:
    """Decode one frame from the front of ``buf``.

    Returns ``(frame, consumed)``, or ``(None, 0)`` when ``buf`` holds only
    part of a frame.
    """
    if len(buf) < HEADER.size:
        return None, 0
    length, ftype = HEADER.unpack_from(buf)
    ftype = _check_header(length, ftype)
    end = HEADER.size + length
    if len(buf) < end:
        return None, 0
    return Frame(ftype, bytes(buf[HEADER.size:end])), end


def parse_endpoint(text):
    host, sep, port = str(text).rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return (host.strip("[]") or "0.0.0.0", int(port))


class _Stream:
    """Blocking frame reader over a socket."""

    def __init__(self, sock):
        self.sock = sock
        self.scratch = bytearray(256 << 10)
        self.view = memoryview(self.scratch)

    def _exact(self, n):
        out = bytearray()
        while len(out) < n:
            chunk = self.sock.recv(n - len(out))
            if not chunk:
                raise ConnectionError("peer closed the connection")
            out += chunk
        return bytes(out)

    def header(self):
        length, ftype = HEADER.unpack(self._exact(HEADER.size))
        return _check_header(length, ftype), length

    def payload(self, n):
        return self._exact(n)

    def skip(self, n, on_bytes=None):
        """Read and drop ``n`` payload bytes, reporting progress as it goes."""
        left = n
        while left:
            got = self.sock.recv_into(self.view[:min(left, len(self.scratch))])
            if not got:
                raise ConnectionError("peer closed the connection")
            left -= got
            if on_bytes is not None:
                on_bytes(got)

    def frame(self):
        ftype, n = self.header()
        return Frame(ftype, self.payload(n))


def _tune(sock):
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    for opt in (socket.SO_SNDBUF, socket.SO_RCVBUF):
        try:
            sock.setsockopt(socket.SOL_SOCKET, opt, SOCK_BUF)
        except OSError:
            pass


def tcp_rtt_s(sock, fallback=float("nan")):
    """Kernel smoothed RTT from TCP_INFO where available."""
    try:
        info = sock.getsockopt(socket.IPPROTO_TCP, socket.TCP_INFO, 104)
        rtt_us = struct.unpack_from("I", info, _TCP_INFO_RTT_OFFSET)[0]
        return rtt_us / 1e6 if rtt_us else fallback
    except (OSError, AttributeError, struct.error):
        return fallback


# --- server -----------------------------------------------------------------------

class _Session(socketserver.BaseRequestHandler):
    def setup(self):
        _tune(self.request)
        self.lock = threading.Lock()
        self.sent = 0
        self.received = 0
        self.closed = threading.Event()

    def send(self, ftype, payload=b""):
        with self.lock:
            self.request.sendall(HEADER.pack(len(payload), int(ftype)) + payload)

    def handle(self):
        stream = _Stream(self.request)
        try:
            first = stream.frame()
            if first.type is not FrameType.START:
                raise ProtocolError(f"expected START, got {first.type.name}")
            try:
                params = json.loads(first.payload or b"{}")
                direction = Direction.parse(params.get("direction", "down"))
            except (ValueError, AttributeError) as e:
                raise ProtocolError(f"bad START payload: {e}") from None
            if direction is Direction.DOWN:
                self._source(stream)
            else:
                self._sink(stream)
            self.send(FrameType.RESULT, json.dumps(
                {"bytes_sent": self.sent, "bytes_received": self.received}).encode())
        except ProtocolError as e:
            log.warning("session %s aborted: protocol error: %s", self.client_address, e)
        except (ConnectionError, OSError) as e:
            log.info("session %s ended: %s", self.client_address, e)
        finally:
            self.closed.set()

    def _source(self, stream):
        def watch():
            try:
                while True:
                    f = stream.frame()
                    if f.type is FrameType.CLOSE:
                        break
                    raise ProtocolError(f"unexpected {f.type.name} during download")
            except ProtocolError as e:
                log.warning("session %s: protocol error: %s", self.client_address, e)
                self.request.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            finally:
                self.closed.set()

        t = threading.Thread(target=watch, daemon=True)
        t.start()
        chunk = HEADER.pack(DOWN_CHUNK, FrameType.DATA) + bytes(DOWN_CHUNK)
        rate = getattr(self.server, "rate_bps", 0) or 0
        t0 = time.monotonic()
        while not self.closed.is_set():
            if rate:
                # token-bucket style pacing: never run ahead of rate
                ahead = t0 + self.sent * 8 / rate - time.monotonic()
                if ahead > 0:
                    self.closed.wait(ahead)
                    continue
            with self.lock:
                self.request.sendall(chunk)
            self.sent += DOWN_CHUNK
        t.join()

    def _sink(self, stream):
        t0 = time.monotonic()
        last = [0]

        def report():
            while not self.closed.wait(REPORT_INTERVAL_S):
                n = self.received
                if n < last[0]:
                    n = last[0]
                last[0] = n
                try:
                    self.send(FrameType.COUNTER_REPORT,
                              CounterReport(time.monotonic() - t0, n).encode())
                except OSError:
                    return

        t = threading.Thread(target=report, daemon=True)
        t.start()

        def count(n):
            self.received += n

        try:
            while True:
                ftype, n = stream.header()
                if ftype is FrameType.CLOSE:
                    stream.skip(n)
                    break
                if ftype is not FrameType.DATA:
                    raise ProtocolError(f"unexpected {ftype.name} during upload")
                stream.skip(n, count)
        finally:
            self.closed.set()
            t.join()


class Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    rate_bps = 0  # download pacing per session, 0 = as fast as the socket goes

    @property
    def endpoint(self):
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def _make_server(listen, config):
    srv = Server(parse_endpoint(listen), _Session)
    srv.rate_bps = float((config or {}).get("rate_bps", 0) or 0)
    if srv.rate_bps < 0:
        srv.server_close()
        raise ValueError("rate_bps must be >= 0")
    return srv


def start_server(listen="127.0.0.1:0", config=None):
    """Start a server on a background thread; returns it (call ``shutdown()``).

    ``config`` may carry ``rate_bps`` to pace each download session.
    """
    srv = _make_server(listen, config)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv


def serve(listen_endpoint, config=None):
    """Serve sessions until interrupted."""
    srv = _make_server(listen_endpoint, config)
    log.info("listening on %s", srv.endpoint)
    try:
        srv.serve_forever()
    finally:
        srv.server_close()


# --- client -----------------------------------------------------------------------

class ClientConnection:
    def __init__(self, endpoint, direction, timeout=CONNECT_TIMEOUT_S):
        self.direction = Direction.parse(direction)
        addr = parse_endpoint(endpoint) if isinstance(endpoint, str) else endpoint
        t = time.monotonic()
        self.sock = socket.create_connection(addr, timeout=timeout)
        self.connect_rtt_s = time.monotonic() - t
        self.sock.settimeout(None)
        _tune(self.sock)
        self.lock = threading.Lock()
        self.written = 0
        self.received = 0
        self.acked = 0
        self.reports = []
        self.result = None
        self.error = None
        self.stop = threading.Event()
        self.done = threading.Event()
        self.closed = False
        self.stream = _Stream(self.sock)
        self.sock.sendall(encode_frame(Frame(FrameType.START, json.dumps(
            {"direction": self.direction.value}).encode())))
        self.threads = []
        if self.direction is Direction.DOWN:
            self._spawn(self._download)
        else:
            self._spawn(self._upload)
            self._spawn(self._read_reports)

    def _spawn(self, fn):
        t = threading.Thread(target=self._guard, args=(fn,), daemon=True)
        self.threads.append(t)
        t.start()

    def _guard(self, fn):
        try:
            fn()
        except Exception as e:
            if not self.done.is_set():
                self.error = e
            self.done.set()

    def _download(self):
        # bulk reads; frame headers are parsed only at frame boundaries
        view = memoryview(bytearray(1 << 20))
        left = 0
        hdr = b""
        while True:
            n = self.sock.recv_into(view)
            if not n:
                raise ConnectionError("peer closed the connection")
            i = 0
            while i < n:
                if left:
                    take = min(left, n - i)
                    left -= take
                    i += take
                    if not self.stop.is_set():
                        self.received += take
                    continue
                need = HEADER.size - len(hdr)
                end = min(n, i + need)
                hdr += bytes(view[i:end])
                i = end
                if len(hdr) < HEADER.size:
                    break
                length, ftype = HEADER.unpack(hdr)
                hdr = b""
                ftype = _check_header(length, ftype)
                if ftype is FrameType.DATA:
                    left = length
                elif ftype is FrameType.RESULT:
                    body = bytes(view[i:min(n, i + length)])
                    body += self.stream.payload(length - len(body))
                    self.result = json.loads(body)
                    self.done.set()
                    return
                else:
                    raise ProtocolError(f"unexpected {ftype.name} during download")

    def _upload(self):
        msg = HEADER.pack(UP_MESSAGE, FrameType.DATA) + bytes(UP_MESSAGE)
        while not self.stop.is_set():
            self.sock.sendall(msg)
            if not self.stop.is_set():
                self.written += UP_MESSAGE
        self._send_close()

    def _read_reports(self):
        while True:
            f = self.stream.frame()
            if f.type is FrameType.COUNTER_REPORT:
                r = CounterReport.decode(f.payload)
                if r.bytes_received_cum < self.acked:
                    raise ProtocolError("COUNTER_REPORT went backwards")
                self.reports.append(r)
                if not self.stop.is_set():
                    self.acked = r.bytes_received_cum
            elif f.type is FrameType.RESULT:
                self.result = json.loads(f.payload)
                self.done.set()
                return
            else:
                raise ProtocolError(f"unexpected {f.type.name} during upload")

    def _send_close(self):
        with self.lock:
            self.sock.sendall(encode_frame(Frame(FrameType.CLOSE)))

    def counters(self, t):
        rtt = tcp_rtt_s(self.sock, self.connect_rtt_s)
        if self.direction is Direction.DOWN:
            n = self.received
            return Counters(t, n, n, n, rtt)
        acked = self.acked
        return Counters(t, max(self.written, acked), acked, acked, rtt)

    def close(self, timeout=10.0):
        if self.closed:
            return
        self.closed = True
        self.stop.set()
        try:
            if self.direction is Direction.DOWN:
                self._send_close()
            self.done.wait(timeout)
        except OSError:
            pass
        finally:
            try:
                self.sock.close()
            except OSError:
                pass


class SocketProvider:
    """Connection provider over real TCP sockets (wall-clock time)."""

    def __init__(self, endpoint, connect_timeout=CONNECT_TIMEOUT_S):
        self.endpoint = endpoint
        self.timeout = connect_timeout
        self.t_base = time.monotonic()
        self.conns = []

    def now(self):
        return time.monotonic() - self.t_base

    def open(self, direction):
        c = ClientConnection(self.endpoint, direction, self.timeout)
        self.conns.append(c)
        return c

    def advance(self, until_s):
        while True:
            left = until_s - self.now()
            if left <= 0:
                break
            time.sleep(min(left, 0.05))
        for c in self.conns:
            if c.error is not None and not c.stop.is_set():
                raise ConnectionError(f"connection failed: {c.error}")

    def snapshot(self, conns):
        t = self.now()
        return [c.counters(t) for c in conns]

    def close(self, conns):
        for c in conns:
            c.stop.set()
        for c in conns:
            c.close()

    def server_totals(self):
        """Sum of server-side RESULT counters over closed connections."""
        sent = sum((c.result or {}).get("bytes_sent", 0) for c in self.conns)
        recv = sum((c.result or {}).get("bytes_received", 0) for c in self.conns)
        return {"bytes_sent": sent, "bytes_received": recv}


def client_run(endpoint, engine_spec=None):
    """Run one engine against a server; ``engine_spec`` is a dict with keys
    engine, direction, accounting and optional policy (AdaptivePolicy)."""
    from .engines import run_engine
    spec = dict(engine_spec or {})
    provider = SocketProvider(endpoint, spec.get("connect_timeout", CONNECT_TIMEOUT_S))
    report = run_engine(spec.get("engine", "single"), provider, spec.get("direction", "down"),
                        spec.get("accounting", "ReceiverAcked"), spec.get("policy"))
    report.meta["server"] = provider.server_totals()
    return report
