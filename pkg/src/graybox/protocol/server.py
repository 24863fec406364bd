"""Threaded TCP server exposing a sealed :class:`~graybox.vault.Vault`.

Each connection owns a session table.  Sessions idle for longer than
``idle_timeout`` seconds are closed by a sweeper thread, which releases the
activations the vault saved for their backward pass; later requests naming them
get ``STALE_SESSION``.  Owner mode is never reachable from here.
"""
from __future__ import annotations

import itertools
import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

from graybox.protocol.ledger import ExposureLedger
from graybox.protocol.wire import (
    HEADER,
    MAX_FRAME,
    ErrorCode,
    Message,
    MsgType,
    ProtocolError,
    decode_payload,
    encode,
    error_msg,
    read_header,
)
from graybox.vault import Vault, VaultError

log = logging.getLogger(__name__)

DEFAULT_ADDR = "127.0.0.1:7461"


def parse_addr(text: str | None) -> tuple[str, int]:
    """``host:port`` (or bare port) -> tuple; falls back to $GBX_ADDR, then the default."""
    text = text or os.environ.get("GBX_ADDR") or DEFAULT_ADDR
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


@dataclass(frozen=True)
class ServerLimits:
    idle_timeout: float = 60.0
    max_sessions_per_conn: int = 64
    max_frame: int = MAX_FRAME


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise EOFError("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class _Conn:
    """Per-connection state: session table and the handler loop."""

    def __init__(self, server: "VaultServer", sock: socket.socket, conn_id: int):
        self.server, self.sock, self.id = server, sock, conn_id
        self.sessions: dict[int, tuple[object, float]] = {}
        self.lock = threading.Lock()

    def send(self, msg: Message) -> None:
        frame = encode(msg)
        self.server.ledger.record(self.id, "s2c", msg, len(frame))
        self.sock.sendall(frame)

    def serve(self) -> None:
        while True:
            try:
                head = recv_exact(self.sock, HEADER)
            except (EOFError, OSError):
                return
            try:
                mtype, plen = read_header(head)
                if plen + 1 > self.server.limits.max_frame:
                    raise ProtocolError("frame exceeds the server limit", 4, ErrorCode.FRAME_TOO_LARGE)
            except ProtocolError as e:
                # The stream cannot be resynchronised after a bad header.
                self._reply_error(e.code, str(e))
                return
            try:
                payload = recv_exact(self.sock, plen)
            except (EOFError, OSError):
                return
            try:
                msg = decode_payload(mtype, memoryview(payload), 0, plen)
            except ProtocolError as e:
                self._reply_error(e.code, str(e))
                continue
            self.server.ledger.record(self.id, "c2s", msg, HEADER + plen)
            try:
                self.send(self.dispatch(msg))
            except OSError:
                return

    def _reply_error(self, code: int, text: str) -> None:
        try:
            self.send(error_msg(code, text))
        except OSError:
            pass

    def dispatch(self, msg: Message) -> Message:
        vault = self.server.vault
        try:
            t = msg.type
            if t == MsgType.DESCRIBE_REQ:
                return Message(MsgType.DESCRIBE_RSP, descriptors=vault.list_entries())
            if t == MsgType.EMBED_REQ:
                return Message(MsgType.EMBED_RSP, tensor=vault.embed_tokens(msg.tensor.data))
            if t == MsgType.SESSION_OPEN:
                with self.lock:
                    if len(self.sessions) >= self.server.limits.max_sessions_per_conn:
                        return error_msg(ErrorCode.SERVER_BUSY, "too many open sessions on this connection")
                    sess = vault.open_session()
                    self.sessions[sess.session_id] = (sess, time.monotonic())
                return Message(MsgType.SESSION_ACK, session=sess.session_id)
            if t == MsgType.FORWARD_REQ:
                sess = self._session(msg.session, pop=False)
                outs = vault.forward(sess, dict(msg.items), msg.text_free)
                return Message(MsgType.FORWARD_RSP, items=sorted(outs.items()))
            if t == MsgType.BACKWARD_REQ:
                sess = self._session(msg.session, pop=True)
                try:
                    grads = vault.backward(sess, dict(msg.items))
                finally:
                    vault.close_session(sess)  # one backward per session, even a failed one
                return Message(MsgType.BACKWARD_RSP, items=sorted(grads.items()))
            if t == MsgType.SESSION_CLOSE:
                with self.lock:
                    entry = self.sessions.pop(msg.session, None)
                if entry is not None:
                    vault.close_session(entry[0])
                return Message(MsgType.SESSION_ACK, session=msg.session)
            return error_msg(ErrorCode.UNEXPECTED_MESSAGE, f"{t.name} is not a request")
        except _Stale as e:
            return error_msg(ErrorCode.STALE_SESSION, str(e))
        except VaultError as e:
            return error_msg(e.code, str(e))
        except Exception as e:  # never let one request kill the connection
            log.exception("internal error while handling %s", msg.type.name)
            return error_msg(ErrorCode.INTERNAL, f"{type(e).__name__}: {e}")

    def _session(self, sid: int, pop: bool):
        with self.lock:
            entry = self.sessions.pop(sid, None) if pop else self.sessions.get(sid)
            if entry is None:
                raise _Stale(f"session {sid} is unknown, closed or expired")
            if not pop:
                self.sessions[sid] = (entry[0], time.monotonic())
        return entry[0]

    def expire(self, now: float, timeout: float) -> int:
        with self.lock:
            dead = [sid for sid, (_, t) in self.sessions.items() if now - t > timeout]
            sessions = [self.sessions.pop(sid)[0] for sid in dead]
        for s in sessions:
            self.server.vault.close_session(s)
        return len(sessions)

    def close_all(self) -> None:
        self.expire(float("inf"), -1.0)


class _Stale(Exception):
    pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: VaultServer = self.server.owner
        conn = _Conn(srv, self.request, next(srv._conn_ids))
        srv._register(conn)
        try:
            conn.serve()
        finally:
            srv._unregister(conn)
            conn.close_all()


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class VaultServer:
    """``with VaultServer(vault, "127.0.0.1:0") as srv: ... srv.address``"""

    def __init__(self, vault: Vault, addr: str | tuple[str, int] | None = None,
                 limits: ServerLimits | None = None, ledger: ExposureLedger | None = None):
        self.vault = vault
        self.limits = limits or ServerLimits()
        self.ledger = ledger if ledger is not None else ExposureLedger()
        host, port = addr if isinstance(addr, tuple) else parse_addr(addr)
        self._tcp = _TCPServer((host, port), _Handler, bind_and_activate=True)
        self._tcp.owner = self
        self._conns: set[_Conn] = set()
        self._conns_lock = threading.Lock()
        self._conn_ids = itertools.count(1)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> str:
        host, port = self._tcp.server_address[:2]
        return f"{host}:{port}"

    def _register(self, conn: _Conn) -> None:
        with self._conns_lock:
            self._conns.add(conn)

    def _unregister(self, conn: _Conn) -> None:
        with self._conns_lock:
            self._conns.discard(conn)

    def open_session_count(self) -> int:
        with self._conns_lock:
            conns = list(self._conns)
        return sum(len(c.sessions) for c in conns)

    def sweep(self, now: float | None = None) -> int:
        """Close sessions idle longer than the timeout; returns how many."""
        now = time.monotonic() if now is None else now
        with self._conns_lock:
            conns = list(self._conns)
        return sum(c.expire(now, self.limits.idle_timeout) for c in conns)

    def _sweeper(self) -> None:
        period = max(0.01, min(1.0, self.limits.idle_timeout / 4))
        while not self._stop.wait(period):
            n = self.sweep()
            if n:
                log.info("expired %d idle session(s)", n)

    def start(self) -> "VaultServer":
        for target in (self._tcp.serve_forever, self._sweeper):
            th = threading.Thread(target=target, daemon=True)
            th.start()
            self._threads.append(th)
        log.info("vault %#x serving on %s", self.vault.checksum, self.address)
        return self

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.wait(0.5):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop.set()
        self._tcp.shutdown()
        self._tcp.server_close()
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def __enter__(self) -> "VaultServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(vault: Vault, addr: str | None = None, limits: ServerLimits | None = None) -> VaultServer:
    """Start serving in background threads and return the running server."""
    return VaultServer(vault, addr, limits).start()
