"""Network implementation of the vault-client interface."""
from __future__ import annotations

import itertools
import socket
import threading
from dataclasses import dataclass

import numpy as np

from graybox.protocol.ledger import ExposureLedger
from graybox.protocol.server import parse_addr, recv_exact
from graybox.protocol.wire import (
    HEADER,
    RETRIABLE,
    Message,
    MsgType,
    ProtocolError,
    RemoteError,
    decode_payload,
    encode,
    read_header,
)
from graybox.tensor import Tensor
from graybox.training.client import TransportError
from graybox.vault import EntryPointDescriptor

_client_ids = itertools.count(1)


@dataclass(eq=False)
class RemoteSession:
    session_id: int
    done: bool = False


class RemoteVaultClient:
    """Talks to a :class:`~graybox.protocol.server.VaultServer`.

    Socket failures raise :class:`TransportError` (retriable; the next call
    reconnects).  ERROR frames raise :class:`RemoteError`, except the busy code,
    which is also reported as a transport fault.
    """

    def __init__(self, addr: str | None = None, timeout: float = 60.0, ledger: ExposureLedger | None = None):
        self.host, self.port = parse_addr(addr)
        self.timeout = timeout
        self.ledger = ledger if ledger is not None else ExposureLedger()
        self._id = next(_client_ids)
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    # -- transport ---------------------------------------------------------------------

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
                self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            except OSError as e:
                raise TransportError(f"cannot reach vault at {self.host}:{self.port}: {e}") from e
        return self._sock

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def request(self, msg: Message) -> Message:
        """Send one frame and return the reply (ERROR replies raise)."""
        frame = encode(msg)
        with self._lock:
            sock = self._connect()
            try:
                sock.sendall(frame)
                self.ledger.record(self._id, "c2s", msg, len(frame))
                head = recv_exact(sock, HEADER)
                mtype, plen = read_header(head)
                payload = recv_exact(sock, plen)
            except (OSError, EOFError) as e:
                self._drop()
                raise TransportError(f"connection to vault lost: {e}") from e
            except ProtocolError:
                self._drop()
                raise
        reply = decode_payload(mtype, memoryview(payload), 0, plen)
        self.ledger.record(self._id, "s2c", reply, HEADER + plen)
        if reply.type == MsgType.ERROR:
            if reply.code in RETRIABLE:
                raise TransportError(f"vault busy: {reply.text}")
            raise RemoteError(reply.code, reply.text)
        return reply

    def _expect(self, msg: Message, want: MsgType) -> Message:
        reply = self.request(msg)
        if reply.type != want:
            raise ProtocolError(f"expected {want.name}, got {reply.type.name}")
        return reply

    def close(self) -> None:
        with self._lock:
            self._drop()

    def __enter__(self) -> "RemoteVaultClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- vault-client interface --------------------------------------------------------

    def describe(self) -> list[EntryPointDescriptor]:
        return self._expect(Message(MsgType.DESCRIBE_REQ), MsgType.DESCRIBE_RSP).descriptors

    def embed(self, ids) -> Tensor:
        ids = Tensor(np.asarray(ids, dtype=np.float32))
        return self._expect(Message(MsgType.EMBED_REQ, tensor=ids), MsgType.EMBED_RSP).tensor

    def open_session(self) -> RemoteSession:
        return RemoteSession(self._expect(Message(MsgType.SESSION_OPEN), MsgType.SESSION_ACK).session)

    def forward(self, session: RemoteSession, entries, text_free: int = 0) -> dict[str, Tensor]:
        items = [(int(k), v if isinstance(v, Tensor) else Tensor(np.asarray(v))) for k, v in sorted(entries.items())]
        msg = Message(MsgType.FORWARD_REQ, session=session.session_id, text_free=text_free, items=items)
        return dict(self._expect(msg, MsgType.FORWARD_RSP).items)

    def backward(self, session: RemoteSession, out_grads) -> dict[int, Tensor]:
        items = [(k, v if isinstance(v, Tensor) else Tensor(np.asarray(v))) for k, v in sorted(out_grads.items())]
        session.done = True  # the server closes the session whatever the outcome
        msg = Message(MsgType.BACKWARD_REQ, session=session.session_id, items=items)
        return dict(self._expect(msg, MsgType.BACKWARD_RSP).items)

    def close_session(self, session: RemoteSession) -> None:
        if session.done:
            return
        session.done = True
        try:
            self._expect(Message(MsgType.SESSION_CLOSE, session=session.session_id), MsgType.SESSION_ACK)
        except TransportError:
            pass  # the server reaps sessions of dropped connections


def remote_client(addr: str | None = None, **kw) -> RemoteVaultClient:
    return RemoteVaultClient(addr, **kw)
