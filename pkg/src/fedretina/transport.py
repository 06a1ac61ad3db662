"""Moving GLOBAL_MODEL / CLIENT_UPDATE frames between the server and institutions.

Two backends share one interface: `LoopbackTransport` runs the institutions
in-process but still pushes every message through the wire codec, and
`TcpServerTransport` + `run_client` do the same over sockets.
"""
import logging
import queue
import socket
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Optional, Sequence, Tuple

from fedretina.config import ACCEPT_TIMEOUT, MAX_FRAME_BYTES, READ_TIMEOUT, ROUND_TIMEOUT
from fedretina.errors import (
    DecodeError,
    HandshakeRejected,
    NoParticipantsError,
    ProtocolError,
    RoundTimeoutError,
)
from fedretina.protocol import (
    HEADER_SIZE,
    Ack,
    ClientUpdate,
    GlobalModel,
    Hello,
    Message,
    Shutdown,
    decode,
    decode_header,
    encode,
)

logger = logging.getLogger(__name__)

FEDERATION_COMPLETE = "federation complete"
STALE_ROUND = "stale round"
DUPLICATE_CLIENT = "duplicate client id"
UNKNOWN_CLIENT = "unknown client id"
ALREADY_STARTED = "federation already started"
LATE_JOIN_POLL = 0.2

Address = Tuple[str, int]


def parse_address(text: str) -> Address:
    """"host:port" -> (host, port)."""
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks, remaining = [], size
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionError(f"peer closed the connection with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, message: Message) -> None:
    sock.sendall(encode(message))
    logger.debug("sent %s", type(message).__name__)


def recv_message(sock: socket.socket, idle_timeout: Optional[float] = None,
                 read_timeout: float = READ_TIMEOUT, max_frame: int = MAX_FRAME_BYTES) -> Message:
    """Read one frame.

    `idle_timeout` bounds the wait for the first header byte (None waits
    forever); `read_timeout` bounds every read after that. The payload
    length is checked against `max_frame` before the payload is read.
    """
    sock.settimeout(idle_timeout)
    first = _recv_exact(sock, 1)
    sock.settimeout(read_timeout)
    header = first + _recv_exact(sock, HEADER_SIZE - 1)
    kind, length = decode_header(header, max_payload=max_frame)
    message = decode(header + _recv_exact(sock, length))
    logger.debug("received %s (%d payload bytes)", kind.name, length)
    return message


def _close_quietly(sock: socket.socket, reason: Optional[str] = None) -> None:
    try:
        if reason is not None:
            send_message(sock, Shutdown(reason))
    except OSError:
        pass
    finally:
        sock.close()


class Transport(ABC):
    """Server-side view of the institutions taking part in a federation."""

    @abstractmethod
    def participants(self) -> Dict[str, int]:
        """client_id -> n_k as announced in the HELLO handshake."""

    @abstractmethod
    def exchange(self, message: GlobalModel, client_ids: Sequence[str],
                 allow_partial: bool = False) -> Dict[str, ClientUpdate]:
        """Broadcast `message` to `client_ids` and block until each has replied.

        With `allow_partial` a round timeout returns the updates received so
        far (if any) instead of raising RoundTimeoutError.
        """

    def close(self, reason: str = FEDERATION_COMPLETE) -> None:
        pass


def check_update(update: Message, expected_round: int, client_id: str) -> ClientUpdate:
    if not isinstance(update, ClientUpdate):
        raise ProtocolError(f"{client_id}: expected CLIENT_UPDATE, got {type(update).__name__}")
    if update.round != expected_round:
        raise ProtocolError(f"{client_id}: {STALE_ROUND} {update.round}, expected {expected_round}")
    if update.client_id != client_id:
        raise ProtocolError(f"connection registered as {client_id} sent an update as {update.client_id}")
    return update


class LoopbackTransport(Transport):
    """In-process institutions behind the wire codec.

    Each client needs `client_id`, `n_k` and `handle(GlobalModel) -> ClientUpdate`.
    With workers > 1 local training runs on a thread pool; results are still
    collected in client_id order.
    """

    def __init__(self, clients: Sequence, workers: int = 1):
        self.workers = max(1, workers)
        self._clients = {}
        self._sizes: Dict[str, int] = {}
        for client in clients:
            hello = decode(encode(Hello(client.client_id, client.n_k)))
            if hello.client_id in self._clients:
                raise HandshakeRejected(f"{DUPLICATE_CLIENT}: {hello.client_id}")
            self._clients[hello.client_id] = client
            self._sizes[hello.client_id] = hello.n_k
        if not self._clients:
            raise NoParticipantsError("no institutions joined the federation")

    def participants(self) -> Dict[str, int]:
        return dict(self._sizes)

    def _serve_one(self, frame: bytes, client_id: str) -> ClientUpdate:
        request = decode(frame)
        reply = self._clients[client_id].handle(request)
        return decode(encode(reply))

    def exchange(self, message: GlobalModel, client_ids: Sequence[str],
                 allow_partial: bool = False) -> Dict[str, ClientUpdate]:
        frame = encode(message)
        ordered = sorted(client_ids)
        if self.workers > 1 and len(ordered) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                replies = list(pool.map(lambda cid: self._serve_one(frame, cid), ordered))
        else:
            replies = [self._serve_one(frame, cid) for cid in ordered]
        return {cid: check_update(reply, message.round, cid) for cid, reply in zip(ordered, replies)}


class TcpServerTransport(Transport):
    """Listening side of the TCP backend.

    One reader thread per connection pushes decoded frames onto a single
    queue; `exchange` drains that queue on the caller's thread, so round
    state is only ever touched by one thread. Once the handshake phase is
    over a gatekeeper thread answers any further connection with SHUTDOWN.
    """

    def __init__(self, bind: Address, expected_clients: int, allowed_ids: Optional[Sequence[str]] = None,
                 read_timeout: float = READ_TIMEOUT, round_timeout: float = ROUND_TIMEOUT,
                 accept_timeout: float = ACCEPT_TIMEOUT, max_frame: int = MAX_FRAME_BYTES):
        self.expected_clients = expected_clients
        self.allowed_ids = set(allowed_ids) if allowed_ids is not None else None
        self.read_timeout = read_timeout
        self.round_timeout = round_timeout
        self.accept_timeout = accept_timeout
        self.max_frame = max_frame
        self._listener = socket.create_server(bind)
        self.address: Address = self._listener.getsockname()[:2]
        self._inbox: "queue.Queue[Tuple[str, object]]" = queue.Queue()
        self._connections: Dict[str, socket.socket] = {}
        self._sizes: Dict[str, int] = {}
        self._readers = []
        self._closing = threading.Event()
        self._gatekeeper: Optional[threading.Thread] = None
        logger.info("listening on %s:%d for %d institutions", *self.address, expected_clients)

    def accept_clients(self) -> Dict[str, int]:
        """Run HELLO handshakes until every expected institution joined or the accept timeout lapses."""
        deadline = time.monotonic() + self.accept_timeout
        while len(self._connections) < self.expected_clients:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            self._listener.settimeout(remaining)
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                break
            self._handshake(conn, peer)
        if not self._connections:
            self.close("no participants")
            raise NoParticipantsError(f"no institutions connected within {self.accept_timeout:g} s")
        if len(self._connections) < self.expected_clients:
            joined = sorted(self._connections)
            self.close("federation aborted")
            raise NoParticipantsError(f"only {joined} of {self.expected_clients} institutions connected")
        self._gatekeeper = threading.Thread(target=self._turn_away_late_joiners, name="gatekeeper", daemon=True)
        self._gatekeeper.start()
        return self.participants()

    def _turn_away_late_joiners(self) -> None:
        """Answer every HELLO after the handshake phase with SHUTDOWN until the transport closes."""
        self._listener.settimeout(LATE_JOIN_POLL)
        while not self._closing.is_set():
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                hello = recv_message(conn, idle_timeout=self.read_timeout, read_timeout=self.read_timeout,
                                     max_frame=self.max_frame)
            except (DecodeError, OSError) as exc:
                logger.warning("late handshake with %s failed: %s", peer, exc)
                _close_quietly(conn)
                continue
            if not isinstance(hello, Hello):
                reason = "expected HELLO"
            elif hello.client_id in self._sizes:
                reason = DUPLICATE_CLIENT
            elif self.allowed_ids is not None and hello.client_id not in self.allowed_ids:
                reason = UNKNOWN_CLIENT
            else:
                reason = ALREADY_STARTED
            logger.warning("rejecting late connection from %s: %s", peer, reason)
            _close_quietly(conn, reason)

    def _handshake(self, conn: socket.socket, peer) -> None:
        try:
            hello = recv_message(conn, idle_timeout=self.read_timeout, read_timeout=self.read_timeout,
                                 max_frame=self.max_frame)
        except (DecodeError, OSError) as exc:
            logger.warning("handshake with %s failed: %s", peer, exc)
            _close_quietly(conn)
            return
        if not isinstance(hello, Hello):
            logger.warning("%s opened with %s instead of HELLO", peer, type(hello).__name__)
            _close_quietly(conn, "expected HELLO")
            return
        if hello.client_id in self._connections:
            logger.warning("rejecting %s: %s %r", peer, DUPLICATE_CLIENT, hello.client_id)
            _close_quietly(conn, DUPLICATE_CLIENT)
            return
        if self.allowed_ids is not None and hello.client_id not in self.allowed_ids:
            logger.warning("rejecting %s: %s %r", peer, UNKNOWN_CLIENT, hello.client_id)
            _close_quietly(conn, UNKNOWN_CLIENT)
            return
        self._connections[hello.client_id] = conn
        self._sizes[hello.client_id] = hello.n_k
        reader = threading.Thread(target=self._read_loop, args=(hello.client_id, conn),
                                  name=f"reader-{hello.client_id}", daemon=True)
        reader.start()
        self._readers.append(reader)
        logger.info("institution %s joined from %s (n_k=%d)", hello.client_id, peer, hello.n_k)

    def _read_loop(self, client_id: str, conn: socket.socket) -> None:
        while True:
            try:
                message = recv_message(conn, idle_timeout=None, read_timeout=self.read_timeout,
                                       max_frame=self.max_frame)
            except (DecodeError, OSError) as exc:
                self._inbox.put((client_id, exc))
                return
            self._inbox.put((client_id, message))

    def participants(self) -> Dict[str, int]:
        return dict(self._sizes)

    def _drop(self, client_id: str, reason: Optional[str]) -> None:
        conn = self._connections.pop(client_id, None)
        if conn is not None:
            _close_quietly(conn, reason)

    def exchange(self, message: GlobalModel, client_ids: Sequence[str],
                 allow_partial: bool = False) -> Dict[str, ClientUpdate]:
        frame = encode(message)
        pending = set(client_ids)
        for client_id in sorted(pending):
            try:
                self._connections[client_id].sendall(frame)
            except (KeyError, OSError) as exc:
                raise RoundTimeoutError(f"round {message.round}: cannot reach {client_id}: {exc}") from exc

        updates: Dict[str, ClientUpdate] = {}
        deadline = time.monotonic() + self.round_timeout
        while pending:
            remaining = deadline - time.monotonic()
            try:
                client_id, item = self._inbox.get(timeout=max(remaining, 0))
            except queue.Empty:
                if allow_partial and updates:
                    logger.warning("round %d: aggregating without %s after timeout", message.round, sorted(pending))
                    return updates
                raise RoundTimeoutError(
                    f"round {message.round}: no update from {sorted(pending)} "
                    f"within {self.round_timeout:g} s") from None
            if isinstance(item, Exception):
                self._drop(client_id, None)
                raise RoundTimeoutError(f"round {message.round}: lost {client_id}: {item}")
            if isinstance(item, ClientUpdate) and item.round != message.round:
                self._drop(client_id, STALE_ROUND)
                raise ProtocolError(f"{client_id}: {STALE_ROUND} {item.round}, expected {message.round}")
            try:
                update = check_update(item, message.round, client_id)
            except ProtocolError:
                self._drop(client_id, "protocol violation")
                raise
            if client_id not in pending:
                self._drop(client_id, "protocol violation")
                raise ProtocolError(f"{client_id}: second update for round {message.round}")
            pending.discard(client_id)
            updates[client_id] = update
            send_message(self._connections[client_id], Ack(message.round))
        return updates

    def close(self, reason: str = FEDERATION_COMPLETE) -> None:
        self._closing.set()
        if self._gatekeeper is not None:
            self._gatekeeper.join(timeout=self.read_timeout + LATE_JOIN_POLL)
        for client_id in sorted(self._connections):
            self._drop(client_id, reason)
        self._listener.close()


def _connect(address: Address, timeout: float) -> socket.socket:
    """Open a connection, retrying once after a refused or timed-out attempt."""
    try:
        return socket.create_connection(address, timeout=timeout)
    except OSError as exc:
        logger.warning("connecting to %s:%d failed (%s), retrying once", *address, exc)
        time.sleep(1.0)
        return socket.create_connection(address, timeout=timeout)


def run_client(address: Address, client, read_timeout: float = READ_TIMEOUT,
               connect_timeout: float = ACCEPT_TIMEOUT, max_frame: int = MAX_FRAME_BYTES) -> int:
    """Institution side of the TCP backend; returns the number of rounds served."""
    try:
        sock = _connect(address, connect_timeout)
    except OSError as exc:
        raise ProtocolError(f"cannot connect to {address[0]}:{address[1]}: {exc}") from exc
    rounds = 0
    last_round: Optional[int] = None
    with sock:
        send_message(sock, Hello(client.client_id, client.n_k))
        while True:
            try:
                message = recv_message(sock, idle_timeout=None, read_timeout=read_timeout, max_frame=max_frame)
            except OSError as exc:
                raise ProtocolError(f"connection to server lost: {exc}") from exc
            if isinstance(message, GlobalModel):
                last_round = message.round
                logger.info("%s: training for round %d", client.client_id, message.round)
                send_message(sock, client.handle(message))
                rounds += 1
            elif isinstance(message, Ack):
                if message.round != last_round:
                    raise ProtocolError(f"ACK for round {message.round}, last round was {last_round}")
            elif isinstance(message, Shutdown):
                if message.reason == FEDERATION_COMPLETE:
                    logger.info("%s: server finished after %d rounds", client.client_id, rounds)
                    return rounds
                if rounds == 0:
                    raise HandshakeRejected(f"server rejected {client.client_id}: {message.reason}")
                raise ProtocolError(f"server shut down: {message.reason}")
            else:
                raise ProtocolError(f"unexpected {type(message).__name__} from server")
