import socket
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from fedretina.errors import (
    DecodeError,
    HandshakeRejected,
    NoParticipantsError,
    ProtocolError,
    RoundTimeoutError,
)
from fedretina.protocol import Ack, ClientUpdate, GlobalModel, Hello, Shutdown, encode
from fedretina.tensor_utils import ParameterSet
from fedretina.transport import (
    ALREADY_STARTED,
    DUPLICATE_CLIENT,
    STALE_ROUND,
    UNKNOWN_CLIENT,
    LoopbackTransport,
    TcpServerTransport,
    parse_address,
    recv_message,
    run_client,
    send_message,
)

LOCALHOST = ("127.0.0.1", 0)


class ShiftClient:
    """Replies with the global tensors shifted by a per-client offset."""

    def __init__(self, client_id, n_k, offset):
        self.client_id = client_id
        self.n_k = n_k
        self.offset = offset

    def handle(self, message):
        shifted = ParameterSet([(name, array + self.offset) for name, array in message.params])
        return ClientUpdate(message.round, self.client_id, self.n_k, shifted, float(self.offset))


def global_model(t=1):
    return GlobalModel(t, ParameterSet([("w", np.array([1.0, 2.0])), ("b", np.zeros(1, np.float32))]))


def clients():
    return [ShiftClient("B", 30, 2.0), ShiftClient("A", 10, 1.0)]


def tcp_server(expected, allowed=None, **timeouts):
    timeouts.setdefault("accept_timeout", 10.0)
    timeouts.setdefault("round_timeout", 10.0)
    timeouts.setdefault("read_timeout", 10.0)
    return TcpServerTransport(LOCALHOST, expected, allowed, **timeouts)


def test_parse_address():
    assert parse_address("10.0.0.2:8765") == ("10.0.0.2", 8765)
    assert parse_address(":9") == ("127.0.0.1", 9)
    for bad in ("nohost", "host:", "host:port"):
        with pytest.raises(ValueError):
            parse_address(bad)


def test_loopback_exchange():
    transport = LoopbackTransport(clients())
    assert transport.participants() == {"A": 10, "B": 30}
    updates = transport.exchange(global_model(), ["B", "A"])
    assert list(updates) == ["A", "B"]
    np.testing.assert_array_equal(updates["B"].params["w"], [3.0, 4.0])
    assert updates["A"].params["b"].dtype == np.float32


def test_loopback_workers_do_not_change_results():
    serial = LoopbackTransport(clients()).exchange(global_model(), ["A", "B"])
    pooled = LoopbackTransport(clients(), workers=2).exchange(global_model(), ["A", "B"])
    assert serial == pooled


def test_loopback_rejects_duplicates_and_empty():
    with pytest.raises(HandshakeRejected, match=DUPLICATE_CLIENT):
        LoopbackTransport([ShiftClient("A", 1, 0.0), ShiftClient("A", 2, 0.0)])
    with pytest.raises(NoParticipantsError):
        LoopbackTransport([])


def test_loopback_checks_the_round():
    class Lagging(ShiftClient):
        def handle(self, message):
            reply = super().handle(message)
            return ClientUpdate(reply.round - 1, reply.client_id, reply.n_k, reply.params, reply.val_loss)

    with pytest.raises(ProtocolError, match=STALE_ROUND):
        LoopbackTransport([Lagging("A", 1, 0.0)]).exchange(global_model(3), ["A"])


def test_tcp_matches_loopback():
    server = tcp_server(2, ["A", "B"])
    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(run_client, server.address, client, 10.0, 10.0) for client in clients()]
        assert server.accept_clients() == {"A": 10, "B": 30}
        over_tcp = [server.exchange(global_model(t), ["A", "B"]) for t in (1, 2)]
        server.close()
        assert [future.result(timeout=10) for future in futures] == [2, 2]
    loopback = LoopbackTransport(clients())
    assert over_tcp == [loopback.exchange(global_model(t), ["A", "B"]) for t in (1, 2)]


def test_tcp_rejects_duplicate_id():
    server = tcp_server(2, accept_timeout=2.0)
    twins = [ShiftClient("A", 1, 0.0), ShiftClient("A", 2, 0.0)]
    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(run_client, server.address, client, 10.0, 10.0) for client in twins]
        with pytest.raises(NoParticipantsError, match="only"):
            server.accept_clients()
        errors = [future.exception(timeout=10) for future in futures]
    assert all(isinstance(error, HandshakeRejected) for error in errors)
    assert any(DUPLICATE_CLIENT in str(error) for error in errors)


def test_tcp_rejects_unknown_id():
    server = tcp_server(1, ["A"], accept_timeout=2.0)
    with ThreadPoolExecutor(max_workers=1) as pool:
        future = pool.submit(run_client, server.address, ShiftClient("Z", 1, 0.0), 10.0, 10.0)
        with pytest.raises(NoParticipantsError):
            server.accept_clients()
        with pytest.raises(HandshakeRejected, match=UNKNOWN_CLIENT):
            future.result(timeout=10)


def test_no_participants():
    server = tcp_server(1, accept_timeout=0.2)
    with pytest.raises(NoParticipantsError, match="no institutions"):
        server.accept_clients()


def raw_client(address, client_id, n_k):
    sock = socket.create_connection(address, timeout=10)
    send_message(sock, Hello(client_id, n_k))
    return sock


def test_stale_round_is_rejected():
    server = tcp_server(1)
    sock = raw_client(server.address, "A", 5)
    server.accept_clients()
    seen = {}

    def stale_peer():
        request = recv_message(sock, idle_timeout=10)
        send_message(sock, ClientUpdate(request.round - 1, "A", 5, request.params, 0.0))
        seen["reply"] = recv_message(sock, idle_timeout=10)

    peer = threading.Thread(target=stale_peer)
    peer.start()
    with pytest.raises(ProtocolError, match=STALE_ROUND):
        server.exchange(global_model(2), ["A"])
    peer.join(timeout=10)
    sock.close()
    server.close()
    assert seen["reply"] == Shutdown(STALE_ROUND)


def test_round_timeout_and_partial_aggregation():
    server = tcp_server(2, round_timeout=0.5)
    silent = raw_client(server.address, "A", 5)
    replying = raw_client(server.address, "B", 7)
    server.accept_clients()

    def answer_once():
        request = recv_message(replying, idle_timeout=10)
        send_message(replying, ClientUpdate(request.round, "B", 7, request.params, 0.25))

    peer = threading.Thread(target=answer_once)
    peer.start()
    updates = server.exchange(global_model(1), ["A", "B"], allow_partial=True)
    peer.join(timeout=10)
    assert list(updates) == ["B"]
    assert recv_message(replying, idle_timeout=10) == Ack(1)

    with pytest.raises(RoundTimeoutError, match="no update"):
        server.exchange(global_model(2), ["A", "B"])
    server.close()
    silent.close()
    replying.close()


def test_recv_message_enforces_frame_limit():
    left, right = socket.socketpair()
    with left, right:
        left.sendall(encode(global_model()))
        with pytest.raises(DecodeError, match="limit"):
            recv_message(right, idle_timeout=5, read_timeout=5, max_frame=16)


def test_recv_message_reports_closed_peer():
    left, right = socket.socketpair()
    with right:
        left.sendall(encode(Ack(1))[:6])
        left.close()
        with pytest.raises(ConnectionError):
            recv_message(right, idle_timeout=5, read_timeout=5)


def test_client_reports_unreachable_server():
    placeholder = socket.create_server(LOCALHOST)
    address = placeholder.getsockname()[:2]
    placeholder.close()
    with pytest.raises(ProtocolError, match="cannot connect"):
        run_client(address, ShiftClient("A", 1, 0.0), connect_timeout=1.0)


def test_late_joiners_are_turned_away():
    server = tcp_server(1, ["A", "B"])
    first = raw_client(server.address, "A", 5)
    server.accept_clients()
    for client_id, reason in (("A", DUPLICATE_CLIENT), ("Z", UNKNOWN_CLIENT), ("B", ALREADY_STARTED)):
        late = raw_client(server.address, client_id, 9)
        assert recv_message(late, idle_timeout=10) == Shutdown(reason)
        late.close()
    with pytest.raises(HandshakeRejected, match=DUPLICATE_CLIENT):
        run_client(server.address, ShiftClient("A", 5, 0.0), 10.0, 10.0)
    assert server.participants() == {"A": 5}
    server.close()
    assert recv_message(first, idle_timeout=10) == Shutdown("federation complete")
    first.close()
