"""Socket transport: framing over real connections, simulator parity."""

import socket
import threading

import numpy as np
import pytest

from sifl.config import desk_benchmark
from sifl.protocol import Message, ProtocolError
from sifl.transport import parse_listen_addr, recv_frame, run_socket_session, send_frame
from sifl.training import run_training


def nontiming(record):
    return (
        record.round_index,
        record.mode,
        record.train_loss,
        record.test_accuracy,
        record.equivalence_rel_err,
    )


def test_parse_listen_addr():
    assert parse_listen_addr("") == ("127.0.0.1", 0)
    assert parse_listen_addr("0.0.0.0:9000") == ("0.0.0.0", 9000)
    with pytest.raises(ValueError, match="host:port"):
        parse_listen_addr("9000")


def test_frames_cross_a_real_socket():
    a, b = socket.socketpair()
    try:
        payload = np.linspace(-1, 1, 513)
        msg = Message(kind="UPDATE", round_index=2, client_id=7, payload=payload)
        sender = threading.Thread(target=send_frame, args=(a, msg))
        sender.start()
        back = recv_frame(b)
        sender.join()
        assert back.kind == "UPDATE" and back.client_id == 7
        assert back.payload.tobytes() == payload.tobytes()
    finally:
        a.close()
        b.close()


def test_keyset_frame_crosses_a_real_socket():
    a, b = socket.socketpair()
    try:
        blob = bytes(range(256)) * 3
        sender = threading.Thread(
            target=send_frame, args=(a, Message(kind="KEYSET", blob=blob))
        )
        sender.start()
        back = recv_frame(b)
        sender.join()
        assert back.kind == "KEYSET" and back.blob == blob
    finally:
        a.close()
        b.close()


def test_closed_connection_is_a_protocol_error():
    a, b = socket.socketpair()
    a.close()
    try:
        with pytest.raises(ProtocolError, match="closed"):
            recv_frame(b)
    finally:
        b.close()


def test_socket_session_matches_simulator_plain():
    cfg = desk_benchmark(mode="plain", rounds=3, per_client=40, test_count=20)
    sim = run_training(cfg, transport="sim")
    sock = run_training(cfg, transport="socket")
    assert [nontiming(r) for r in sim.records] == [nontiming(r) for r in sock.records]


def test_socket_session_matches_simulator_dual():
    cfg = desk_benchmark(rounds=3, per_client=40, test_count=20)
    sim = run_training(cfg, transport="sim")
    sock = run_training(cfg, transport="socket")
    assert [nontiming(r) for r in sim.records] == [nontiming(r) for r in sock.records]
    assert sock.report.passed
    assert sim.report.per_round == sock.report.per_round


def test_socket_session_honors_explicit_listen_addr():
    cfg = desk_benchmark(mode="sifl", rounds=1, per_client=20, test_count=10,
                         net="127.0.0.1:0")
    result = run_socket_session(cfg, "sifl")
    assert len(result.records) == 1
    assert result.records[0].mode == "sifl"
