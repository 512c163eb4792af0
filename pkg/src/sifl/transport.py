"""Socket transport: the same round loop spoken over TCP frames.

Topology per the protocol module: the aggregator owns the only listener;
every client keeps one blocking connection to it, and the server drives the
run over a separate aggregator<->server stream.  All model payloads cross the
wire as frames, so the aggregator sees exactly what an untrusted network host
would see: encrypted vectors, dataset sizes, and scalar losses.

Roles run as threads in one process.  The arithmetic per round is the same
code in the same order as the in-process simulator (clients are independent,
and the aggregator sums by client id, not arrival), so a socket run must
reproduce the simulator's records bit for bit, timings aside.
"""

from __future__ import annotations

import socket
import threading
import time

import numpy as np

from .config import RunConfig
from .keys import (
    EncryptedParamVector,
    RandomnessSource,
    decrypt,
    derive_seed,
    encrypt,
    fresh_randomness,
    keyset_from_bytes,
    keyset_to_bytes,
    TAG_INIT,
)
from .protocol import (
    Aggregator,
    HEADER_SIZE,
    Message,
    ProtocolError,
    decode_message,
    encode_message,
)
from .training import (
    SessionResult,
    build_clients,
    build_keys,
    build_model,
    hyper_of,
    run_client_update,
)
from .protocol import RoundRecord

__all__ = ["send_frame", "recv_frame", "run_socket_session", "parse_listen_addr"]

SOCKET_TIMEOUT_S = 300.0


def parse_listen_addr(net: str) -> tuple[str, int]:
    if not net:
        return ("127.0.0.1", 0)
    host, _, port = net.rpartition(":")
    if not host:
        raise ValueError(f"listen address must be host:port, got {net!r}")
    return (host, int(port))


def send_frame(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def _recv_exact(sock: socket.socket, nbytes: int) -> bytes:
    chunks = []
    remaining = nbytes
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> Message:
    header = _recv_exact(sock, HEADER_SIZE)
    kind_byte, length = header[5], int.from_bytes(header[12:20], "little")
    body_len = length if kind_byte == 2 else length * 8  # KEYSET counts raw bytes
    return decode_message(header + _recv_exact(sock, body_len))


def _aggregator_loop(listener: socket.socket, n_clients: int, errors: list) -> None:
    """Accept the roster, then relay broadcasts and aggregate updates."""
    conns = {}
    server_conn = None
    try:
        for _ in range(n_clients + 1):
            conn, _ = listener.accept()
            conn.settimeout(SOCKET_TIMEOUT_S)
            hello = recv_frame(conn)
            if hello.kind != "HELLO":
                raise ProtocolError(f"expected HELLO, got {hello.kind}")
            if hello.client_id == 0:
                server_conn = conn
            else:
                conns[hello.client_id] = conn
        if server_conn is None:
            raise ProtocolError("server never connected to aggregator")
        client_ids = sorted(conns)

        while True:
            msg = recv_frame(server_conn)
            if msg.kind in ("KEYSET", "GLOBAL", "DONE"):
                for cid in client_ids:
                    send_frame(conns[cid], msg)
            if msg.kind == "DONE":
                break
            if msg.kind != "GLOBAL":
                continue

            agg = Aggregator(client_ids)
            for cid in client_ids:
                try:
                    update = recv_frame(conns[cid])
                except (socket.timeout, ProtocolError) as exc:
                    raise ProtocolError(f"missing update from client {cid}: {exc}")
                if update.kind != "UPDATE" or update.round_index != msg.round_index:
                    raise ProtocolError(
                        f"client {update.client_id} sent {update.kind} for round "
                        f"{update.round_index}, expected UPDATE for {msg.round_index}"
                    )
                size, loss = int(update.payload[0]), float(update.payload[1])
                agg.submit(update.client_id, update.payload[2:], size, loss, update.round_index)
            vec, mean_loss, round_index = agg.finish()
            send_frame(
                server_conn,
                Message(kind="AGGREGATE", round_index=round_index,
                        payload=np.concatenate(([mean_loss], vec))),
            )
    except Exception as exc:  # surfaced by the server thread after join
        errors.append(exc)
    finally:
        for conn in list(conns.values()) + ([server_conn] if server_conn else []):
            conn.close()


def _client_loop(
    config: RunConfig,
    mode: str,
    client,
    model,
    hyper,
    addr: tuple[str, int],
    updates_out: list[dict],
    lock: threading.Lock,
    errors: list,
) -> None:
    keys = None
    keep_updates = config.verbosity >= 2
    try:
        with socket.create_connection(addr, timeout=SOCKET_TIMEOUT_S) as sock:
            send_frame(sock, Message(kind="HELLO", client_id=client.client_id,
                                     payload=np.array([float(client.size)])))
            while True:
                msg = recv_frame(sock)
                if msg.kind == "DONE":
                    return
                if msg.kind == "KEYSET":
                    keys = keyset_from_bytes(msg.blob)
                    continue
                if msg.kind != "GLOBAL":
                    raise ProtocolError(f"client expected GLOBAL, got {msg.kind}")
                if mode == "sifl":
                    if keys is None:
                        raise ProtocolError("GLOBAL before KEYSET in encrypted mode")
                    broadcast = EncryptedParamVector(
                        values=np.array(msg.payload), round_index=msg.round_index
                    )
                else:
                    broadcast = np.array(msg.payload)
                values, loss = run_client_update(
                    mode, model, hyper, client, broadcast, keys,
                    config.seed, msg.round_index,
                )
                if keep_updates:
                    with lock:
                        while len(updates_out) <= msg.round_index:
                            updates_out.append({})
                        updates_out[msg.round_index][client.client_id] = values
                send_frame(
                    sock,
                    Message(kind="UPDATE", round_index=msg.round_index,
                            client_id=client.client_id,
                            payload=np.concatenate(([float(client.size), loss], values))),
                )
    except Exception as exc:
        errors.append(exc)


def run_socket_session(config: RunConfig, mode: str) -> SessionResult:
    """Run one mode end to end over TCP; mirrors Simulation.run()."""
    if mode not in ("plain", "sifl"):
        raise ValueError(f"socket session mode must be plain or sifl, got {mode!r}")
    model = build_model(config)
    clients, test_set = build_clients(config)
    hyper = hyper_of(config)
    keys = build_keys(config, model) if mode == "sifl" else None
    randomness = RandomnessSource(seed=config.seed, scale=config.randomness_scale)
    result = SessionResult(mode=mode, records=[], param_trace=[], keys=keys)
    updates_out: list[dict] = []
    lock = threading.Lock()
    errors: list[Exception] = []

    listener = socket.create_server(parse_listen_addr(config.net))
    listener.settimeout(SOCKET_TIMEOUT_S)
    addr = listener.getsockname()[:2]
    threads = [
        threading.Thread(target=_aggregator_loop, args=(listener, len(clients), errors),
                         name="aggregator", daemon=True)
    ]
    for client in clients:
        threads.append(
            threading.Thread(
                target=_client_loop,
                args=(config, mode, client, model, hyper, addr, updates_out, lock, errors),
                name=f"client-{client.client_id}", daemon=True,
            )
        )
    for th in threads:
        th.start()

    try:
        with socket.create_connection(addr, timeout=SOCKET_TIMEOUT_S) as server_sock:
            send_frame(server_sock, Message(kind="HELLO", client_id=0))
            if mode == "sifl":
                send_frame(server_sock, Message(kind="KEYSET", blob=keyset_to_bytes(keys)))
            w = model.init_params(derive_seed(config.seed, TAG_INIT))
            for t in range(config.rounds):
                enc_ms = dec_ms = 0.0
                if mode == "sifl":
                    rr = fresh_randomness(keys, t, randomness)
                    result.randomness_trace.append(rr)
                    tic = time.perf_counter()
                    payload = encrypt(keys, w, rr).values
                    enc_ms = (time.perf_counter() - tic) * 1e3
                else:
                    payload = w
                send_frame(server_sock, Message(kind="GLOBAL", round_index=t, payload=payload))
                tic = time.perf_counter()
                reply = recv_frame(server_sock)
                train_ms = (time.perf_counter() - tic) * 1e3
                if reply.kind != "AGGREGATE" or reply.round_index != t:
                    raise ProtocolError(f"expected AGGREGATE for round {t}, got {reply.kind}")
                train_loss = float(reply.payload[0])
                agg_values = np.array(reply.payload[1:])
                if mode == "sifl":
                    enc_agg = EncryptedParamVector(values=agg_values, round_index=t)
                    tic = time.perf_counter()
                    w = decrypt(keys, enc_agg)
                    dec_ms = (time.perf_counter() - tic) * 1e3
                    result.enc_trace.append(enc_agg)
                else:
                    w = agg_values
                record = RoundRecord(
                    round_index=t, mode=mode, train_loss=train_loss,
                    test_accuracy=model.accuracy(w, *test_set),
                    t_encrypt_ms=enc_ms, t_decrypt_ms=dec_ms, t_train_ms=train_ms,
                )
                record.validate()
                result.records.append(record)
                result.param_trace.append(w.copy())
            send_frame(server_sock, Message(kind="DONE", round_index=config.rounds))
    finally:
        for th in threads:
            th.join(timeout=SOCKET_TIMEOUT_S)
        listener.close()
    if errors:
        raise errors[0]
    result.client_updates = updates_out
    return result
