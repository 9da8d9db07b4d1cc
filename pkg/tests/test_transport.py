import json
import queue
import socket
import struct
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmesh.errors import DecodeError, TransportError
from fedmesh.protocol import Envelope, MessageType
from fedmesh.transport import (
    Endpoint,
    connect,
    decode_frame,
    encode_frame,
    in_process_pair,
    parse_hostport,
    serve,
    start_reader,
)

_n = iter(range(10**9))


def stop(sender="a", i=0):
    return Envelope(MessageType.STOP, sender, 0, {"reason": "session_end", "i": i})


def raw_frame(doc) -> bytes:
    body = json.dumps(doc).encode()
    return struct.pack(">I", len(body)) + body


def test_frame_header_is_big_endian_length():
    env = stop()
    frame = encode_frame(env)
    body = json.dumps(env.to_dict(), separators=(",", ":")).encode()
    assert frame[:4] == len(body).to_bytes(4, "big")
    assert json.loads(frame[4:]) == {"type": "STOP", "sender": "a", "round": 0, "payload": {"reason": "session_end", "i": 0}}
    assert decode_frame(frame) == env


def test_truncated_frames():
    frame = encode_frame(stop())
    with pytest.raises(TransportError, match="truncated frame header"):
        decode_frame(frame[:3])
    with pytest.raises(TransportError, match="truncated frame"):
        decode_frame(frame[:-1])


def test_decode_errors():
    with pytest.raises(DecodeError, match="type"):
        decode_frame(raw_frame({"sender": "a", "round": 0, "payload": {}}))
    bad = b"{not json"
    with pytest.raises(DecodeError):
        decode_frame(struct.pack(">I", len(bad)) + bad)
    with pytest.raises(DecodeError, match="trailing"):
        decode_frame(encode_frame(stop()) + b"x")


def test_frame_cap():
    big = Envelope(MessageType.ERROR, "a", 0, {"message": "x" * 200})
    with pytest.raises(TransportError, match="frame too large"):
        encode_frame(big, max_frame=100)
    with pytest.raises(TransportError, match="frame too large"):
        decode_frame(struct.pack(">I", 101) + b"{}", max_frame=100)


def test_nan_is_not_encodable():
    with pytest.raises(ValueError):
        encode_frame(Envelope(MessageType.EVAL_REPLY, "a", 1, {"accuracy": float("nan"), "n": 1}))


def test_in_process_fifo():
    a, b = in_process_pair()
    for i in range(100):
        a.send(stop(i=i))
    assert [b.recv(1.0).payload["i"] for i in range(100)] == list(range(100))
    with pytest.raises(TimeoutError):
        b.recv(0.01)
    a.close()
    with pytest.raises(TransportError):
        b.recv(1.0)
    with pytest.raises(TransportError):
        a.send(stop())


def test_in_process_connection_refused():
    with pytest.raises(TransportError, match="connection refused"):
        connect("in_process", "nobody-listens-here")


def test_in_process_address_in_use():
    key = f"busy-{next(_n)}"
    listener = serve(Endpoint("agg", key, "in_process"), lambda c: None)
    try:
        with pytest.raises(TransportError, match="in use"):
            serve(Endpoint("agg", key, "in_process"), lambda c: None)
    finally:
        listener.close()


def test_tcp_ephemeral_port_and_round_trip():
    accepted = queue.Queue()
    listener = serve(Endpoint("agg", "127.0.0.1:0", "tcp"), accepted.put)
    try:
        assert listener.port > 0
        client = connect("tcp", listener.address)
        server = accepted.get(timeout=5)
        client.send(stop(i=7))
        assert server.recv(5).payload["i"] == 7
        server.send(stop("agg", 8))
        assert client.recv(5).payload["i"] == 8
        client.close()
        with pytest.raises(TransportError, match="closed"):
            server.recv(5)
    finally:
        listener.close()


def test_tcp_connection_refused():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(TransportError, match="cannot connect"):
        connect("tcp", f"127.0.0.1:{port}", timeout=2)


def _tcp_pair(max_frame=16 * 1024 * 1024):
    accepted = queue.Queue()
    listener = serve(Endpoint("agg", "127.0.0.1:0", "tcp"), accepted.put, max_frame)
    raw = socket.create_connection(("127.0.0.1", listener.port))
    return listener, raw, accepted.get(timeout=5)


def test_tcp_mid_frame_close_is_truncation():
    listener, raw, server = _tcp_pair()
    try:
        frame = encode_frame(stop())
        raw.sendall(frame[:-3])
        raw.close()
        with pytest.raises(TransportError, match="truncated frame"):
            server.recv(5)
    finally:
        listener.close()


def test_tcp_oversized_header_rejected():
    listener, raw, server = _tcp_pair(max_frame=64)
    try:
        raw.sendall(struct.pack(">I", 65))
        with pytest.raises(TransportError, match="frame too large"):
            server.recv(5)
        assert server.closed
    finally:
        raw.close()
        listener.close()


def test_parse_hostport():
    assert parse_hostport("10.0.0.1:80") == ("10.0.0.1", 80)
    assert parse_hostport(":9") == ("127.0.0.1", 9)
    for bad in ("nohost", "h:port"):
        with pytest.raises(TransportError):
            parse_hostport(bad)


def test_reader_drops_connection_on_decode_error():
    a, b = in_process_pair()
    got = queue.Queue()
    start_reader(b, lambda c, env, why: got.put((env, why)))
    a._out.put(raw_frame({"sender": "a", "round": 0, "payload": {}}))
    env, why = got.get(timeout=5)
    assert env is None and why.startswith("decode error")


@pytest.mark.parametrize("transport", ["in_process", "tcp"])
def test_stress_ten_parties_fifo(transport):
    n_parties, n_msgs = 10, 1000
    address = f"stress-{next(_n)}" if transport == "in_process" else "127.0.0.1:0"
    inbox: queue.Queue = queue.Queue()

    def on_connect(conn):
        start_reader(conn, lambda c, env, why: inbox.put((c, env)))

    listener = serve(Endpoint("agg", address, transport), on_connect)
    try:

        def client(k):
            conn = connect(transport, listener.address, client_name=f"p{k}")
            for i in range(n_msgs):
                conn.send(Envelope(MessageType.MODEL_UPDATE, f"p{k}", i + 1, {"weights": {"w": [float(i)]}}))
            conn.close()

        threads = [threading.Thread(target=client, args=(k,)) for k in range(n_parties)]
        for t in threads:
            t.start()
        seen: dict[str, list[int]] = {}
        closed = 0
        while closed < n_parties:
            _, env = inbox.get(timeout=30)
            if env is None:
                closed += 1
            else:
                seen.setdefault(env.sender, []).append(env.round)
        for t in threads:
            t.join()
        assert sorted(seen) == [f"p{k}" for k in range(n_parties)]
        assert all(rounds == list(range(1, n_msgs + 1)) for rounds in seen.values())
    finally:
        listener.close()


json_leaf = st.one_of(st.none(), st.booleans(), st.integers(-(2**53), 2**53), st.floats(allow_nan=False, allow_infinity=False), st.text(max_size=8))
json_value = st.recursive(json_leaf, lambda kids: st.lists(kids, max_size=3) | st.dictionaries(st.text(max_size=5), kids, max_size=3), max_leaves=10)


@given(st.text(max_size=12), st.dictionaries(st.text(max_size=6), json_value, max_size=4), st.sampled_from(["STOP", "ERROR"]))
def test_codec_round_trip(sender, payload, mtype):
    if mtype == "ERROR":
        payload = {**payload, "message": "m"}
    env = Envelope(MessageType(mtype), sender, 0, payload)
    assert decode_frame(encode_frame(env)) == env
