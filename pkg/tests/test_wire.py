import io
import json
import threading

import pytest

from gridmon.wire import (Connection, FrameServer, MAX_FRAME_BYTES, WireError,
                          encode_frame, read_frame, split_endpoint)


class TestFraming:
    def test_round_trip(self):
        frame = {"type": "TEST", "n": 3, "s": "x"}
        buf = io.BytesIO(encode_frame(frame))
        assert read_frame(buf) == frame

    def test_eof_returns_none(self):
        assert read_frame(io.BytesIO(b"")) is None

    def test_frame_without_type_rejected(self):
        with pytest.raises(WireError):
            read_frame(io.BytesIO(b'{"x": 1}\n'))

    def test_non_object_rejected(self):
        with pytest.raises(WireError):
            read_frame(io.BytesIO(b'[1, 2]\n'))

    def test_oversize_frame_rejected(self):
        frame = b'{"type": "big", "pad": "' + b"x" * MAX_FRAME_BYTES + b'"}\n'
        with pytest.raises(WireError):
            read_frame(io.BytesIO(frame))

    def test_blank_line_skipped_as_empty_frame(self):
        assert read_frame(io.BytesIO(b"\n")) == {}


class TestEndpoint:
    def test_split(self):
        assert split_endpoint("127.0.0.1:80") == ("127.0.0.1", 80)

    def test_invalid(self):
        with pytest.raises(ValueError):
            split_endpoint("no-port")
        with pytest.raises(ValueError):
            split_endpoint(":123")


class TestFrameServer:
    def test_echo_request_reply(self):
        def handler(conn):
            while True:
                frame = conn.recv()
                if frame is None:
                    return
                conn.send({"type": "ECHO", "got": frame})

        server = FrameServer("127.0.0.1:0", handler)
        server.start()
        try:
            conn = Connection.open_endpoint(server.endpoint)
            reply = conn.rpc({"type": "HI", "n": 1})
            assert reply["got"]["n"] == 1
            conn.close()
        finally:
            server.stop()

    def test_concurrent_connections(self):
        def handler(conn):
            while True:
                frame = conn.recv()
                if frame is None:
                    return
                conn.send({"type": "OK", "tag": frame.get("tag")})

        server = FrameServer("127.0.0.1:0", handler)
        server.start()
        results = []

        def client(tag):
            conn = Connection.open_endpoint(server.endpoint)
            results.append(conn.rpc({"type": "T", "tag": tag})["tag"])
            conn.close()

        try:
            threads = [threading.Thread(target=client, args=(i,)) for i in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert sorted(results) == list(range(8))
        finally:
            server.stop()

    def test_error_frame_raises_in_rpc(self):
        def handler(conn):
            frame = conn.recv()
            if frame is not None:
                conn.send({"type": "ERROR", "code": "NOPE", "msg": "refused"})

        server = FrameServer("127.0.0.1:0", handler)
        server.start()
        try:
            conn = Connection.open_endpoint(server.endpoint)
            with pytest.raises(WireError) as e:
                conn.rpc({"type": "Q"})
            assert e.value.code == "NOPE"
            conn.close()
        finally:
            server.stop()
