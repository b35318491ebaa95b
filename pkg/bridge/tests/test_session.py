"""Session semantics: handshake gating, ordered replies, fault tolerance,
per-session recurrent state, and the TCP transport around it all."""

import io
import os

import pytest
from PIL import Image

from evbridge import BackendConfig, BridgeServer, ModelError
from evbridge.server import _ModelBackend, _session, mock_serve

from wireclient import MiniClient, canonical, cluster, detect, hello, run_session


def test_handshake_then_ready_names_the_backend():
    replies, stats = run_session([hello()])
    assert replies == [{"type": "ready", "backend": "accumulator+blob"}]
    assert stats.geometry == (32, 24) and not stats.refused


def test_backend_name_override_shows_up_in_ready():
    backend = _ModelBackend(BackendConfig(backend_name="e2vid+yolov5s"))
    replies, _ = run_session([hello()], backend)
    assert replies[0]["backend"] == "e2vid+yolov5s"


def test_version_mismatch_is_refused():
    replies, stats = run_session([hello(version=2), detect(0, 0.1, [])])
    assert len(replies) == 1 and replies[0]["type"] == "error"
    assert stats.refused and stats.requests == 0


def test_bins_mismatch_is_refused_with_an_explanation():
    replies, stats = run_session([hello(bins=3)])
    assert replies[0]["type"] == "error"
    assert "bins" in replies[0]["message"]
    assert stats.refused


def test_detect_before_hello_is_refused():
    replies, stats = run_session([detect(0, 0.1, [])])
    assert replies[0]["type"] == "error" and stats.refused


def test_empty_events_yield_empty_boxes():
    replies, _ = run_session([hello(), detect(0, 0.1, [])])
    assert replies[1] == {"type": "detections", "k": 0, "boxes": []}


def test_cluster_yields_boxes_with_the_exact_wire_fields():
    replies, _ = run_session([hello(), detect(0, 0.05, cluster())])
    boxes = replies[1]["boxes"]
    assert len(boxes) >= 1
    assert set(boxes[0]) == {"xmin", "ymin", "xmax", "ymax", "conf", "cls"}
    assert boxes[0]["cls"] == 0


def test_out_of_order_k_is_an_error_but_the_session_survives():
    replies, stats = run_session([
        hello(),
        detect(0, 0.05, cluster()),
        detect(0, 0.10, cluster()),   # repeat: rejected
        detect(1, 0.15, cluster()),   # still answered
    ])
    assert [r["type"] for r in replies[1:]] == ["detections", "error",
                                                "detections"]
    assert replies[2]["k"] == 0
    assert replies[3]["k"] == 1
    assert stats.requests == 3 and stats.detections_sent == 2
    assert len(stats.errors) == 1


def test_rejected_request_does_not_advance_the_k_cursor():
    replies, _ = run_session([
        hello(),
        detect(0, 0.05, []),
        detect(5, 0.10, [[0.2, 99, 0, 1]]),   # out of bounds: rejected
        detect(1, 0.15, []),                  # 1 > 0 still holds
    ])
    assert [r["type"] for r in replies[1:]] == ["detections", "error",
                                                "detections"]


def test_malformed_json_line_keeps_the_connection_alive():
    replies, stats = run_session([
        hello(),
        detect(0, 0.05, []),
        b"{broken\n",
        detect(1, 0.10, []),
    ])
    assert [r["type"] for r in replies[1:]] == ["detections", "error",
                                                "detections"]
    assert replies[2]["k"] == -1
    assert stats.requests == 3


def test_backend_failure_answers_an_error_and_keeps_going():
    class Flaky:
        cfg = BackendConfig()

        def new_session(self, width, height):
            return None

        def handle(self, recon, width, height, k, t_end, events):
            if k == 1:
                raise ModelError("inference exploded")
            return []

    replies, stats = run_session(
        [hello(), detect(0, 0.1, []), detect(1, 0.2, []), detect(2, 0.3, [])],
        backend=Flaky())
    assert [r["type"] for r in replies[1:]] == ["detections", "error",
                                                "detections"]
    assert replies[2] == {"type": "error", "k": 1,
                          "message": "inference exploded"}
    assert stats.detections_sent == 2 and len(stats.errors) == 1


def test_session_replay_is_byte_deterministic():
    payload = [hello()]
    for k in range(6):
        payload.append(detect(k, 0.05 * (k + 1),
                              cluster(n=10 + 3 * k, x=2 * k, y=k)))
    raw = b"".join(canonical(m) for m in payload)
    outs = []
    for _ in range(2):
        wfile = io.BytesIO()
        _session(io.BytesIO(raw), wfile, _ModelBackend(BackendConfig()))
        outs.append(wfile.getvalue())
    assert outs[0] == outs[1]


def test_recurrent_state_makes_identical_windows_differ_within_a_session():
    window = cluster(n=30, x=10, y=8)
    fresh, _ = run_session([hello(), detect(0, 0.05, window)])
    primed = [hello()] + [detect(k, 0.05 * (k + 1), cluster(n=30, x=10, y=8))
                          for k in range(9)] + [detect(9, 0.5, window)]
    warmed, _ = run_session(primed)
    conf_fresh = fresh[1]["boxes"][0]["conf"]
    conf_warmed = warmed[-1]["boxes"][0]["conf"]
    assert conf_warmed > conf_fresh


def test_dump_frames_writes_one_png_per_window(tmp_path):
    outdir = tmp_path / "frames"
    backend = _ModelBackend(BackendConfig(dump_frames=str(outdir)))
    run_session([hello(), detect(0, 0.05, cluster()), detect(1, 0.1, []),
                 detect(5, 0.2, cluster(x=2, y=2))], backend)
    names = sorted(os.listdir(outdir))
    assert names == ["frame_0.png", "frame_1.png", "frame_5.png"]
    with Image.open(outdir / "frame_0.png") as img:
        assert img.size == (32, 24)    # (width, height)
        assert img.mode == "L"


def test_tcp_round_trip_and_session_stats():
    server = BridgeServer(_ModelBackend(BackendConfig()))
    addr = server.start()
    try:
        with MiniClient(addr) as client:
            assert client.ask(hello())["type"] == "ready"
            for k in range(3):
                reply = client.ask(detect(k, 0.05 * (k + 1), cluster()))
                assert reply["type"] == "detections" and reply["k"] == k
        server.serve_count(1, timeout=10.0)
    finally:
        server.stop()
    assert len(server.sessions) == 1
    stats = server.sessions[0]
    assert stats.requests == 3 and stats.detections_sent == 3
    assert stats.errors == [] and not stats.refused


def test_new_handshake_resets_recurrent_state():
    server = BridgeServer(_ModelBackend(BackendConfig()))
    addr = server.start()
    try:
        replies = []
        for _ in range(2):
            with MiniClient(addr) as client:
                client.ask(hello())
                replies.append(client.ask(detect(0, 0.05, cluster())))
        server.serve_count(2, timeout=10.0)
    finally:
        server.stop()
    assert replies[0] == replies[1]


def test_pending_connection_is_served_after_the_first_closes():
    server = BridgeServer(_ModelBackend(BackendConfig()))
    addr = server.start()
    try:
        first = MiniClient(addr)
        assert first.ask(hello())["type"] == "ready"
        second = MiniClient(addr, timeout=10.0)
        second.send(hello())           # queued while the first session runs
        first.close()
        assert second.recv()["type"] == "ready"
        second.close()
        server.serve_count(2, timeout=10.0)
    finally:
        server.stop()
    assert len(server.sessions) == 2


def test_mock_replays_in_order_and_repeats_the_last_response():
    box_a = [1.0, 2.0, 5.0, 6.0, 0.9, 0]
    box_b = [3.0, 3.0, 8.0, 9.0, 0.5, 2]
    server = mock_serve([[box_a], [box_b]], ("127.0.0.1", 0))
    try:
        with MiniClient(server.address) as client:
            assert client.ask(hello())["backend"] == "mock"
            first = client.ask(detect(0, 0.1, []))["boxes"]
            second = client.ask(detect(1, 0.2, []))["boxes"]
            third = client.ask(detect(2, 0.3, []))["boxes"]
        assert first == [{"xmin": 1.0, "ymin": 2.0, "xmax": 5.0, "ymax": 6.0,
                          "conf": 0.9, "cls": 0}]
        assert second[0]["cls"] == 2
        assert third == second     # repeats the final configured reply
    finally:
        server.stop()


def test_mock_scripted_error_entry_answers_an_error():
    server = mock_serve([[[0, 0, 1, 1, 1.0, 0]], "error"], ("127.0.0.1", 0))
    try:
        with MiniClient(server.address) as client:
            client.ask(hello())
            assert client.ask(detect(0, 0.1, []))["type"] == "detections"
            err = client.ask(detect(1, 0.2, []))
            assert err["type"] == "error" and err["k"] == 1
            # scripted failures are recoverable, like real model failures
            assert client.ask(detect(2, 0.3, []))["type"] == "error"
    finally:
        server.stop()


def test_mock_validates_schema_strictly():
    server = mock_serve([[[0, 0, 1, 1, 1.0, 0]]], ("127.0.0.1", 0))
    try:
        with MiniClient(server.address) as client:
            client.ask(hello())
            bad = client.ask({"type": "detect", "k": 0, "t_end": 0.1,
                              "events": [[0.05, 4, 4, 0]]})
            assert bad["type"] == "error" and "polarity" in bad["message"]
            ok = client.ask(detect(0, 0.1, [[0.05, 4, 4, 1]]))
            assert ok["type"] == "detections"
    finally:
        server.stop()


def test_mock_without_a_bin_count_accepts_any_handshake():
    lenient = mock_serve([[]], ("127.0.0.1", 0))
    try:
        with MiniClient(lenient.address) as client:
            assert client.ask(hello(bins=9))["type"] == "ready"
    finally:
        lenient.stop()
    strict = mock_serve([[]], ("127.0.0.1", 0), bins=5)
    try:
        with MiniClient(strict.address) as client:
            assert client.ask(hello(bins=9))["type"] == "error"
    finally:
        strict.stop()
