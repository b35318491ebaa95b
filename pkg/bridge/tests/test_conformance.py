"""Service-level acceptance: one test per clause of the integration
criterion.

* soak: an independent Python client runs 10^4 ordered request/response
  cycles against the scripted mock with zero ordering violations;
* frame dumps: ``dump_frames`` emits one geometry-consistent PNG per window;
* detection: the torch backends report the moving synthetic target with the
  configured class (real checkpoints slot in through EVBRIDGE_RECON_PT /
  EVBRIDGE_DET_PT, exercised in test_torch_models).
"""

import time

import pytest
from PIL import Image

from evbridge import BackendConfig
from evbridge.server import _ModelBackend, mock_serve

from wireclient import (MiniClient, cluster, detect, hello, run_session,
                        script_leaky_recon, script_peak_detector)


def test_soak_ten_thousand_ordered_cycles_with_zero_violations():
    box = {"xmin": 4.0, "ymin": 5.0, "xmax": 9.0, "ymax": 11.0,
           "conf": 0.75, "cls": 0}
    server = mock_serve([[[4.0, 5.0, 9.0, 11.0, 0.75, 0]]],
                        ("127.0.0.1", 0), bins=5)
    cycles = 10_000
    try:
        with MiniClient(server.address, timeout=30.0) as client:
            assert client.ask(hello())["type"] == "ready"
            started = time.monotonic()
            violations = 0
            for k in range(cycles):
                reply = client.ask(detect(k, 1e-3 * (k + 1),
                                          [[1e-3 * k, 3, 4, 1],
                                           [1e-3 * (k + 0.5), 5, 6, -1]]))
                if (reply.get("type") != "detections" or reply.get("k") != k
                        or reply.get("boxes") != [box]):
                    violations += 1
            elapsed = time.monotonic() - started
        server.serve_count(1, timeout=10.0)
    finally:
        server.stop()
    assert violations == 0
    stats = server.sessions[0]
    assert stats.requests == cycles and stats.detections_sent == cycles
    assert stats.errors == []
    assert elapsed < 60.0, f"soak too slow: {elapsed:.1f}s for {cycles} cycles"


def test_dump_frames_emit_geometry_consistent_pngs(tmp_path):
    backend = _ModelBackend(BackendConfig(dump_frames=str(tmp_path)))
    msgs = [hello(width=40, height=30)]
    msgs += [detect(k, 0.05 * (k + 1), cluster(n=25, x=3 * k + 1, y=2 * k))
             for k in range(5)]
    replies, stats = run_session(msgs, backend)
    assert stats.detections_sent == 5
    files = sorted(tmp_path.glob("frame_*.png"),
                   key=lambda f: int(f.stem.split("_")[1]))
    assert [f.name for f in files] == [f"frame_{k}.png" for k in range(5)]
    for f in files:
        with Image.open(f) as img:
            assert img.size == (40, 30)    # PIL reports (width, height)
            assert img.mode == "L"


def test_synthetic_sequence_yields_correct_class_detections(tmp_path):
    pytest.importorskip("torch")
    backend = _ModelBackend(BackendConfig(
        reconstructor="torchscript",
        model_path=str(script_leaky_recon(tmp_path / "recon.pt")),
        detector="yolov5",
        detector_model=str(script_peak_detector(tmp_path / "det.pt")),
        target_classes=(0,), confidence=0.2))
    msgs = [hello()]
    msgs += [detect(k, 0.02 * (k + 1),
                    cluster(n=40, x=4 + k, y=6, t0=0.02 * k, dt=4e-4))
             for k in range(20)]
    replies, stats = run_session(msgs, backend)
    assert stats.errors == []
    hits = [r for r in replies[1:] if r["boxes"]]
    assert len(hits) >= 1
    assert all(b["cls"] == 0 for r in hits for b in r["boxes"])
