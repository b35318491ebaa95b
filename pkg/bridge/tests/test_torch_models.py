"""Torchscript backends exercised with small synthetic exports.

Real event-to-video / detector checkpoints are heavyweight downloads, so
these tests script tiny modules honoring the same contracts; checkpoint
paths can be supplied via EVBRIDGE_RECON_PT / EVBRIDGE_DET_PT to run the
same assertions against the real thing.
"""

import os
from typing import Optional, Tuple

import numpy as np
import pytest

torch = pytest.importorskip("torch")

from evbridge import (BackendConfig, ConfigError, ModelError,
                      TorchscriptReconstructor, YoloV5Detector)
from evbridge.reconstruct import ReconstructedFrame
from evbridge.server import _ModelBackend
from evbridge.tensorize import voxel_grid

from wireclient import (cluster, detect, hello, run_session,
                        script_leaky_recon, script_peak_detector)


@pytest.fixture(scope="module")
def recon_path(tmp_path_factory):
    return script_leaky_recon(tmp_path_factory.mktemp("models") / "recon.pt")


@pytest.fixture(scope="module")
def det_path(tmp_path_factory):
    return script_peak_detector(tmp_path_factory.mktemp("models") / "det.pt")


def _grid(events, t_end=0.05, width=24, height=18):
    return voxel_grid(events, t_end, width, height, 5)


def test_torchscript_reconstructor_shape_range_and_state(recon_path):
    recon = TorchscriptReconstructor(recon_path)
    grid = _grid(cluster(n=20, x=6, y=5))
    first = recon(grid, 0, 0.05)
    assert first.shape == (18, 24)
    assert first.image.min() >= 0.0 and first.image.max() <= 1.0
    second = recon(grid, 1, 0.10)
    active = first.image > 0
    assert np.all(second.image[active] > first.image[active])
    recon.reset()
    assert np.array_equal(recon(grid, 0, 0.05).image, first.image)


def test_torchscript_output_is_clamped(recon_path, tmp_path):
    class Hot(torch.nn.Module):
        def forward(self, x: torch.Tensor, state: Optional[torch.Tensor]
                    ) -> Tuple[torch.Tensor, torch.Tensor]:
            s = 100.0 * x.abs().sum(dim=1) - 5.0
            return s[0], s

    path = tmp_path / "hot.pt"
    torch.jit.save(torch.jit.script(Hot()), str(path))
    recon = TorchscriptReconstructor(path)
    frame = recon(_grid(cluster()), 0, 0.05)
    assert frame.image.min() >= 0.0 and frame.image.max() <= 1.0


def test_unloadable_reconstruction_model_fails_at_construction(tmp_path):
    with pytest.raises(ConfigError):
        TorchscriptReconstructor(tmp_path / "missing.pt")
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"not a torchscript archive")
    with pytest.raises(ConfigError):
        TorchscriptReconstructor(junk)


def test_peak_detector_boxes_the_brightest_pixel(det_path):
    img = np.zeros((18, 24))
    img[5, 7] = 0.9
    det = YoloV5Detector(det_path)
    boxes = det(ReconstructedFrame(image=img, k=0, t_end=0.0))
    assert len(boxes) == 1
    xmin, ymin, xmax, ymax, conf, cls = boxes[0]
    assert (xmin, ymin, xmax, ymax) == (5.0, 3.0, 10.0, 8.0)
    assert conf == pytest.approx(0.9, abs=1e-6)   # float32 round trip
    assert cls == 0 and isinstance(cls, int)


def test_peak_detector_reports_nothing_on_a_dark_frame(det_path):
    det = YoloV5Detector(det_path)
    assert det(ReconstructedFrame(image=np.zeros((18, 24)), k=0,
                                  t_end=0.0)) == []


def test_detector_output_shape_is_validated(tmp_path):
    class Wrong(torch.nn.Module):
        def forward(self, x: torch.Tensor) -> torch.Tensor:
            return torch.zeros((2, 5))

    path = tmp_path / "wrong.pt"
    torch.jit.save(torch.jit.script(Wrong()), str(path))
    det = YoloV5Detector(path)
    with pytest.raises(ModelError):
        det(ReconstructedFrame(image=np.zeros((8, 8)), k=0, t_end=0.0))


def test_full_torch_service_session(recon_path, det_path):
    backend = _ModelBackend(BackendConfig(
        reconstructor="torchscript", model_path=str(recon_path),
        detector="yolov5", detector_model=str(det_path), confidence=0.1))
    msgs = [hello(width=24, height=18)]
    msgs += [detect(k, 0.05 * (k + 1), cluster(n=25, x=6 + k, y=5))
             for k in range(4)]
    replies, stats = run_session(msgs, backend)
    assert replies[0]["backend"] == "torchscript+yolov5"
    assert all(r["type"] == "detections" for r in replies[1:])
    assert all(len(r["boxes"]) == 1 for r in replies[1:])
    # the box follows the moving cluster
    xs = [r["boxes"][0]["xmin"] for r in replies[1:]]
    assert xs == sorted(xs) and xs[0] < xs[-1]
    assert stats.detections_sent == 4


def test_wrong_geometry_from_the_model_is_a_recoverable_error(tmp_path,
                                                              det_path):
    class Fixed(torch.nn.Module):
        def forward(self, x: torch.Tensor, state: Optional[torch.Tensor]
                    ) -> Tuple[torch.Tensor, torch.Tensor]:
            out = torch.zeros((6, 6))
            return out, out

    path = tmp_path / "fixed.pt"
    torch.jit.save(torch.jit.script(Fixed()), str(path))
    backend = _ModelBackend(BackendConfig(
        reconstructor="torchscript", model_path=str(path),
        detector="yolov5", detector_model=str(det_path)))
    # the model always emits 6x6, the session was negotiated at 24x18
    replies, stats = run_session(
        [hello(width=24, height=18), detect(0, 0.05, cluster()),
         detect(1, 0.1, cluster())], backend)
    assert [r["type"] for r in replies] == ["ready", "error", "error"]
    assert "geometry" in replies[1]["message"]
    assert len(stats.errors) == 2 and stats.detections_sent == 0


@pytest.mark.skipif(not (os.environ.get("EVBRIDGE_RECON_PT")
                         and os.environ.get("EVBRIDGE_DET_PT")),
                    reason="real checkpoint paths not provided")
def test_real_checkpoints_smoke():
    backend = _ModelBackend(BackendConfig(
        reconstructor="torchscript",
        model_path=os.environ["EVBRIDGE_RECON_PT"],
        detector="yolov5",
        detector_model=os.environ["EVBRIDGE_DET_PT"]))
    replies, _ = run_session(
        [hello(width=240, height=180),
         detect(0, 0.05, cluster(n=400, x=100, y=80, spread=12))], backend)
    assert replies[1]["type"] in ("detections", "error")
