"""Frame -> bounding boxes.

Detectors return rows (xmin, ymin, xmax, ymax, conf, cls); the server
applies the confidence threshold and the target-class filter afterwards, so
detectors report everything they see.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ModelError
from .reconstruct import ReconstructedFrame


class BlobDetector:
    """Connected bright regions on the reconstructed frame.

    Pixels brighter than ``threshold`` are grouped with 8-connectivity;
    each component of at least ``min_area`` pixels becomes one box with
    confidence = mean brightness of its pixels and class 0 (single-class
    detector).
    """

    def __init__(self, threshold: float = 0.3, min_area: int = 4):
        if not (0.0 < threshold < 1.0):
            raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
        if min_area < 1:
            raise ConfigError(f"min_area must be >= 1, got {min_area}")
        self.threshold = threshold
        self.min_area = min_area
        self._structure = np.ones((3, 3), dtype=bool)

    def __call__(self, frame: ReconstructedFrame) -> list:
        mask = frame.image > self.threshold
        labels, n = ndimage.label(mask, structure=self._structure)
        boxes = []
        for idx, region in enumerate(ndimage.find_objects(labels)):
            if region is None:
                continue
            ys, xs = region
            # restrict to this component: another blob's bounding box may
            # overlap this slice and would otherwise pollute area/confidence
            patch = labels[region] == idx + 1
            area = int(patch.sum())
            if area < self.min_area:
                continue
            conf = float(frame.image[region][patch].mean())
            # slice stops are exclusive; the box edge sits past the last pixel
            boxes.append((float(xs.start), float(ys.start),
                          float(xs.stop), float(ys.stop), conf, 0))
        boxes.sort(key=lambda b: -b[4])
        return boxes


class YoloV5Detector:
    """Runs an exported single-image detector (TorchScript).

    Expects a module scripted with NMS folded in: ``forward(x)`` over a
    (1, 3, height, width) float32 image in [0, 1] returning an (n, 6)
    tensor of (xmin, ymin, xmax, ymax, conf, cls) rows in pixel units.
    The grayscale frame is replicated to three channels.
    """

    def __init__(self, path, device: str = "cpu"):
        try:
            import torch
        except ImportError:
            raise ConfigError("the yolov5 detector needs the optional torch "
                              "dependency") from None
        self._torch = torch
        self.device = device
        try:
            self.module = torch.jit.load(str(path), map_location=device).eval()
        except (OSError, RuntimeError, ValueError) as exc:
            raise ConfigError(f"cannot load detector module {path}: {exc}") from None

    def __call__(self, frame: ReconstructedFrame) -> list:
        torch = self._torch
        x = torch.from_numpy(np.ascontiguousarray(frame.image, dtype=np.float32))
        x = x.unsqueeze(0).expand(3, -1, -1).unsqueeze(0).to(self.device)
        try:
            with torch.no_grad():
                out = self.module(x)
        except RuntimeError as exc:
            raise ModelError(f"detection failed on window {frame.k}: {exc}") from None
        rows = np.asarray(out.detach().cpu().numpy(), dtype=np.float64)
        if rows.ndim != 2 or (rows.size and rows.shape[1] != 6):
            raise ModelError(f"detector output must be (n, 6), got {rows.shape}")
        return [(float(r[0]), float(r[1]), float(r[2]), float(r[3]),
                 float(r[4]), int(r[5])) for r in rows]


def build_detector(kind: str, model_path=None, device: str = "cpu",
                   threshold: float = 0.3, min_area: int = 4):
    if kind == "blob":
        return BlobDetector(threshold=threshold, min_area=min_area)
    if kind == "yolov5":
        if model_path is None:
            raise ConfigError("the yolov5 detector needs --detector-model")
        return YoloV5Detector(model_path, device)
    raise ConfigError(f"unknown detector {kind!r}")
