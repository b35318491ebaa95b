"""Voxel grid -> grayscale frame reconstruction.

Two engines share one interface: call with ``(grid, k, t_end)``, get a
:class:`ReconstructedFrame`; ``reset()`` clears the recurrent state (the
server calls it on every new handshake, so sessions are deterministic from
their first window but two sessions with different histories need not agree
on a shared window).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ModelError


@dataclass(frozen=True)
class ReconstructedFrame:
    """Grayscale image in [0, 1] for window k ending at t_end."""

    image: np.ndarray
    k: int
    t_end: float

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 2:
            raise ModelError(f"frame must be 2-D, got shape {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ModelError("frame values left [0, 1]")
        img.flags.writeable = False
        object.__setattr__(self, "image", img)

    @property
    def shape(self):
        return self.image.shape


class AccumulatorReconstructor:
    """Dependency-free recurrent reconstructor: a leaky event integrator.

    The canvas accumulates net polarity per pixel with exponential decay per
    window, then squashes through tanh around mid-gray.  Crude next to a
    learned network, but it is stateful, bounded, deterministic, and bright
    exactly where events happen - enough to drive a detector and to exercise
    every server path without model files.
    """

    def __init__(self, width: int, height: int, decay: float = 0.6,
                 gain: float = 0.35):
        if not (0.0 <= decay < 1.0):
            raise ConfigError(f"decay must be in [0, 1), got {decay}")
        if gain <= 0:
            raise ConfigError(f"gain must be > 0, got {gain}")
        self.decay = decay
        self.gain = gain
        self._canvas = np.zeros((height, width))

    def reset(self):
        self._canvas[:] = 0.0

    def __call__(self, grid: np.ndarray, k: int, t_end: float) -> ReconstructedFrame:
        self._canvas *= self.decay
        self._canvas += self.gain * np.abs(grid).sum(axis=0)
        image = np.tanh(self._canvas)   # canvas >= 0, so image is in [0, 1)
        return ReconstructedFrame(image=image, k=k, t_end=t_end)


class TorchscriptReconstructor:
    """Runs an exported recurrent reconstruction module (TorchScript).

    The module contract is ``forward(x, state) -> (frame, state)`` with
    ``x`` of shape (1, bins, height, width) float32, ``state`` an arbitrary
    tensor or None on the first window, and ``frame`` broadcastable to
    (height, width).  Event-to-video exports (E2VID-family checkpoints
    scripted with that signature) plug in directly; outputs are clamped to
    [0, 1].
    """

    def __init__(self, path, device: str = "cpu"):
        try:
            import torch
        except ImportError:
            raise ConfigError("torchscript reconstruction needs the optional "
                              "torch dependency") from None
        self._torch = torch
        self.device = device
        try:
            self.module = torch.jit.load(str(path), map_location=device).eval()
        except (OSError, RuntimeError, ValueError) as exc:
            raise ConfigError(f"cannot load torchscript module {path}: {exc}") from None
        self._state = None

    def reset(self):
        self._state = None

    def __call__(self, grid: np.ndarray, k: int, t_end: float) -> ReconstructedFrame:
        torch = self._torch
        x = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float32))
        x = x.unsqueeze(0).to(self.device)
        try:
            with torch.no_grad():
                frame, self._state = self.module(x, self._state)
        except RuntimeError as exc:
            raise ModelError(f"reconstruction failed on window {k}: {exc}") from None
        image = frame.detach().squeeze().clamp(0.0, 1.0).cpu().numpy()
        return ReconstructedFrame(image=np.asarray(image, dtype=np.float64),
                                  k=k, t_end=t_end)


def build_reconstructor(kind: str, width: int, height: int, model_path=None,
                        device: str = "cpu"):
    if kind == "accumulator":
        return AccumulatorReconstructor(width, height)
    if kind == "torchscript":
        if model_path is None:
            raise ConfigError("torchscript reconstruction needs --model")
        return TorchscriptReconstructor(model_path, device)
    raise ConfigError(f"unknown reconstructor {kind!r}")
