"""Debug output: reconstructed frames as 8-bit grayscale PNGs."""

from __future__ import annotations

import os

from PIL import Image
import numpy as np

from .reconstruct import ReconstructedFrame


def dump_frame(frame: ReconstructedFrame, directory) -> str:
    """Writes ``frame_<k>.png`` into ``directory`` (created on demand)."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"frame_{frame.k}.png")
    img = np.clip(np.rint(frame.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
    return path
