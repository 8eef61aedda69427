"""PPM/PNG image reading and writing for float images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".ppm")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path, image: np.ndarray):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    Image.fromarray(arr).save(path, format=fmt)


def read_dir(directory) -> np.ndarray:
    """All PNG/PPM images in ``directory``, sorted by file name, stacked to (N, H, W, 3)."""
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no .png or .ppm images in {directory}")
    images = [read_image(p) for p in files]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images in {directory} have differing shapes {sorted(shapes)}")
    return np.stack(images)
