"""8-bit PNG image I/O with a fixed float convention ([H, W, 3] in [0, 1])."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path: str | Path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got shape {img.shape}")
    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def list_images(directory: str | Path) -> dict[str, Path]:
    """Map file stem -> path for every image in a directory."""
    directory = Path(directory)
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()) if directory.is_dir() else []:
        if p.suffix.lower() in IMAGE_SUFFIXES:
            found[p.stem] = p
    return found
