"""PNG/JPEG reading and writing."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import DomainError


def load_image(path) -> np.ndarray:
    """Float RGB in [0, 1]; greyscale and RGBA inputs are converted."""
    with Image.open(path) as im:
        im.load()
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.size == 0:
        raise DomainError(f"{path} is empty")
    return arr


def save_png(path, image: np.ndarray) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(p, format="PNG")
    return p


def contact_sheet(images: Sequence[np.ndarray], labels: Sequence[str], pad: int = 4,
                  label_height: int = 12) -> np.ndarray:
    """Tile equally sized uint8 images left to right with a text strip under each."""
    if not images:
        raise DomainError("contact sheet needs at least one image")
    h, w = images[0].shape[:2]
    sheet = Image.new("RGB", (len(images) * (w + pad) + pad, h + label_height + 2 * pad), "white")
    draw = ImageDraw.Draw(sheet)
    for i, (img, label) in enumerate(zip(images, labels)):
        x = pad + i * (w + pad)
        sheet.paste(Image.fromarray(np.asarray(img, dtype=np.uint8)), (x, pad))
        draw.text((x, h + pad + 1), label, fill="black")
    return np.asarray(sheet)
