"""Small synthetic images and annotations for demos and tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .masks import BinaryMask, rle_encode
from .render import save_png
from .sa1b import Annotation, ImageEntry, entry_to_json

NESTED_BOXES = ((8, 6, 88, 58), (20, 14, 64, 50), (30, 22, 50, 42))


def gradient_image(width: int, height: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    img = np.stack([xx * 255 // max(width - 1, 1), yy * 255 // max(height - 1, 1), (xx + yy) % 256], axis=-1)
    noise = rng.integers(0, 16, size=img.shape)
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def entry_from_masks(image_id: str, masks: list[BinaryMask], file_name: str = "") -> ImageEntry:
    if not masks:
        raise ValueError("need at least one mask to infer the image size")
    h, w = masks[0].shape
    anns = [Annotation(i + 1, rle_encode(m), int(m.bits.sum())) for i, m in enumerate(masks)]
    return ImageEntry(image_id, w, h, file_name, anns)


def nested_fixture(image_id: str = "nested", width: int = 96, height: int = 64):
    """Three strictly nested boxes over a textured background: (entry, image)."""
    masks = [BinaryMask.from_box(width, height, *box) for box in NESTED_BOXES]
    img = gradient_image(width, height)
    for k, (x0, y0, x1, y1) in enumerate(NESTED_BOXES):
        img[y0:y1, x0:x1] = (60 + 60 * k, 200 - 50 * k, 40 * k)
    return entry_from_masks(image_id, masks, f"{image_id}.png"), img


def twin_fixture(n: int = 3, image_id: str = "twins", size: int = 20, gap: int = 6):
    """``n`` identical squares in a row inside one container box."""
    width = gap + n * (size + gap)
    height = size + 2 * gap + 8
    img = gradient_image(width, height, seed=1)
    container = BinaryMask.from_box(width, height, 1, 1, width - 1, height - 1)
    masks = [container]
    for k in range(n):
        x0 = gap + k * (size + gap)
        y0 = gap + 4
        img[y0 : y0 + size, x0 : x0 + size] = (220, 40, 40)
        img[y0 + size // 3 : y0 + 2 * size // 3, x0 + size // 3 : x0 + 2 * size // 3] = (250, 250, 250)
        masks.append(BinaryMask.from_box(width, height, x0, y0, x0 + size, y0 + size))
        masks.append(BinaryMask.from_box(width, height, x0 + size // 3, y0 + size // 3, x0 + 2 * size // 3, y0 + 2 * size // 3))
    return entry_from_masks(image_id, masks, f"{image_id}.png"), img


def random_boxes(rng: np.random.Generator, width: int, height: int, n: int) -> list[BinaryMask]:
    out = []
    for _ in range(n):
        x0, x1 = sorted(rng.integers(0, width + 1, size=2))
        y0, y1 = sorted(rng.integers(0, height + 1, size=2))
        out.append(BinaryMask.from_box(width, height, int(x0), int(y0), int(max(x1, x0 + 1)), int(max(y1, y0 + 1))))
    return out


def write_fixture(entry: ImageEntry, img: np.ndarray, directory: str | Path) -> Path:
    """Write ``<id>.json`` and the image next to it; returns the JSON path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_png(img, d / entry.file_name)
    path = d / f"{entry.image_id}.json"
    path.write_text(json.dumps(entry_to_json(entry)), encoding="utf-8")
    return path
