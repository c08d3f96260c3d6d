"""Prompt images for the annotation stages.

Images are ``(height, width, 3)`` uint8 numpy arrays. Every function returns a
new array and leaves its input untouched.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DimensionMismatchError, EmptyRegionError, MalformedInputError
from .masks import BinaryMask, area, bounding_box, containment

Color = tuple[int, int, int]

TARGET_YELLOW: Color = (255, 255, 0)
TARGET_BLUE: Color = (0, 0, 255)
# indices 1..k cycle through these; none equals the two target colors
PALETTE: tuple[Color, ...] = (
    (255, 0, 0),
    (0, 200, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
    (128, 0, 255),
    (255, 255, 255),
    (0, 128, 128),
)

DEFAULT_SIGMA = 8.0
DEFAULT_MARGIN = 0.1


@dataclass(frozen=True)
class RenderParams:
    sigma: float = DEFAULT_SIGMA
    thickness: int | None = None  # None -> default_thickness(image)
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if self.sigma <= 0:
            raise MalformedInputError(f"render.sigma must be > 0, got {self.sigma}")
        if self.thickness is not None and self.thickness < 1:
            raise MalformedInputError(f"render.thickness must be >= 1, got {self.thickness}")
        if self.margin < 0:
            raise MalformedInputError(f"render.margin must be >= 0, got {self.margin}")


def default_thickness(width: int, height: int) -> int:
    return max(2, math.ceil(0.004 * max(width, height)))


def as_image(pixels) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise MalformedInputError(f"expected an (H, W, 3) RGB array, got shape {arr.shape}")
    return arr.astype(np.uint8, copy=False)


def _check_dims(img: np.ndarray, mask: BinaryMask) -> None:
    if img.shape[:2] != mask.shape:
        raise DimensionMismatchError(
            f"image is {img.shape[1]}x{img.shape[0]} but mask is {mask.width}x{mask.height}"
        )


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(data: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = kernel.size // 2
    pad = [(0, 0)] * data.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(data, pad, mode="edge")
    n = data.shape[axis]
    out = np.zeros_like(data)
    for k, wgt in enumerate(kernel):
        out += wgt * np.take(padded, np.arange(k, k + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3*sigma), clamped edges."""
    kernel = gaussian_kernel(sigma)
    data = img.astype(np.float64)
    data = _convolve_axis(data, kernel, 0)
    data = _convolve_axis(data, kernel, 1)
    return np.clip(np.rint(data), 0, 255).astype(np.uint8)


def blur_outside(img, mask: BinaryMask, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    img = as_image(img)
    _check_dims(img, mask)
    if sigma <= 0:
        raise MalformedInputError(f"sigma must be > 0, got {sigma}")
    if mask.bits.all():
        return img.copy()
    out = gaussian_blur(img, sigma)
    out[mask.bits] = img[mask.bits]
    return out


def _erode4(bits: np.ndarray) -> np.ndarray:
    """4-neighbour erosion with everything outside the frame counted as unset."""
    out = bits.copy()
    out[1:, :] &= bits[:-1, :]
    out[:-1, :] &= bits[1:, :]
    out[:, 1:] &= bits[:, :-1]
    out[:, :-1] &= bits[:, 1:]
    out[0, :] = False
    out[-1, :] = False
    out[:, 0] = False
    out[:, -1] = False
    return out


def contour_band(mask: BinaryMask, thickness: int = 1) -> np.ndarray:
    """Set pixels within ``thickness`` 4-steps of an unset or out-of-frame pixel."""
    if thickness < 1:
        raise MalformedInputError(f"thickness must be >= 1, got {thickness}")
    inner = mask.bits
    for _ in range(thickness):
        inner = _erode4(inner)
        if not inner.any():
            break
    return mask.bits & ~inner


def draw_contour(img, mask: BinaryMask, color: Color, thickness: int = 1) -> np.ndarray:
    img = as_image(img)
    _check_dims(img, mask)
    if area(mask) == 0:
        raise EmptyRegionError("cannot draw the contour of an empty mask")
    out = img.copy()
    out[contour_band(mask, thickness)] = color
    return out


def crop_box(mask: BinaryMask, margin_frac: float) -> tuple[int, int, int, int]:
    if margin_frac < 0:
        raise MalformedInputError(f"margin_frac must be >= 0, got {margin_frac}")
    box = bounding_box(mask)
    margin = math.floor(margin_frac * max(box.width, box.height) + 0.5)
    return (
        max(0, box.x0 - margin),
        max(0, box.y0 - margin),
        min(mask.width, box.x1 + margin),
        min(mask.height, box.y1 + margin),
    )


def crop_to_region(img, mask: BinaryMask, margin_frac: float = DEFAULT_MARGIN) -> np.ndarray:
    img = as_image(img)
    _check_dims(img, mask)
    x0, y0, x1, y1 = crop_box(mask, margin_frac)
    return img[y0:y1, x0:x1].copy()


def render_stage2_views(
    img,
    target: BinaryMask,
    parent: BinaryMask,
    params: RenderParams | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (isolated target crop, target-in-parent context crop)."""
    params = params or RenderParams()
    img = as_image(img)
    _check_dims(img, target)
    _check_dims(img, parent)
    if area(target) == 0 or area(parent) == 0:
        raise EmptyRegionError("stage-2 views need non-empty target and parent masks")
    if containment(target, parent) == 0:
        raise MalformedInputError("target and parent masks are disjoint")
    thickness = params.thickness or default_thickness(target.width, target.height)
    view1 = crop_to_region(blur_outside(img, target, params.sigma), target, params.margin)
    # keep the target and everything outside the parent; blur the rest of the parent
    keep = target | ~parent
    context = draw_contour(blur_outside(img, keep, params.sigma), target, TARGET_YELLOW, thickness)
    view2 = crop_to_region(context, parent, params.margin)
    return view1, view2


def render_stage3_view(img, target: BinaryMask, params: RenderParams | None = None) -> np.ndarray:
    params = params or RenderParams()
    img = as_image(img)
    thickness = params.thickness or default_thickness(target.width, target.height)
    return draw_contour(img, target, TARGET_YELLOW, thickness)


# 5x7 bitmaps, one string per row, '#' = ink
_DIGITS = {
    "0": (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    "1": ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    "2": (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    "3": ("#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "),
    "4": ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    "5": ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    "6": ("  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "),
    "7": ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    "8": (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    "9": (" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "),
}
GLYPH_W, GLYPH_H = 5, 7


def glyph(ch: str) -> np.ndarray:
    rows = _DIGITS[ch]
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


def text_bitmap(text: str, scale: int = 1) -> np.ndarray:
    """Digits side by side with one blank column between glyphs."""
    parts = []
    for i, ch in enumerate(text):
        if i:
            parts.append(np.zeros((GLYPH_H, 1), dtype=bool))
        parts.append(glyph(ch))
    bitmap = np.concatenate(parts, axis=1)
    return np.kron(bitmap, np.ones((scale, scale), dtype=bool)).astype(bool)


def label_scale(width: int, height: int) -> int:
    return max(1, round(max(width, height) / 400))


def draw_label(img: np.ndarray, text: str, cx: int, cy: int, color: Color, scale: int = 1) -> np.ndarray:
    """Paint ``text`` centred on (cx, cy), clipped to the frame. Mutates ``img``."""
    bm = text_bitmap(text, scale)
    h, w = bm.shape
    y0, x0 = cy - h // 2, cx - w // 2
    H, W = img.shape[:2]
    ys, xs = np.nonzero(bm)
    ys, xs = ys + y0, xs + x0
    ok = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
    img[ys[ok], xs[ok]] = color
    return img


def box_outline(mask: BinaryMask) -> np.ndarray:
    box = bounding_box(mask)
    out = np.zeros(mask.shape, dtype=bool)
    out[box.y0, box.x0:box.x1] = True
    out[box.y1 - 1, box.x0:box.x1] = True
    out[box.y0:box.y1, box.x0] = True
    out[box.y0:box.y1, box.x1 - 1] = True
    return out


def box_center(mask: BinaryMask) -> tuple[int, int]:
    box = bounding_box(mask)
    return (box.x0 + box.x1) // 2, (box.y0 + box.y1) // 2


def mark_color(index: int) -> Color:
    return TARGET_BLUE if index == 0 else PALETTE[(index - 1) % len(PALETTE)]


def render_set_of_mark(
    img,
    group: Sequence[BinaryMask],
    params: RenderParams | None = None,
) -> np.ndarray:
    """Contour, box and index label for each member; member 0 is the target.

    Members are painted in index order, so later marks cover earlier ones.
    """
    params = params or RenderParams()
    img = as_image(img)
    if not group:
        raise MalformedInputError("set-of-mark group is empty")
    for i, m in enumerate(group):
        _check_dims(img, m)
        if area(m) == 0:
            raise EmptyRegionError(f"set-of-mark member {i} is empty")
    H, W = img.shape[:2]
    thickness = params.thickness or default_thickness(W, H)
    scale = label_scale(W, H)
    out = img.copy()
    for i, m in enumerate(group):
        color = mark_color(i)
        out[contour_band(m, thickness)] = color
        out[box_outline(m)] = color
        cx, cy = box_center(m)
        draw_label(out, str(i), cx, cy, color, scale)
    return out


def to_png(img) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(as_image(img))).save(buf, format="PNG")
    return buf.getvalue()


def save_png(img, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_png(img))


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
