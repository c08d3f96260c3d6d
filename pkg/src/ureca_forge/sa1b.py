"""Reader for SA-1B style per-image annotation JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MalformedInputError
from .masks import BinaryMask, RleMask, rle_decode


@dataclass
class Annotation:
    id: int | str
    rle: RleMask
    area: int | None = None


@dataclass
class ImageEntry:
    image_id: str
    width: int
    height: int
    file_name: str = ""
    annotations: list[Annotation] = field(default_factory=list)
    source: str = ""

    def decode_masks(self) -> list[BinaryMask]:
        masks = []
        for ann in self.annotations:
            try:
                m = rle_decode(ann.rle)
            except MalformedInputError as exc:
                raise MalformedInputError(f"annotation {ann.id}: {exc}") from None
            if (m.width, m.height) != (self.width, self.height):
                raise MalformedInputError(
                    f"annotation {ann.id}: mask is {m.width}x{m.height}, image is {self.width}x{self.height}"
                )
            masks.append(m)
        return masks


def parse_entry(obj: dict, source: str = "") -> ImageEntry:
    try:
        image = obj["image"]
        image_id = str(image["image_id"])
        width, height = int(image["width"]), int(image["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInputError(f"{source or 'input'}: missing or bad image header field {exc}") from None
    anns = []
    for i, raw in enumerate(obj.get("annotations", [])):
        ann_id = raw.get("id", i)
        try:
            rle = RleMask.from_json(raw["segmentation"])
        except KeyError:
            raise MalformedInputError(f"annotation {ann_id}: no 'segmentation'") from None
        except MalformedInputError as exc:
            raise type(exc)(f"annotation {ann_id}: {exc}") from None
        anns.append(Annotation(ann_id, rle, raw.get("area")))
    return ImageEntry(image_id, width, height, image.get("file_name", ""), anns, source)


def load_entry(path: str | Path) -> ImageEntry:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedInputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return parse_entry(obj, str(path))


def entry_to_json(entry: ImageEntry) -> dict:
    return {
        "image": {
            "image_id": entry.image_id,
            "width": entry.width,
            "height": entry.height,
            "file_name": entry.file_name,
        },
        "annotations": [
            {"id": a.id, "segmentation": a.rle.to_json(), "area": a.area} for a in entry.annotations
        ],
    }
