"""Dataset export: join trees and caption records into one JSONL line per image."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .masks import RleMask, rle_decode, rle_encode
from .pipeline import STAGES, ImageState
from .tree import MaskTree

log = logging.getLogger(__name__)

REGION_FIELDS = ("node_id", "parent_id", "depth", "rle", "short_caption", "dense_caption", "unique_caption", "status")


@dataclass
class ExportResult:
    lines: int
    warnings: int


def dataset_record(tree: MaskTree, state: ImageState, meta: dict) -> tuple[dict, int]:
    """One dataset line for an image, and the number of incomplete regions."""
    captions = {s: {n: state.final_record(s, n) for n in state.records[s]} for s in STAGES}
    regions, incomplete = [], 0
    for nid in sorted(tree.nodes):
        if nid == tree.root_id:
            continue
        node = tree.nodes[nid]
        texts = {s: (captions[s][nid].text if nid in captions[s] else None) for s in STAGES}
        if texts["dense"] is None:
            status = "incomplete"
            incomplete += 1
        elif nid in captions["unique"]:
            status = captions["unique"][nid].status
        else:
            status = "incomplete"
            incomplete += 1
        regions.append(
            {
                "node_id": nid,
                "parent_id": None if node.parent_id == tree.root_id else node.parent_id,
                "depth": node.depth,
                "rle": rle_encode(tree.mask(nid)).to_json(),
                "short_caption": texts["short"],
                "dense_caption": texts["dense"],
                "unique_caption": texts["unique"],
                "status": status,
            }
        )
    root_caption = captions["unique"].get(tree.root_id) or captions["dense"].get(tree.root_id)
    record = {
        "image_id": tree.image_id,
        "image_path": meta.get("image_path", ""),
        "width": tree.width,
        "height": tree.height,
        "image_caption": root_caption.text if root_caption else None,
        "regions": regions,
    }
    return record, incomplete


def export_workdir(workdir: str | Path, out: str | Path | None = None) -> ExportResult:
    workdir = Path(workdir)
    out = Path(out) if out else workdir / "dataset.jsonl"
    lines, warnings = [], 0
    for d in sorted(p for p in workdir.iterdir() if (p / "tree.json").exists()):
        tree = MaskTree.from_json(json.loads((d / "tree.json").read_text(encoding="utf-8")))
        meta_path = d / "entry.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        state_path = d / "state.json"
        state = ImageState.load(state_path) if state_path.exists() else ImageState(tree.image_id)
        if state.cursor != "done":
            log.warning("image %s: pipeline not finished (at %s)", tree.image_id, state.cursor)
        record, incomplete = dataset_record(tree, state, meta)
        if incomplete:
            log.warning("image %s: %d regions incomplete", tree.image_id, incomplete)
        warnings += incomplete
        lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(ln + "\n" for ln in lines))
    return ExportResult(len(lines), warnings)


def load_dataset(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(ln) for ln in f if ln.strip()]


def validate_record(rec: dict) -> list[str]:
    """Schema problems of one dataset line; empty when valid."""
    errs = []
    for key in ("image_id", "image_path", "width", "height", "regions"):
        if key not in rec:
            errs.append(f"missing {key}")
    if errs:
        return errs
    ids = [r.get("node_id") for r in rec["regions"]]
    if len(ids) != len(set(ids)):
        errs.append("duplicate node_id")
    idset = set(ids)
    for r in rec["regions"]:
        missing = [k for k in REGION_FIELDS if k not in r]
        if missing:
            errs.append(f"region {r.get('node_id')}: missing {missing}")
            continue
        if r["parent_id"] is not None and r["parent_id"] not in idset:
            errs.append(f"region {r['node_id']}: parent {r['parent_id']} unresolved")
        m = rle_decode(RleMask.from_json(r["rle"]))
        if (m.width, m.height) != (rec["width"], rec["height"]):
            errs.append(f"region {r['node_id']}: rle is {m.width}x{m.height}")
    return errs
