"""Containment hierarchy over an image's masks, rooted at the full frame."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, UnknownNodeError
from .masks import BinaryMask, RleMask, check_same_dims, rle_decode, rle_encode

log = logging.getLogger(__name__)

ROOT_ID = 0


@dataclass(frozen=True)
class TreeParams:
    contain: float = 0.90
    dup: float = 0.95
    main_depth_threshold: int = 2
    # "height": subtree height of a root child; "max_depth": depth of its deepest descendant
    depth_measure: str = "height"

    def __post_init__(self):
        if not 0 < self.contain <= 1:
            raise ConfigError(f"tree.contain must be in (0, 1], got {self.contain}")
        if not 0 < self.dup <= 1:
            raise ConfigError(f"tree.dup must be in (0, 1], got {self.dup}")
        if self.main_depth_threshold < 1:
            raise ConfigError(f"tree.main_depth_threshold must be >= 1, got {self.main_depth_threshold}")
        if self.depth_measure not in ("height", "max_depth"):
            raise ConfigError(f"tree.depth_measure must be 'height' or 'max_depth', got {self.depth_measure!r}")


@dataclass
class MaskNode:
    node_id: int
    mask_ref: int | None
    parent_id: int | None
    child_ids: list[int] = field(default_factory=list)
    depth: int = 0
    subtree_height: int = 0
    area: int = 0


@dataclass
class MaskTree:
    image_id: str
    width: int
    height: int
    nodes: dict[int, MaskNode]
    masks: list[BinaryMask] = field(default_factory=list, repr=False)
    root_id: int = ROOT_ID

    @property
    def root(self) -> MaskNode:
        return self.nodes[self.root_id]

    def node(self, node_id: int) -> MaskNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"no node {node_id} in tree for image {self.image_id}") from None

    def mask(self, node_id: int) -> BinaryMask:
        n = self.node(node_id)
        if n.mask_ref is None:
            return BinaryMask.full(self.width, self.height)
        return self.masks[n.mask_ref]

    def parent(self, node_id: int) -> int | None:
        return self.node(node_id).parent_id

    def children(self, node_id: int) -> list[int]:
        return list(self.node(node_id).child_ids)

    def __len__(self):
        return len(self.nodes)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "root_id": self.root_id,
            "nodes": [
                {
                    "node_id": n.node_id,
                    "mask_ref": n.mask_ref,
                    "parent_id": n.parent_id,
                    "child_ids": list(n.child_ids),
                    "depth": n.depth,
                    "subtree_height": n.subtree_height,
                    "area": n.area,
                }
                for n in sorted(self.nodes.values(), key=lambda n: n.node_id)
            ],
            "masks": [rle_encode(m).to_json() for m in self.masks],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MaskTree":
        nodes = {}
        for raw in obj["nodes"]:
            n = MaskNode(
                node_id=int(raw["node_id"]),
                mask_ref=raw["mask_ref"],
                parent_id=raw["parent_id"],
                child_ids=[int(c) for c in raw["child_ids"]],
                depth=int(raw["depth"]),
                subtree_height=int(raw["subtree_height"]),
                area=int(raw.get("area", 0)),
            )
            nodes[n.node_id] = n
        masks = [rle_decode(RleMask.from_json(r)) for r in obj.get("masks", [])]
        return cls(str(obj["image_id"]), int(obj["width"]), int(obj["height"]), nodes, masks, int(obj.get("root_id", 0)))


def _bbox(bits: np.ndarray):
    rows = np.flatnonzero(bits.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(bits.any(axis=0))
    return (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)


class _PairCache:
    """Pairwise intersection counts, restricted to overlapping bounding boxes."""

    def __init__(self, masks: Sequence[BinaryMask]):
        self.masks = masks
        self.boxes = [_bbox(m.bits) for m in masks]
        self.areas = [int(np.count_nonzero(m.bits)) for m in masks]
        self._cache: dict[tuple[int, int], int] = {}

    def inter(self, i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        a, b = self.boxes[i], self.boxes[j]
        if a is None or b is None:
            n = 0
        else:
            r0, r1 = max(a[0], b[0]), min(a[1], b[1])
            c0, c1 = max(a[2], b[2]), min(a[3], b[3])
            if r0 >= r1 or c0 >= c1:
                n = 0
            else:
                n = int(np.count_nonzero(self.masks[i].bits[r0:r1, c0:c1] & self.masks[j].bits[r0:r1, c0:c1]))
        self._cache[key] = n
        return n

    def iou(self, i: int, j: int) -> float:
        inter = self.inter(i, j)
        union = self.areas[i] + self.areas[j] - inter
        return inter / union if union else 0.0

    def containment(self, i: int, j: int) -> float:
        """Fraction of mask i inside mask j."""
        if self.areas[i] == 0:
            return 0.0
        return self.inter(i, j) / self.areas[i]


def build_tree(
    masks: Sequence[BinaryMask],
    params: TreeParams | None = None,
    image_id: str = "",
    width: int | None = None,
    height: int | None = None,
) -> MaskTree:
    """Build the mask tree.

    Near-duplicates (IoU >= ``params.dup``) are collapsed onto the lower input
    index, then survivors are visited in descending-area order (ties: input
    order). Node ids follow that visiting order starting at 1, and each node
    hangs under the smallest earlier node that contains at least
    ``params.contain`` of it, falling back to the root.
    """
    params = params or TreeParams()
    masks = list(masks)
    check_same_dims(masks)
    if masks:
        height, width = masks[0].shape
    if width is None or height is None:
        raise ValueError("width and height are required when no masks are given")

    pc = _PairCache(masks)
    kept: list[int] = []
    for i in range(len(masks)):
        if pc.areas[i] == 0:
            log.debug("dropping empty mask %d", i)
            continue
        if any(pc.iou(i, j) >= params.dup for j in kept):
            continue
        kept.append(i)
    order = sorted(kept, key=lambda i: (-pc.areas[i], i))

    nodes = {ROOT_ID: MaskNode(ROOT_ID, None, None, [], 0, 0, width * height)}
    id_of_input = {}
    for pos, i in enumerate(order):
        nid = pos + 1
        id_of_input[i] = nid
        best = None
        for j in order[:pos]:
            if pc.containment(i, j) >= params.contain:
                key = (pc.areas[j], id_of_input[j])
                if best is None or key < best[0]:
                    best = (key, id_of_input[j])
        parent = ROOT_ID if best is None else best[1]
        nodes[nid] = MaskNode(nid, i, parent, [], 0, 0, pc.areas[i])
        nodes[parent].child_ids.append(nid)

    for n in nodes.values():
        n.child_ids.sort(key=lambda c: (-nodes[c].area, c))
    tree = MaskTree(str(image_id), int(width), int(height), nodes, masks)
    _annotate_depths(tree)
    return tree


def _annotate_depths(tree: MaskTree) -> None:
    nodes = tree.nodes
    for nid in topdown_order(tree, [tree.root_id]):
        n = nodes[nid]
        n.depth = 0 if n.parent_id is None else nodes[n.parent_id].depth + 1
    for nid in bottomup_order(tree):
        n = nodes[nid]
        n.subtree_height = max((nodes[c].subtree_height + 1 for c in n.child_ids), default=0)


def main_objects(tree: MaskTree, params: TreeParams | None = None) -> list[int]:
    params = params or TreeParams()
    out = []
    for c in tree.root.child_ids:
        measure = tree.nodes[c].subtree_height
        if params.depth_measure == "max_depth":
            measure += tree.nodes[c].depth
        if measure >= params.main_depth_threshold:
            out.append(c)
    return out


def topdown_order(tree: MaskTree, roots: Iterable[int]) -> list[int]:
    """Pre-order over the union of the subtrees under ``roots``."""
    out: list[int] = []
    seen: set[int] = set()
    for r in roots:
        tree.node(r)
        stack = [r]
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            out.append(nid)
            stack.extend(reversed(tree.nodes[nid].child_ids))
    return out


def bottomup_order(tree: MaskTree) -> list[int]:
    """Post-order over every node; the root comes last."""
    out: list[int] = []
    stack: list[tuple[int, bool]] = [(tree.root_id, False)]
    while stack:
        nid, expanded = stack.pop()
        if expanded:
            out.append(nid)
            continue
        stack.append((nid, True))
        for c in reversed(tree.nodes[nid].child_ids):
            stack.append((c, False))
    return out


def siblings(tree: MaskTree, node_id: int) -> list[int]:
    n = tree.node(node_id)
    if n.parent_id is None:
        return []
    return [c for c in tree.nodes[n.parent_id].child_ids if c != node_id]
