"""Grouping of look-alike regions by embedding cosine similarity."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatchError, MalformedInputError
from .masks import BinaryMask
from .render import blur_outside, crop_to_region, to_png


@dataclass(frozen=True)
class SimilarityParams:
    tau: float = 0.85
    max_group: int = 9

    def __post_init__(self):
        if not -1 <= self.tau <= 1:
            raise ConfigError(f"similarity.tau must be in [-1, 1], got {self.tau}")
        if self.max_group < 2:
            raise ConfigError(f"similarity.max_group must be >= 2, got {self.max_group}")


def cosine(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"vector widths differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise MalformedInputError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller index as representative so results are order-stable
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _unit_rows(embeddings: Sequence) -> np.ndarray:
    vecs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if not vecs:
        return np.zeros((0, 0))
    width = vecs[0].shape
    for i, v in enumerate(vecs):
        if v.ndim != 1 or v.shape != width:
            raise DimensionMismatchError(f"embedding {i} has shape {v.shape}, expected {width}")
    mat = np.stack(vecs)
    norms = np.linalg.norm(mat, axis=1)
    if (norms == 0).any():
        raise MalformedInputError(f"zero embedding at position {int(np.flatnonzero(norms == 0)[0])}")
    return mat / norms[:, None]


def similarity_components(node_ids: Sequence[int], embeddings: Sequence, tau: float) -> list[list[int]]:
    """Connected components (size >= 2) of the graph cosine >= tau, untruncated."""
    if len(node_ids) != len(embeddings):
        raise MalformedInputError(f"{len(node_ids)} node ids but {len(embeddings)} embeddings")
    unit = _unit_rows(embeddings)
    n = len(node_ids)
    uf = UnionFind(n)
    if n:
        sims = unit @ unit.T
        for i in range(n):
            for j in np.flatnonzero(sims[i, i + 1 :] >= tau):
                uf.union(i, i + 1 + int(j))
    comps: dict[int, list[int]] = {}
    for i in range(n):
        comps.setdefault(uf.find(i), []).append(i)
    return [c for c in comps.values() if len(c) >= 2]


def group_similar(
    node_ids: Sequence[int],
    embeddings: Sequence,
    params: SimilarityParams | None = None,
) -> list[list[int]]:
    """Groups of node ids whose embeddings link up at cosine >= tau.

    Oversized components keep the ``max_group`` members closest to the
    component centroid. Members are listed by id; groups by smallest member.
    """
    params = params or SimilarityParams()
    ids = list(node_ids)
    comps = similarity_components(ids, embeddings, params.tau)
    unit = _unit_rows(embeddings) if comps else None
    groups = []
    for comp in comps:
        if len(comp) > params.max_group:
            centroid = unit[comp].mean(axis=0)
            norm = np.linalg.norm(centroid)
            sims = unit[comp] @ (centroid / norm) if norm > 0 else np.zeros(len(comp))
            ranked = sorted(range(len(comp)), key=lambda k: (-sims[k], ids[comp[k]]))
            comp = [comp[k] for k in ranked[: params.max_group]]
        groups.append(sorted(ids[i] for i in comp))
    groups.sort(key=lambda g: g[0])
    return groups


def rotate_group(group: Sequence[int], target: int) -> list[int]:
    """Cyclically rotate ``group`` so ``target`` sits at index 0."""
    k = list(group).index(target)
    return list(group[k:]) + list(group[:k])


def crop_for_embedding(img, mask: BinaryMask, sigma: float = 8.0, margin: float = 0.1) -> np.ndarray:
    return crop_to_region(blur_outside(img, mask, sigma), mask, margin)


def embed_regions(
    client,
    img,
    masks: Mapping[int, BinaryMask],
    concurrency: int = 8,
    sigma: float = 8.0,
    margin: float = 0.1,
) -> dict[int, np.ndarray]:
    """Embed each region's blurred crop; requests run with bounded concurrency."""
    ids = list(masks)

    def one(nid):
        return client.embed(to_png(crop_for_embedding(img, masks[nid], sigma, margin)))

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        vecs = list(pool.map(one, ids))
    return dict(zip(ids, vecs))
