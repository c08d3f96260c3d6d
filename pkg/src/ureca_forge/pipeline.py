"""Stages 2-4 of the caption pipeline plus test-set verification.

Per image, progress lives in ``<workdir>/<image_id>/state.json`` and is
rewritten (atomically) after every committed caption, so an interrupted run
resumes without repeating any completed service call. Finished records are
appended to ``<workdir>/captions.jsonl`` in commit order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ClientError, UrecaError
from .grouping import SimilarityParams, embed_regions, group_similar, rotate_group
from .masks import BinaryMask
from .prompts import WHOLE_IMAGE, PromptTemplate, build_prompt, describe_list, load_templates
from .render import (
    RenderParams,
    blur_outside,
    crop_to_region,
    render_set_of_mark,
    render_stage2_views,
    render_stage3_view,
    save_png,
    to_png,
)
from .sa1b import ImageEntry
from .tree import MaskTree, TreeParams, bottomup_order, build_tree, main_objects, siblings, topdown_order

log = logging.getLogger(__name__)

STAGES = ("short", "dense", "unique")
CURSORS = ("short", "dense", "unique", "verify", "done")
COPY_MODEL = "copy-forward"


@dataclass
class CaptionRecord:
    image_id: str
    node_id: int
    stage: str
    text: str
    model_id: str
    prompt_sha256: str
    created_at: int
    status: str = "ok"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "CaptionRecord":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__})


@dataclass
class PipelineConfig:
    tree: TreeParams = field(default_factory=TreeParams)
    render: RenderParams = field(default_factory=RenderParams)
    similarity: SimilarityParams = field(default_factory=SimilarityParams)
    mllm_concurrency: int = 4
    embed_concurrency: int = 8
    verify: bool = False
    fixed_timestamp: int | None = None
    save_renders: bool = False
    extra_examples: str = ""

    def now(self) -> int:
        return int(time.time()) if self.fixed_timestamp is None else int(self.fixed_timestamp)


@dataclass
class Clients:
    mllm: object
    embed: object | None = None
    judge: object | None = None


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class CaptionSink:
    """Append-only JSONL of finished caption records, shared by all images."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def _read(self) -> list[str]:
        if not self.path.exists():
            return []
        data = self.path.read_bytes().decode("utf-8")
        lines = data.split("\n")
        if lines and lines[-1] != "":
            # torn final line from a crash
            log.warning("dropping incomplete trailing line in %s", self.path)
            self.path.write_text("\n".join(lines[:-1]) + ("\n" if len(lines) > 1 else ""), encoding="utf-8")
        return [ln for ln in lines[:-1] if ln]

    def keys(self, image_id: str) -> set[tuple[int, str]]:
        with self._lock:
            out = set()
            for ln in self._read():
                obj = json.loads(ln)
                if obj["image_id"] == image_id:
                    out.add((obj["node_id"], obj["stage"]))
            return out

    def append(self, records: Iterable[CaptionRecord]) -> None:
        lines = "".join(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for r in records)
        if not lines:
            return
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                f.write(lines)
                f.flush()
                os.fsync(f.fileno())

    def remove(self, image_id: str, stage: str) -> None:
        with self._lock:
            kept = [ln for ln in self._read() if not (json.loads(ln)["image_id"] == image_id and json.loads(ln)["stage"] == stage)]
            _atomic_write(self.path, "".join(ln + "\n" for ln in kept))


class ImageState:
    """Checkpointed progress of one image.

    ``order`` lists (stage, node_id) in commit order; it fixes the order in
    which records reach the caption sink, including after a resume.
    """

    def __init__(self, image_id: str, path: Path | None = None, sink: CaptionSink | None = None, publish_unique: bool = True):
        self.image_id = image_id
        self.path = path
        self.sink = sink
        self.publish_unique = publish_unique
        self.cursor = "short"
        self.records: dict[str, dict[int, CaptionRecord]] = {s: {} for s in STAGES}
        self.order: list[tuple[str, int]] = []
        self.failed: dict[str, dict[int, str]] = {s: {} for s in (*STAGES, "verify")}
        self.skipped: list[int] = []
        self.groups: list[list[int]] | None = None
        self.verify_status: dict[int, str] = {}
        self.warnings: list[str] = []
        # replies received but not yet committed, keyed by prompt hash
        self.pending: dict[str, str] = {}
        self._lock = threading.Lock()

    # --- persistence -----------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "cursor": self.cursor,
            "order": [[s, n] for s, n in self.order],
            "records": {s: [self.records[s][n].to_json() for n in self.records[s]] for s in STAGES},
            "failed": {s: {str(n): m for n, m in d.items()} for s, d in self.failed.items()},
            "skipped": self.skipped,
            "groups": self.groups,
            "verify_status": {str(n): v for n, v in self.verify_status.items()},
            "warnings": self.warnings,
            "pending": self.pending,
        }

    @classmethod
    def load(cls, path: Path, sink: CaptionSink | None = None, publish_unique: bool = True) -> "ImageState":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        st = cls(obj["image_id"], Path(path), sink, publish_unique)
        st.cursor = obj["cursor"]
        st.order = [(s, int(n)) for s, n in obj["order"]]
        for s in STAGES:
            for raw in obj["records"].get(s, []):
                rec = CaptionRecord.from_json(raw)
                st.records[s][rec.node_id] = rec
        for s, d in obj.get("failed", {}).items():
            st.failed[s] = {int(n): m for n, m in d.items()}
        st.skipped = [int(n) for n in obj.get("skipped", [])]
        st.groups = obj.get("groups")
        st.verify_status = {int(n): v for n, v in obj.get("verify_status", {}).items()}
        st.warnings = list(obj.get("warnings", []))
        st.pending = dict(obj.get("pending", {}))
        return st

    def save(self) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            _atomic_write(self.path, json.dumps(self.to_json(), ensure_ascii=False, indent=1, sort_keys=True))

    # --- queries ----------------------------------------------------------------
    def has(self, stage: str, node_id: int) -> bool:
        return node_id in self.records[stage]

    def text(self, stage: str, node_id: int) -> str:
        return self.records[stage][node_id].text

    def is_failed(self, stage: str, node_id: int) -> bool:
        return node_id in self.failed[stage]

    @property
    def hard_failures(self) -> int:
        return sum(len(d) for s, d in self.failed.items() if s != "verify")

    def published(self) -> list[CaptionRecord]:
        """Records that belong in the caption sink, in commit order."""
        out = []
        for s, n in self.order:
            if s == "unique" and not self.publish_unique:
                continue
            out.append(self.final_record(s, n))
        if not self.publish_unique and self.cursor == "done":
            out += [self.final_record("unique", n) for s, n in self.order if s == "unique"]
        return out

    def final_record(self, stage: str, node_id: int) -> CaptionRecord:
        rec = self.records[stage][node_id]
        if stage == "unique" and node_id in self.verify_status:
            rec = CaptionRecord(**{**rec.to_json(), "status": self.verify_status[node_id]})
        return rec

    # --- updates ----------------------------------------------------------------
    def ask(self, client, prompt: str, images: list[bytes]) -> str:
        """``client.complete`` with the reply checkpointed before it is used.

        Concurrent jobs finish out of commit order; if the run dies first, a
        resume reuses the stashed reply instead of calling again.
        """
        key = sha256(prompt)
        with self._lock:
            text = self.pending.get(key)
        if text is None:
            text = client.complete(prompt, images)
            with self._lock:
                self.pending[key] = text
                self.save()
        return text

    def commit(self, rec: CaptionRecord) -> None:
        with self._lock:
            self.records[rec.stage][rec.node_id] = rec
            self.order.append((rec.stage, rec.node_id))
            self.save()
            if self.sink is not None and (rec.stage != "unique" or self.publish_unique):
                self.sink.append([rec])

    def fail(self, stage: str, node_id: int, msg: str) -> None:
        with self._lock:
            log.warning("image %s node %s failed in %s: %s", self.image_id, node_id, stage, msg)
            self.failed[stage][node_id] = msg
            self.save()

    def warn(self, msg: str) -> None:
        log.warning("image %s: %s", self.image_id, msg)
        self.warnings.append(msg)

    def set_verify(self, node_id: int, status: str) -> None:
        with self._lock:
            self.verify_status[node_id] = status
            self.save()

    def advance(self, cursor: str) -> None:
        with self._lock:
            self.cursor = cursor
            self.pending.clear()
            self.save()
            if cursor == "done" and self.sink is not None and not self.publish_unique:
                self.sink.append(self.final_record("unique", n) for s, n in self.order if s == "unique")

    def reconcile(self) -> None:
        """Re-append records the sink lost to a crash between state save and append."""
        if self.sink is None:
            return
        present = self.sink.keys(self.image_id)
        missing = [r for r in self.published() if (r.node_id, r.stage) not in present]
        if missing:
            log.info("image %s: re-appending %d records to caption sink", self.image_id, len(missing))
            self.sink.append(missing)


# --- helpers --------------------------------------------------------------------------


def _ordered_map(fn: Callable, items: Sequence, workers: int):
    """Results of ``fn`` over ``items`` in input order, computed concurrently."""
    if workers <= 1 or len(items) <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(fn, items)


def _record(tree: MaskTree, node_id: int, stage: str, text: str, model: str, prompt: str, cfg: PipelineConfig) -> CaptionRecord:
    return CaptionRecord(tree.image_id, node_id, stage, text.strip(), model, sha256(prompt) if prompt else "", cfg.now())


class _Renders:
    def __init__(self, root: Path | None):
        self.root = root

    def save(self, node_id: int, view: str, img) -> None:
        if self.root is not None:
            save_png(img, self.root / f"{node_id}_{view}.png")


def stage2_images(tree: MaskTree, img, node_id: int, params: RenderParams) -> dict[str, np.ndarray]:
    """Context view (target contoured in its parent) and isolated crop."""
    target = tree.mask(node_id)
    parent = tree.parent(node_id)
    if parent == tree.root_id:
        crop = crop_to_region(blur_outside(img, target, params.sigma), target, params.margin)
        context = render_stage3_view(img, target, params)
    else:
        crop, context = render_stage2_views(img, target, tree.mask(parent), params)
    return {"context": context, "crop": crop}


def stage2_short_captions(
    tree: MaskTree,
    img,
    client,
    templates: dict[str, PromptTemplate] | None = None,
    cfg: PipelineConfig | None = None,
    state: ImageState | None = None,
    renders: _Renders | None = None,
) -> list[CaptionRecord]:
    """Top-down short captions over the main-object subtrees.

    A node whose call fails takes its whole subtree out of the run.
    """
    cfg = cfg or PipelineConfig()
    templates = templates or load_templates()
    state = state or ImageState(tree.image_id)
    renders = renders or _Renders(None)
    blocked: set[int] = set()
    for nid in topdown_order(tree, main_objects(tree, cfg.tree)):
        parent = tree.parent(nid)
        if parent in blocked:
            blocked.add(nid)
            if nid not in state.skipped:
                state.skipped.append(nid)
            continue
        if state.is_failed("short", nid):
            blocked.add(nid)
            continue
        if state.has("short", nid):
            continue
        parent_desc = WHOLE_IMAGE if parent == tree.root_id else state.text("short", parent)
        earlier = []
        for s in siblings(tree, nid):
            if tree.node(s).area < tree.node(nid).area or (tree.node(s).area == tree.node(nid).area and s > nid):
                break
            if state.has("short", s):
                earlier.append(state.text("short", s))
        prompt = build_prompt(
            templates["top_down"],
            tree.image_id,
            nid,
            parent_desc=parent_desc,
            sibling_descs=describe_list(earlier),
            extra_examples=cfg.extra_examples,
        )
        views = stage2_images(tree, img, nid, cfg.render)
        renders.save(nid, "short_context", views["context"])
        renders.save(nid, "short_crop", views["crop"])
        try:
            # image order follows the template: Image-1 context, Image-2 crop
            text = state.ask(client, prompt, [to_png(views["context"]), to_png(views["crop"])])
        except ClientError as exc:
            state.fail("short", nid, str(exc))
            blocked.add(nid)
            continue
        state.commit(_record(tree, nid, "short", text, client.model, prompt, cfg))
    state.save()
    return list(state.records["short"].values())


def stage3_dense_captions(
    tree: MaskTree,
    img,
    client,
    templates: dict[str, PromptTemplate] | None = None,
    cfg: PipelineConfig | None = None,
    state: ImageState | None = None,
    renders: _Renders | None = None,
) -> list[CaptionRecord]:
    """Bottom-up dense captions for every short-captioned node and the root.

    Nodes run in waves: a wave is every pending node whose eligible children
    are resolved, so the result does not depend on the concurrency level.
    """
    cfg = cfg or PipelineConfig()
    templates = templates or load_templates()
    state = state or ImageState(tree.image_id)
    renders = renders or _Renders(None)
    root = tree.root_id
    order = bottomup_order(tree)
    eligible = [n for n in order if n == root or state.has("short", n)]
    eligible_set = set(eligible)

    def resolved(n):
        return state.has("dense", n) or state.is_failed("dense", n)

    def job(nid):
        kids = []
        for c in tree.children(nid):
            if state.has("dense", c):
                kids.append(state.text("dense", c))
            elif state.is_failed("dense", c) or state.is_failed("short", c) or c in state.skipped:
                state.warn(f"node {nid}: child {c} has no dense caption; omitted from prompt")
        target = WHOLE_IMAGE if nid == root else state.text("short", nid)
        prompt = build_prompt(
            templates["bottom_up"], tree.image_id, nid, target_caption=target, child_descs=describe_list(kids)
        )
        view = render_stage3_view(img, tree.mask(nid), cfg.render)
        renders.save(nid, "dense", view)
        try:
            return prompt, state.ask(client, prompt, [to_png(view)]), None
        except ClientError as exc:
            return prompt, None, exc

    while True:
        wave = [
            n
            for n in eligible
            if not resolved(n) and all(resolved(c) for c in tree.children(n) if c in eligible_set)
        ]
        if not wave:
            break
        for nid, (prompt, text, err) in zip(wave, _ordered_map(job, wave, cfg.mllm_concurrency)):
            if err is not None:
                state.fail("dense", nid, str(err))
            else:
                state.commit(_record(tree, nid, "dense", text, client.model, prompt, cfg))
    state.save()
    return list(state.records["dense"].values())


def som_group_image(tree: MaskTree, img, state: ImageState, node_id: int, params: RenderParams):
    """Set-of-mark image with ``node_id`` at index 0 and its look-alikes after it."""
    group = [node_id]
    for g in state.groups or []:
        if node_id in g:
            group = rotate_group(g, node_id)
            break
    return group, render_set_of_mark(img, [tree.mask(n) for n in group], params)


def compute_groups(tree: MaskTree, img, embed_client, state: ImageState, cfg: PipelineConfig) -> list[list[int]]:
    candidates = [n for n in sorted(state.records["dense"]) if n != tree.root_id]
    if embed_client is None:
        state.warn("no embedding client configured; uniqueness refinement skipped")
        return []
    if len(candidates) < 2:
        return []
    try:
        vecs = embed_regions(
            embed_client,
            img,
            {n: tree.mask(n) for n in candidates},
            cfg.embed_concurrency,
            cfg.render.sigma,
            cfg.render.margin,
        )
    except ClientError as exc:
        state.fail("unique", -1, f"embedding failed: {exc}")
        return []
    log.info("image %s: grouping %d regions at tau=%.3f", tree.image_id, len(candidates), cfg.similarity.tau)
    return group_similar(candidates, [vecs[n] for n in candidates], cfg.similarity)


def stage4_unique_captions(
    tree: MaskTree,
    img,
    clients: Clients,
    templates: dict[str, PromptTemplate] | None = None,
    cfg: PipelineConfig | None = None,
    state: ImageState | None = None,
    renders: _Renders | None = None,
) -> list[CaptionRecord]:
    """Refine captions of look-alike regions; everything else copies its dense caption."""
    cfg = cfg or PipelineConfig()
    templates = templates or load_templates()
    state = state or ImageState(tree.image_id)
    renders = renders or _Renders(None)
    if state.groups is None:
        state.groups = compute_groups(tree, img, clients.embed, state, cfg)
        state.save()
    grouped = {n for g in state.groups for n in g}
    dense_order = [n for s, n in state.order if s == "dense"]
    todo = [n for n in dense_order if not state.has("unique", n) and not state.is_failed("unique", n)]

    def job(nid):
        if nid not in grouped:
            return None, state.text("dense", nid), None
        group, som = som_group_image(tree, img, state, nid, cfg.render)
        renders.save(nid, "unique_som", som)
        prompt = build_prompt(templates["uniqueness"], tree.image_id, nid, target_caption=state.text("dense", nid))
        try:
            return prompt, state.ask(clients.mllm, prompt, [to_png(som)]), None
        except ClientError as exc:
            return prompt, None, exc

    for nid, (prompt, text, err) in zip(todo, _ordered_map(job, todo, cfg.mllm_concurrency)):
        if err is not None:
            state.fail("unique", nid, str(err))
        elif prompt is None:
            state.commit(_record(tree, nid, "unique", text, COPY_MODEL, "", cfg))
        else:
            state.commit(_record(tree, nid, "unique", text, clients.mllm.model, prompt, cfg))
    state.save()
    return list(state.records["unique"].values())


def parse_judgement(text: str) -> dict | None:
    try:
        obj = json.loads(text.strip())
    except (json.JSONDecodeError, AttributeError):
        return None
    if not isinstance(obj, dict) or set(obj) != {"accurate", "unique"}:
        return None
    if not all(isinstance(obj[k], bool) for k in obj):
        return None
    return obj


REASK_SUFFIX = "\nYour previous reply was not a valid JSON object. Reply with the JSON object only."


def verify_captions(
    tree: MaskTree,
    img,
    judge,
    templates: dict[str, PromptTemplate] | None = None,
    cfg: PipelineConfig | None = None,
    state: ImageState | None = None,
) -> list[CaptionRecord]:
    """Ask the judge about every unique caption; both checks true -> verified."""
    cfg = cfg or PipelineConfig()
    templates = templates or load_templates()
    state = state or ImageState(tree.image_id)
    unique_order = [n for s, n in state.order if s == "unique"]
    todo = [n for n in unique_order if n not in state.verify_status and not state.is_failed("verify", n)]

    def job(nid):
        _, som = som_group_image(tree, img, state, nid, cfg.render)
        prompt = build_prompt(templates["verify"], tree.image_id, nid, target_caption=state.text("unique", nid))
        png = to_png(som)
        try:
            verdict = parse_judgement(state.ask(judge, prompt, [png]))
            if verdict is None:
                verdict = parse_judgement(state.ask(judge, prompt + REASK_SUFFIX, [png]))
        except ClientError as exc:
            return None, exc
        if verdict is None:
            return "rejected", None
        return ("verified" if verdict["accurate"] and verdict["unique"] else "rejected"), None

    for nid, (status, err) in zip(todo, _ordered_map(job, todo, cfg.mllm_concurrency)):
        if err is not None:
            state.fail("verify", nid, f"unverified: {err}")
        else:
            state.set_verify(nid, status)
    state.save()
    return [state.final_record("unique", n) for n in unique_order]


# --- whole-image driver ------------------------------------------------------------------


@dataclass
class ImageBundle:
    image_id: str
    tree: MaskTree
    records: dict[str, list[CaptionRecord]]
    failures: dict[str, dict[int, str]]
    warnings: list[str]

    @property
    def hard_failures(self) -> int:
        return sum(len(d) for s, d in self.failures.items() if s != "verify")


def image_dir(workdir: str | Path, image_id: str) -> Path:
    return Path(workdir) / image_id


def write_entry_meta(d: Path, entry: ImageEntry, image_path: str) -> None:
    meta = {"image_id": entry.image_id, "image_path": image_path, "width": entry.width, "height": entry.height}
    d.mkdir(parents=True, exist_ok=True)
    _atomic_write(d / "entry.json", json.dumps(meta, sort_keys=True))


def load_or_build_tree(entry: ImageEntry, d: Path, params: TreeParams) -> MaskTree:
    path = d / "tree.json"
    if path.exists():
        return MaskTree.from_json(json.loads(path.read_text(encoding="utf-8")))
    tree = build_tree(entry.decode_masks(), params, entry.image_id, entry.width, entry.height)
    d.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, json.dumps(tree.to_json()))
    return tree


def open_state(d: Path, image_id: str, sink: CaptionSink | None, cfg: PipelineConfig) -> ImageState:
    path = d / "state.json"
    publish_unique = not cfg.verify
    if path.exists():
        state = ImageState.load(path, sink, publish_unique)
        state.reconcile()
        return state
    return ImageState(image_id, path, sink, publish_unique)


def run_pipeline(
    entry: ImageEntry,
    img,
    cfg: PipelineConfig,
    clients: Clients,
    workdir: str | Path,
    image_path: str = "",
    templates: dict[str, PromptTemplate] | None = None,
    sink: CaptionSink | None = None,
) -> ImageBundle:
    """Run (or resume) stages 1-4, then verification when ``cfg.verify``."""
    templates = templates or load_templates()
    d = image_dir(workdir, entry.image_id)
    sink = sink or CaptionSink(Path(workdir) / "captions.jsonl")
    write_entry_meta(d, entry, image_path or entry.file_name)
    tree = load_or_build_tree(entry, d, cfg.tree)
    state = open_state(d, entry.image_id, sink, cfg)
    renders = _Renders(d / "renders" if cfg.save_renders else None)

    if state.cursor == "short":
        stage2_short_captions(tree, img, clients.mllm, templates, cfg, state, renders)
        state.advance("dense")
    if state.cursor == "dense":
        stage3_dense_captions(tree, img, clients.mllm, templates, cfg, state, renders)
        state.advance("unique")
    if state.cursor == "unique":
        stage4_unique_captions(tree, img, clients, templates, cfg, state, renders)
        state.advance("verify")
    if state.cursor == "verify":
        if cfg.verify:
            judge = clients.judge or clients.mllm
            verify_captions(tree, img, judge, templates, cfg, state)
        state.advance("done")
    return bundle_of(tree, state)


def bundle_of(tree: MaskTree, state: ImageState) -> ImageBundle:
    records = {s: [state.final_record(s, n) for st, n in state.order if st == s] for s in STAGES}
    return ImageBundle(tree.image_id, tree, records, state.failed, state.warnings)


def rerun_stage4(
    entry: ImageEntry,
    img,
    cfg: PipelineConfig,
    clients: Clients,
    workdir: str | Path,
    templates: dict[str, PromptTemplate] | None = None,
    sink: CaptionSink | None = None,
) -> ImageBundle:
    """Drop unique captions and verification results, then redo stage 4 (+verify)."""
    d = image_dir(workdir, entry.image_id)
    sink = sink or CaptionSink(Path(workdir) / "captions.jsonl")
    state = open_state(d, entry.image_id, sink, cfg)
    if state.cursor in ("short", "dense"):
        raise UrecaError(f"image {entry.image_id}: stage 3 has not finished; run annotate first")
    sink.remove(entry.image_id, "unique")
    state.records["unique"] = {}
    state.order = [(s, n) for s, n in state.order if s != "unique"]
    state.failed["unique"] = {}
    state.failed["verify"] = {}
    state.verify_status = {}
    state.groups = None
    state.pending.clear()
    state.cursor = "unique"
    state.save()
    return run_pipeline(entry, img, cfg, clients, workdir, templates=templates, sink=sink)
