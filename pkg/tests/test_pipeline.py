import io
import json
import threading

import numpy as np
import pytest
from helpers import CountdownClient, Interrupted, decode_png, fixed_cfg, http_clients
from PIL import Image

from ureca_forge.masks import BinaryMask
from ureca_forge.mock_server import MockScript, MockServer
from ureca_forge.pipeline import (
    COPY_MODEL,
    CaptionSink,
    ImageState,
    parse_judgement,
    rerun_stage4,
    run_pipeline,
    stage2_short_captions,
)
from ureca_forge.prompts import EMPTY_LIST, WHOLE_IMAGE, parse_marker
from ureca_forge.render import mark_color
from ureca_forge.synthetic import entry_from_masks, gradient_image, nested_fixture, twin_fixture
from ureca_forge.tree import build_tree


def sibling_fixture():
    boxes = [(0, 0, 60, 40), (2, 2, 30, 38), (32, 2, 50, 20), (5, 5, 20, 20)]
    masks = [BinaryMask.from_box(60, 60, *b) for b in boxes]
    return entry_from_masks("sib", masks, "sib.png"), gradient_image(60, 60, seed=3)


def prompts_by_key(server) -> dict[tuple[str, int], list[str]]:
    out: dict[tuple[str, int], list[str]] = {}
    for body in server.backend.bodies("/v1/complete"):
        tid, _, node = parse_marker(body["prompt"])
        out.setdefault((tid, int(node)), []).append(body["prompt"])
    return out


def read_lines(path):
    return [json.loads(ln) for ln in open(path, encoding="utf-8")]


def test_nested_chain_records_and_prompts(tmp_path):
    entry, img = nested_fixture()
    with MockServer() as srv:
        bundle = run_pipeline(entry, img, fixed_cfg(), http_clients(srv.url), tmp_path)
        prompts = prompts_by_key(srv)
    assert [r.node_id for r in bundle.records["short"]] == [1, 2, 3]
    assert [r.node_id for r in bundle.records["dense"]] == [3, 2, 1, 0]
    assert len(bundle.records["unique"]) == 4 and bundle.hard_failures == 0
    # top-down: each prompt embeds the parent's short caption
    assert WHOLE_IMAGE in prompts[("top_down", 1)][0]
    assert "top_down caption for nested/1" in prompts[("top_down", 2)][0]
    assert "top_down caption for nested/2" in prompts[("top_down", 3)][0]
    # bottom-up: each prompt embeds the child's dense caption
    assert EMPTY_LIST in prompts[("bottom_up", 3)][0]
    assert "1. bottom_up caption for nested/3" in prompts[("bottom_up", 2)][0]
    assert "1. bottom_up caption for nested/1" in prompts[("bottom_up", 0)][0]
    lines = read_lines(tmp_path / "captions.jsonl")
    assert [(r["stage"], r["node_id"]) for r in lines][:7] == [
        ("short", 1), ("short", 2), ("short", 3), ("dense", 3), ("dense", 2), ("dense", 1), ("dense", 0)
    ]
    root_unique = [r for r in lines if r["stage"] == "unique" and r["node_id"] == 0][0]
    assert root_unique["model_id"] == COPY_MODEL


def test_sibling_captions_reach_later_siblings(tmp_path):
    entry, img = sibling_fixture()
    with MockServer() as srv:
        bundle = run_pipeline(entry, img, fixed_cfg(), http_clients(srv.url), tmp_path)
        prompts = prompts_by_key(srv)
    tree = bundle.tree
    assert tree.children(1) == [2, 3] and tree.children(2) == [4]
    assert EMPTY_LIST in prompts[("top_down", 2)][0]
    p3 = prompts[("top_down", 3)][0]
    assert "1. top_down caption for sib/2" in p3 and "top_down caption for sib/1" in p3
    assert "top_down caption for sib/2" in prompts[("top_down", 4)][0]
    dense1 = prompts[("bottom_up", 1)][0]
    assert "1. bottom_up caption for sib/2" in dense1 and "2. bottom_up caption for sib/3" in dense1


def test_stage2_image_order_context_then_crop():
    entry, img = nested_fixture()
    tree = build_tree(entry.decode_masks(), image_id=entry.image_id, width=entry.width, height=entry.height)

    class Recorder:
        model = "rec"

        def __init__(self):
            self.calls = []

        def complete(self, prompt, images):
            self.calls.append(images)
            return "a thing"

    rec = Recorder()
    stage2_short_captions(tree, img, rec, cfg=fixed_cfg())
    sizes = [[Image.open(io.BytesIO(b)).size for b in imgs] for imgs in rec.calls]
    # node 2 sits in node 1 (box 80x52 + margin 8 -> clamped to 96x64); crop is 44x36 + margin 4 each side
    assert sizes[1] == [(96, 64), (44 + 8, 36 + 8)]


def _run_all(workdir, entry, img, url, cfg, limit=None):
    clients = http_clients(url, judge=cfg.verify)
    if limit is not None:
        clients.mllm = CountdownClient(clients.mllm, limit)
        if clients.judge is not None:
            clients.judge = CountdownClient(clients.judge, limit)
    return run_pipeline(entry, img, cfg, clients, workdir)


@pytest.mark.parametrize("fraction", [0.25, 0.5, 0.8])
def test_resume_after_kill_is_byte_identical(tmp_path, fraction):
    entry, img = twin_fixture()
    cfg = fixed_cfg()
    with MockServer() as srv:
        _run_all(tmp_path / "full", entry, img, srv.url, cfg)
        total = len(srv.backend.bodies("/v1/complete"))
    with MockServer() as srv:
        with pytest.raises(Interrupted):
            _run_all(tmp_path / "cut", entry, img, srv.url, cfg, limit=int(total * fraction))
        _run_all(tmp_path / "cut", entry, img, srv.url, cfg)
        # no completed call is repeated
        assert len(srv.backend.bodies("/v1/complete")) == total
    full = (tmp_path / "full" / "captions.jsonl").read_bytes()
    assert (tmp_path / "cut" / "captions.jsonl").read_bytes() == full
    a = json.loads((tmp_path / "full" / "twins" / "state.json").read_text())
    b = json.loads((tmp_path / "cut" / "twins" / "state.json").read_text())
    assert a == b


class KillFirstOfWave:
    """Dies on the first bottom_up prompt, but only after the rest of its wave has replied."""

    def __init__(self, inner, wave_size):
        self.inner, self.model = inner, inner.model
        self.replied = threading.Semaphore(0)
        self.wave_size = wave_size
        self.killed = False

    def complete(self, prompt, images):
        if parse_marker(prompt)[0] == "bottom_up" and not self.killed:
            self.killed = True
            for _ in range(self.wave_size - 1):
                assert self.replied.acquire(timeout=10)
            raise Interrupted()
        text = self.inner.complete(prompt, images)
        self.replied.release()
        return text


def test_replies_after_a_kill_are_not_requested_again(tmp_path):
    entry, img = twin_fixture()
    cfg = fixed_cfg(mllm_concurrency=8)
    leaves = [n for n in build_tree(entry.decode_masks(), cfg.tree, "twins", entry.width, entry.height).nodes.values() if not n.child_ids]
    with MockServer() as srv:
        _run_all(tmp_path / "full", entry, img, srv.url, cfg)
        total = len(srv.backend.bodies("/v1/complete"))
    with MockServer() as srv:
        clients = http_clients(srv.url)
        clients.mllm = KillFirstOfWave(clients.mllm, len(leaves))
        with pytest.raises(Interrupted):
            run_pipeline(entry, img, cfg, clients, tmp_path / "cut")
        _run_all(tmp_path / "cut", entry, img, srv.url, cfg)
        prompts = [b["prompt"] for b in srv.backend.bodies("/v1/complete")]
    assert len(prompts) == len(set(prompts)) == total
    assert (tmp_path / "cut" / "captions.jsonl").read_bytes() == (tmp_path / "full" / "captions.jsonl").read_bytes()


def test_torn_sink_line_is_repaired(tmp_path):
    entry, img = nested_fixture()
    cfg = fixed_cfg()
    with MockServer() as srv:
        _run_all(tmp_path, entry, img, srv.url, cfg)
        good = (tmp_path / "captions.jsonl").read_bytes()
        lines = good.split(b"\n")
        # last record never made it; a partial write of it remains
        (tmp_path / "captions.jsonl").write_bytes(b"\n".join(lines[:-2]) + b"\n" + lines[-2][:17])
        _run_all(tmp_path, entry, img, srv.url, cfg)
    assert (tmp_path / "captions.jsonl").read_bytes() == good


def test_concurrency_does_not_change_output(tmp_path):
    entry, img = twin_fixture()
    with MockServer() as srv:
        _run_all(tmp_path / "a", entry, img, srv.url, fixed_cfg(mllm_concurrency=1, embed_concurrency=1))
        _run_all(tmp_path / "b", entry, img, srv.url, fixed_cfg(mllm_concurrency=8, embed_concurrency=8))
    assert (tmp_path / "a" / "captions.jsonl").read_bytes() == (tmp_path / "b" / "captions.jsonl").read_bytes()


def test_twins_are_grouped_and_refined(tmp_path):
    entry, img = twin_fixture()
    with MockServer() as srv:
        bundle = run_pipeline(entry, img, fixed_cfg(), http_clients(srv.url), tmp_path)
    state = ImageState.load(tmp_path / "twins" / "state.json")
    assert state.groups == [[2, 3, 4], [5, 6, 7]]
    models = {r.node_id: r.model_id for r in bundle.records["unique"]}
    assert models[1] == COPY_MODEL and models[0] == COPY_MODEL
    assert all(models[n] == "mock-mllm" for n in range(2, 8))


def test_group_of_ten_renders_nine_marks(tmp_path):
    entry, img = twin_fixture(n=10)
    with MockServer() as srv:
        run_pipeline(entry, img, fixed_cfg(), http_clients(srv.url), tmp_path)
        bodies = [b for b in srv.backend.bodies("/v1/complete") if parse_marker(b["prompt"])[0] == "uniqueness"]
    groups = ImageState.load(tmp_path / "twins" / "state.json").groups
    assert sorted(len(g) for g in groups) == [9, 9]
    for body in bodies:
        som = decode_png(body["images_b64"][0])
        changed = np.any(som != img, axis=-1)
        colours = {tuple(int(v) for v in c) for c in som[changed]}
        assert colours == {mark_color(i) for i in range(9)}
        node = int(parse_marker(body["prompt"])[2])
        assert (som[build_node_band(entry, node)] == mark_color(0)).all()


def build_node_band(entry, node):
    from ureca_forge.render import contour_band, default_thickness

    tree = build_tree(entry.decode_masks(), width=entry.width, height=entry.height)
    return contour_band(tree.mask(node), default_thickness(entry.width, entry.height))


def _verify_run(tmp_path, rules):
    entry, img = nested_fixture()
    cfg = fixed_cfg(verify=True)
    with MockServer(MockScript(rules=rules)) as srv:
        bundle = _run_all(tmp_path, entry, img, srv.url, cfg)
        judge_calls = [b for b in srv.requests if b["path"].startswith("/judge")]
    lines = read_lines(tmp_path / "captions.jsonl")
    return bundle, [r for r in lines if r["stage"] == "unique"], judge_calls


def test_verify_always_true(tmp_path):
    _, unique, calls = _verify_run(tmp_path, [{"route": "judge", "response": {"accurate": True, "unique": True}}])
    assert len(unique) == 4 and {r["status"] for r in unique} == {"verified"}
    assert len(calls) == 4


def test_verify_always_false(tmp_path):
    _, unique, _ = _verify_run(tmp_path, [{"route": "judge", "response": {"accurate": True, "unique": False}}])
    assert {r["status"] for r in unique} == {"rejected"}


def test_verify_malformed_then_valid(tmp_path):
    rules = [{"route": "judge", "responses": ["Sure! Here is my answer", {"accurate": True, "unique": True}]}]
    _, unique, calls = _verify_run(tmp_path, rules)
    assert {r["status"] for r in unique} == {"verified"}
    assert len(calls) == 8
    assert sum("Reply with the JSON object only" in c["body"]["prompt"] for c in calls) == 4


def test_verify_malformed_twice_rejects(tmp_path):
    _, unique, _ = _verify_run(tmp_path, [{"route": "judge", "response": "yes"}])
    assert {r["status"] for r in unique} == {"rejected"}


def test_verify_holds_unique_records_until_done(tmp_path):
    entry, img = nested_fixture()
    cfg = fixed_cfg(verify=True)
    with MockServer() as srv:
        with pytest.raises(Interrupted):
            # 3 short + 4 dense + 3 unique, then the judge is cut after one call
            clients = http_clients(srv.url, judge=True)
            clients.judge = CountdownClient(clients.judge, 1)
            run_pipeline(entry, img, cfg, clients, tmp_path)
        stages = {r["stage"] for r in read_lines(tmp_path / "captions.jsonl")}
        assert stages == {"short", "dense"}
        _run_all(tmp_path, entry, img, srv.url, cfg)
    unique = [r for r in read_lines(tmp_path / "captions.jsonl") if r["stage"] == "unique"]
    assert len(unique) == 4 and all(r["status"] == "verified" for r in unique)


@pytest.mark.parametrize(
    "judgement, ok",
    [
        ('{"accurate": true, "unique": false}', True),
        ('{"accurate": 1, "unique": true}', False),
        ('{"accurate": true}', False),
        ('{"accurate": true, "unique": true, "why": "x"}', False),
        ("```json\n{}\n```", False),
    ],
)
def test_parse_judgement(judgement, ok):
    assert (parse_judgement(judgement) is not None) == ok


def test_failed_node_blocks_subtree(tmp_path):
    entry, img = sibling_fixture()
    rules = [{"route": "complete", "template": "top_down", "node": "2", "status": 500}]
    with MockServer(MockScript(rules=rules)) as srv:
        bundle = run_pipeline(entry, img, fixed_cfg(), http_clients(srv.url), tmp_path)
        prompts = prompts_by_key(srv)
    assert bundle.hard_failures == 1
    assert ("top_down", 4) not in prompts
    state = ImageState.load(tmp_path / "sib" / "state.json")
    assert state.skipped == [4]
    assert sorted(n for n in state.records["dense"]) == [0, 1, 3]
    assert "bottom_up caption for sib/2" not in prompts[("bottom_up", 1)][0]
    assert any("child 2" in w for w in state.warnings)


def test_embedding_failure_copies_forward(tmp_path):
    entry, img = twin_fixture()
    rules = [{"route": "embed", "status": 503}]
    with MockServer(MockScript(rules=rules)) as srv:
        bundle = run_pipeline(entry, img, fixed_cfg(), http_clients(srv.url), tmp_path)
    assert bundle.hard_failures == 1
    assert {r.model_id for r in bundle.records["unique"]} == {COPY_MODEL}
    assert len(bundle.records["unique"]) == len(bundle.records["dense"])


def test_rerun_stage4_replaces_unique(tmp_path):
    entry, img = twin_fixture()
    with MockServer() as srv:
        run_pipeline(entry, img, fixed_cfg(), http_clients(srv.url), tmp_path)
    rules = [{"route": "complete", "template": "uniqueness", "response": "refined {node}"}]
    with MockServer(MockScript(rules=rules)) as srv:
        bundle = rerun_stage4(entry, img, fixed_cfg(), http_clients(srv.url), tmp_path)
        calls = [parse_marker(b["prompt"])[0] for b in srv.backend.bodies("/v1/complete")]
    assert set(calls) == {"uniqueness"}
    texts = {r.node_id: r.text for r in bundle.records["unique"]}
    assert texts[2] == "refined 2"
    lines = read_lines(tmp_path / "captions.jsonl")
    keys = [(r["node_id"], r["stage"]) for r in lines]
    assert len(keys) == len(set(keys))
    assert sum(1 for _, s in keys if s == "unique") == 8


def test_sink_keys_and_remove(tmp_path):
    sink = CaptionSink(tmp_path / "c.jsonl")
    from ureca_forge.pipeline import CaptionRecord

    sink.append([CaptionRecord("a", 1, "dense", "x", "m", "", 0), CaptionRecord("b", 1, "unique", "y", "m", "", 0)])
    assert sink.keys("a") == {(1, "dense")}
    sink.remove("b", "unique")
    assert sink.keys("b") == set()
