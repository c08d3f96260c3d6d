"""Acceptance suite: one test (or a small family) per criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; the conftest prints a
PASS/FAIL line per criterion at the end of the run.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
from helpers import CountdownClient, Interrupted, fixed_cfg, http_clients
from test_masks import naive_rle, naive_stats
from test_metrics import brute_lcs
from test_tree import oracle_parents, tree_parents

from ureca_forge.encoder import EncoderWeights, SplitConfig, encode_mask, reassemble, seeded_weights, split_mask
from ureca_forge.masks import BinaryMask, area, bounding_box, containment, iou, resize_nearest, rle_decode, rle_encode
from ureca_forge.metrics import bleu, clipped_counts, evaluate_pairs, lcs_length, meteor, rouge_l, tokenize
from ureca_forge.mock_server import MockServer
from ureca_forge.pipeline import run_pipeline
from ureca_forge.prompts import parse_marker
from ureca_forge.render import RenderParams, blur_outside, contour_band, mark_color, render_set_of_mark, TARGET_BLUE
from ureca_forge.synthetic import nested_fixture, random_boxes
from ureca_forge.tree import bottomup_order, build_tree, topdown_order


@pytest.mark.criterion(1, "RLE round trip on 1,000 random masks under 1 s")
def test_rle_round_trip_1000():
    rng = np.random.default_rng(2024)
    masks = []
    for _ in range(1000):
        h, w = rng.integers(1, 65, size=2)
        masks.append(BinaryMask(rng.random((h, w)) < rng.uniform(0, 1)))
    t0 = time.perf_counter()
    back = [rle_decode(rle_encode(m)) for m in masks]
    elapsed = time.perf_counter() - t0
    assert all(a == b for a, b in zip(masks, back))
    # the encoder output is also the canonical column-major run list
    assert all(list(rle_encode(m).counts) == naive_rle(m.bits) for m in masks[:100])
    assert elapsed < 1.0, f"{elapsed:.3f}s"


@pytest.mark.criterion(2, "mask algebra equals per-pixel oracle on 500 pairs")
def test_mask_algebra_500_pairs():
    rng = np.random.default_rng(7)
    for _ in range(500):
        h, w = rng.integers(1, 33, size=2)
        a = BinaryMask(rng.random((h, w)) < rng.uniform(0, 1))
        b = BinaryMask(rng.random((h, w)) < rng.uniform(0, 1))
        inter, union, na = naive_stats(a.bits, b.bits)
        assert area(a) == na
        assert iou(a, b) == (inter / union if union else 0.0)
        assert containment(a, b) == (inter / na if na else 0.0)
        if na:
            ys = [y for y in range(h) for x in range(w) if a.bits[y, x]]
            xs = [x for y in range(h) for x in range(w) if a.bits[y, x]]
            assert bounding_box(a).as_tuple() == (min(xs), min(ys), max(xs) + 1, max(ys) + 1)


@pytest.mark.criterion(3, "tree parents equal the minimum-area-container oracle on 200 sets")
def test_tree_oracle_200_sets():
    rng = np.random.default_rng(99)
    for _ in range(200):
        n = int(rng.integers(0, 21))
        masks = random_boxes(rng, 40, 30, n)
        tree = build_tree(masks, image_id="a", width=40, height=30)
        assert tree_parents(tree) == oracle_parents(masks, contain=0.90)


@pytest.mark.criterion(4, "traversal order contracts on 100 random trees")
def test_traversals_100_trees():
    rng = np.random.default_rng(5)
    for _ in range(100):
        tree = build_tree(random_boxes(rng, 48, 48, int(rng.integers(0, 25))), width=48, height=48)
        td = {n: i for i, n in enumerate(topdown_order(tree, [tree.root_id]))}
        bu = {n: i for i, n in enumerate(bottomup_order(tree))}
        assert set(td) == set(bu) == set(tree.nodes)
        for n in tree.nodes.values():
            for c in n.child_ids:
                assert td[n.node_id] < td[c]
                assert bu[c] < bu[n.node_id]


@pytest.mark.criterion(5, "split/reassemble exact on 200 masks up to 2048x2048")
def test_split_reassemble_200_masks():
    rng = np.random.default_rng(11)
    cfg = SplitConfig(tile=448, max_tiles=12)
    sizes = [(2048, 2048), (1, 1), (448, 448), (449, 448), (1344, 1792)]
    sizes += [tuple(int(v) for v in rng.integers(1, 2049, size=2)) for _ in range(195)]
    for h, w in sizes:
        m = BinaryMask(rng.integers(0, 2, size=(h, w), dtype=np.uint8).astype(bool))
        grid = split_mask(m, cfg)
        rows, cols = math.ceil(h / 448), math.ceil(w / 448)
        if rows * cols <= cfg.max_tiles:
            assert (grid.rows, grid.cols) == (rows, cols)
            source = m
        else:
            assert grid.rows * grid.cols <= cfg.max_tiles
            source = resize_nearest(m, grid.work_w, grid.work_h)
        padded = np.zeros((grid.rows * 448, grid.cols * 448), dtype=bool)
        padded[:source.height, :source.width] = source.bits
        assert np.array_equal(reassemble(grid, crop=False).bits, padded)
        assert all(t.shape == (448, 448) for t in grid.tiles)


@pytest.mark.criterion(6, "encoder token count, determinism and zero response")
@pytest.mark.parametrize("token_len", [4, 8, 16])
def test_encoder_contract(token_len):
    rng = np.random.default_rng(token_len)
    m = BinaryMask(rng.random((600, 1000)) < 0.3)
    cfg = SplitConfig()
    n_s = split_mask(m, cfg).n_tiles
    a = encode_mask(m, seeded_weights(42, 32, token_len), cfg)
    b = encode_mask(m, seeded_weights(42, 32, token_len), cfg)
    assert a.shape == (n_s * token_len, 32) and n_s == 2 * 3 + 1
    assert a.tokens.tobytes() == b.tokens.tobytes()
    w = seeded_weights(42, 32, token_len)
    zero_bias = EncoderWeights({k: (np.zeros_like(v) if k.endswith("bias") else v) for k, v in w.tensors.items()}, 32, token_len)
    z = encode_mask(BinaryMask.zeros(500, 300), zero_bias, cfg)
    assert not z.tokens.any()


@pytest.mark.criterion(7, "metric oracles")
def test_metric_oracles():
    cand, ref = tokenize("the the the the the the the"), tokenize("the cat is on the mat")
    assert clipped_counts(cand, ref, 1) == (2, 7)
    assert bleu(cand, ref, 1)[0] == 2 / 7
    # exhaustive: every binary sequence of length <= 10 against fixed references
    seqs = [list(p) for n in range(11) for p in itertools.product("ab", repeat=n)]
    for b in (list("abbabaabab"), list("aaaaabbbbb"), []):
        for a in seqs:
            lcs = brute_lcs(a, b)
            assert lcs_length(a, b) == lcs
            want = 0.0 if lcs == 0 else 2 * (lcs / len(a)) * (lcs / len(b)) / (lcs / len(a) + lcs / len(b))
            assert rouge_l(a, b) == pytest.approx(want, abs=1e-15)
    assert abs(meteor(list("wxyz"), list("wxyz")) - 0.9921875) < 1e-9
    assert abs(meteor(["cats"], ["cat"]) - 0.5) < 1e-9
    assert meteor(["x"], ["y"]) == 0.0
    means = evaluate_pairs(IDENTICAL, dict(IDENTICAL)).means
    for name in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"):
        assert means[name] == 1.0


IDENTICAL = {("i", k): f"region {k} is a small red object near the window" for k in range(6)}


@pytest.mark.criterion(7, "metric oracles")
@pytest.mark.xfail(strict=True, reason="fragmentation penalty keeps identical METEOR below 1 (hand case 0.9921875)")
def test_identical_corpus_meteor_mean_is_one():
    assert evaluate_pairs(IDENTICAL, dict(IDENTICAL)).means["meteor"] == 1.0


@pytest.mark.criterion(8, "end-to-end mock run, prompt chaining, kill-at-50% resume, under 10 s")
def test_end_to_end_with_resume(tmp_path):
    t0 = time.perf_counter()
    entry, img = nested_fixture()
    cfg = fixed_cfg()
    with MockServer() as srv:
        bundle = run_pipeline(entry, img, cfg, http_clients(srv.url), tmp_path / "full")
        bodies = srv.backend.bodies("/v1/complete")
    total = len(bodies)
    dense = [r.node_id for r in bundle.records["dense"]]
    assert dense == [3, 2, 1, 0]
    assert len(bundle.records["unique"]) == 4
    # a parent's dense caption is written after all its children's
    for r in bundle.records["dense"]:
        for c in bundle.tree.children(r.node_id):
            assert dense.index(c) < dense.index(r.node_id)
    prompts = {(parse_marker(b["prompt"])[0], int(parse_marker(b["prompt"])[2])): b["prompt"] for b in bodies}
    for nid in (2, 3):
        parent = bundle.tree.parent(nid)
        assert f"top_down caption for nested/{parent}" in prompts[("top_down", nid)]
    for nid in (0, 1, 2):
        for c in bundle.tree.children(nid):
            assert f"bottom_up caption for nested/{c}" in prompts[("bottom_up", nid)]

    with MockServer() as srv:
        clients = http_clients(srv.url)
        clients.mllm = CountdownClient(clients.mllm, total // 2)
        with pytest.raises(Interrupted):
            run_pipeline(entry, img, cfg, clients, tmp_path / "cut")
        run_pipeline(entry, img, cfg, http_clients(srv.url), tmp_path / "cut")
        assert len(srv.backend.bodies("/v1/complete")) == total
    full = (tmp_path / "full" / "captions.jsonl").read_bytes()
    assert (tmp_path / "cut" / "captions.jsonl").read_bytes() == full
    lines = [json.loads(ln) for ln in full.decode().splitlines()]
    assert sum(r["stage"] == "dense" for r in lines) == 4 and sum(r["stage"] == "unique" for r in lines) == 4
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"{elapsed:.2f}s"


@pytest.mark.criterion(9, "renderer invariants: blur keeps mask pixels, one mark per group member")
def test_renderer_invariants():
    rng = np.random.default_rng(8)
    for _ in range(20):
        h, w = rng.integers(8, 80, size=2)
        img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        m = BinaryMask(rng.random((h, w)) < rng.uniform(0.05, 0.95))
        out = blur_outside(img, m, float(rng.uniform(0.5, 8)))
        assert np.array_equal(out[m.bits], img[m.bits])
    for n in range(1, 10):
        img = np.full((50, 300, 3), 100, dtype=np.uint8)
        members = [BinaryMask.from_box(300, 50, 4 + 32 * k, 10, 30 + 32 * k, 40) for k in range(n)]
        out = render_set_of_mark(img, members, RenderParams(thickness=2))
        colours = {tuple(int(v) for v in c) for c in out[np.any(out != img, axis=-1)]}
        assert colours == {mark_color(i) for i in range(n)} and len(colours) == n
        assert (out[contour_band(members[0], 2)] == TARGET_BLUE).all()
