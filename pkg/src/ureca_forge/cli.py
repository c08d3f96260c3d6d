"""Command-line entry point: ``ureca-forge <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .clients import HttpEmbeddingClient, HttpMllmClient
from .config import RunConfig, config_path, load_config
from .encoder import encode_mask, load_weights, save_tokens, seeded_weights, split_mask
from .errors import ClientError, UrecaError
from .masks import RleMask, rle_decode
from .metrics import evaluate_corpus
from .mock_server import MockScript, MockServer
from .pipeline import CaptionSink, Clients, image_dir, rerun_stage4, run_pipeline, stage2_images
from .prompts import load_templates
from .render import load_image, render_set_of_mark, render_stage3_view, save_png
from .sa1b import load_entry
from .store import export_workdir
from .tree import build_tree

log = logging.getLogger("ureca_forge")

EXIT_OK, EXIT_ERROR, EXIT_SERVICE = 0, 1, 2


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="config file (falls back to $URECA_FORGE_CONFIG)")
    parser.add_argument("--workdir", default=d, help="run directory")
    parser.add_argument("--seed", type=int, default=d, help="seed for encoder weights and mock jitter")
    parser.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS if suppress else 0)
    parser.add_argument(
        "--set", dest="settings", action="append", metavar="KEY=VALUE", default=d, help="override any config key"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ureca-forge", description=__doc__)
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tree", parents=[common], help="build a mask tree from SA-1B JSON")
    p.add_argument("input")
    p.add_argument("--out", default="-", help="output file, '-' for stdout")

    p = sub.add_parser("render", parents=[common], help="write the stage prompt images for every node")
    p.add_argument("input")
    p.add_argument("--image", help="image file (default: file_name next to the input JSON)")
    p.add_argument("--out", help="output directory (default: <workdir>/renders)")
    p.add_argument("--nodes", type=int, nargs="*", help="only these node ids")

    for name, help_ in (("annotate", "run stages 1-4 (and verification)"), ("refine", "redo stage 4 only")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("inputs", nargs="+")
        p.add_argument("--image-dir", help="directory holding the image files")
        p.add_argument("--mllm-endpoint")
        p.add_argument("--embed-endpoint")
        p.add_argument("--judge-endpoint")
        p.add_argument("--prompts-dir")
        p.add_argument("--verify", action="store_true", default=None)
        if name == "annotate":
            p.add_argument("--resume", action="store_true", help="continue from existing checkpoints")

    p = sub.add_parser("encode", parents=[common], help="tokenize one mask")
    p.add_argument("--mask", required=True, help="RLE JSON ({size, counts} or an annotation)")
    p.add_argument("--weights", help="weight file (default: seeded weights)")
    p.add_argument("--dim", type=int, default=64, help="embedding width for seeded weights")
    p.add_argument("--token-len", type=int, default=8, choices=(4, 8, 16))
    p.add_argument("--save-weights", help="also write the weights used")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--bert-endpoint")
    p.add_argument("--bert-model", default="roberta-large")
    p.add_argument("--stage", default="unique", help="caption stage to read from record files")
    p.add_argument("--percent", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export", parents=[common], help="write dataset.jsonl from a finished workdir")
    p.add_argument("--out")

    p = sub.add_parser("mock-server", parents=[common], help="serve scripted responses")
    p.add_argument("--script", help="MockScript JSON (default: echo everything)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8700)
    p.add_argument("--log", help="append request bodies (without images) to this JSONL file")
    return parser


def resolve_config(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.settings or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UrecaError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    flag_map = {
        "workdir": "run.workdir",
        "seed": "run.seed",
        "mllm_endpoint": "mllm.endpoint",
        "embed_endpoint": "embed.endpoint",
        "judge_endpoint": "judge.endpoint",
        "prompts_dir": "run.prompts_dir",
        "verify": "run.verify",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return load_config(config_path(args.config), overrides)


def make_clients(cfg: RunConfig) -> Clients:
    mllm = HttpMllmClient(
        cfg.mllm.endpoint, cfg.mllm.model, cfg.mllm.timeout, cfg.retry,
        temperature=cfg.mllm.temperature, max_tokens=cfg.mllm.max_tokens,
    )
    embed = HttpEmbeddingClient(cfg.embed.endpoint, cfg.embed.model, cfg.embed.timeout, cfg.retry) if cfg.embed.endpoint else None
    judge = None
    if cfg.run.verify:
        judge = HttpMllmClient(
            cfg.judge.endpoint or cfg.mllm.endpoint, cfg.judge.model, cfg.judge.timeout, cfg.retry,
            temperature=cfg.judge.temperature, max_tokens=cfg.judge.max_tokens,
        )
    return Clients(mllm, embed, judge)


def _image_for(entry, input_path: str, image_dir: str | None, explicit: str | None = None):
    if explicit:
        path = Path(explicit)
    else:
        base = Path(image_dir) if image_dir else Path(input_path).parent
        path = base / entry.file_name
    if not entry.file_name and not explicit:
        raise UrecaError(f"{input_path}: no image file_name and no --image given")
    img = load_image(path)
    if img.shape[:2] != (entry.height, entry.width):
        raise UrecaError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, annotation says {entry.width}x{entry.height}")
    return img, str(path)


def cmd_tree(args, cfg: RunConfig) -> int:
    entry = load_entry(args.input)
    tree = build_tree(entry.decode_masks(), cfg.tree, entry.image_id, entry.width, entry.height)
    text = json.dumps(tree.to_json())
    if args.out == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    log.info("image %s: %d nodes", tree.image_id, len(tree))
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    entry = load_entry(args.input)
    img, _ = _image_for(entry, args.input, None, args.image)
    tree = build_tree(entry.decode_masks(), cfg.tree, entry.image_id, entry.width, entry.height)
    out = Path(args.out) if args.out else cfg.workdir / "renders"
    d = out / entry.image_id
    nodes = args.nodes if args.nodes else [n for n in sorted(tree.nodes)]
    for nid in nodes:
        mask = tree.mask(nid)
        if nid != tree.root_id:
            views = stage2_images(tree, img, nid, cfg.render)
            save_png(views["context"], d / f"{nid}_short_context.png")
            save_png(views["crop"], d / f"{nid}_short_crop.png")
        save_png(render_stage3_view(img, mask, cfg.render), d / f"{nid}_dense.png")
        save_png(render_set_of_mark(img, [mask], cfg.render), d / f"{nid}_som.png")
    log.info("wrote renders for %d nodes to %s", len(nodes), d)
    return EXIT_OK


def _annotate(args, cfg: RunConfig, refine: bool) -> int:
    clients = make_clients(cfg)
    templates = load_templates(cfg.run.prompts_dir)
    pcfg = cfg.pipeline()
    sink = CaptionSink(cfg.workdir / "captions.jsonl")
    jobs = []
    for path in args.inputs:
        entry = load_entry(path)
        if not refine and not args.resume and (image_dir(cfg.workdir, entry.image_id) / "state.json").exists():
            raise UrecaError(f"{cfg.workdir} already holds a run for image {entry.image_id}; pass --resume to continue it")
        jobs.append((entry, path))

    def one(job):
        entry, path = job
        img, img_path = _image_for(entry, path, args.image_dir)
        if refine:
            return rerun_stage4(entry, img, pcfg, clients, cfg.workdir, templates, sink)
        return run_pipeline(entry, img, pcfg, clients, cfg.workdir, img_path, templates, sink)

    with ThreadPoolExecutor(max_workers=cfg.concurrency.image) as pool:
        bundles = list(pool.map(one, jobs))
    failures = sum(b.hard_failures for b in bundles)
    for b in bundles:
        counts = {s: len(r) for s, r in b.records.items()}
        log.info("image %s: %s, %d hard failures", b.image_id, counts, b.hard_failures)
    if failures:
        log.error("%d hard failures (see state.json failure logs)", failures)
        return EXIT_SERVICE
    return EXIT_OK


def cmd_encode(args, cfg: RunConfig) -> int:
    obj = json.loads(Path(args.mask).read_text(encoding="utf-8"))
    if "segmentation" in obj:
        obj = obj["segmentation"]
    mask = rle_decode(RleMask.from_json(obj))
    weights = load_weights(args.weights) if args.weights else seeded_weights(cfg.run.seed, args.dim, args.token_len)
    if args.save_weights:
        from .encoder import save_weights

        save_weights(weights, args.save_weights)
    grid = split_mask(mask, cfg.split)
    tokens = encode_mask(mask, weights, cfg.split)
    save_tokens(tokens, args.out)
    log.info("%d tiles (%dx%d grid%s) -> tokens %s", grid.n_tiles, grid.rows, grid.cols, ", resized" if grid.resized else "", tokens.shape)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    client = None
    if args.bert_endpoint:
        client = HttpEmbeddingClient(args.bert_endpoint, args.bert_model, cfg.embed.timeout, cfg.retry)
    report = evaluate_corpus(args.pred, args.ref, client, args.percent, args.stage or None)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
    means = ", ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in report.means.items())
    log.info("%d pairs: %s", report.pair_count, means)
    if report.unmatched_pred or report.unmatched_ref:
        log.warning("unmatched keys: %d pred-only, %d ref-only", len(report.unmatched_pred), len(report.unmatched_ref))
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    res = export_workdir(cfg.workdir, args.out)
    log.info("exported %d images, %d warnings", res.lines, res.warnings)
    if res.warnings:
        print(f"warnings: {res.warnings}", file=sys.stderr)
    return EXIT_OK


def cmd_mock_server(args, cfg: RunConfig) -> int:
    script = MockScript.load(args.script) if args.script else MockScript()
    server = MockServer(script, args.host, args.port, seed=cfg.run.seed, log_file=args.log)
    print(f"mock server listening on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


COMMANDS = {
    "tree": cmd_tree,
    "render": cmd_render,
    "annotate": lambda a, c: _annotate(a, c, refine=False),
    "refine": lambda a, c: _annotate(a, c, refine=True),
    "encode": cmd_encode,
    "eval": cmd_eval,
    "export": cmd_export,
    "mock-server": cmd_mock_server,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0) or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if level > logging.DEBUG:
        logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        cfg = resolve_config(args)
        if getattr(args, "command") in ("annotate", "refine"):
            log.info("similarity.tau=%s max_group=%s", cfg.similarity.tau, cfg.similarity.max_group)
        return COMMANDS[args.command](args, cfg)
    except ClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (UrecaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
