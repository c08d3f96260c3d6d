"""Scripted, deterministic stand-in for the MLLM, judge and embedding services.

Script format (JSON)::

    {
      "rules": [
        {"route": "complete", "template": "top_down", "image": "*", "node": "3",
         "responses": ["first reply", "reply for every later call"]},
        {"route": "judge", "response": {"accurate": true, "unique": false}},
        {"route": "complete", "node": "7", "status": 500}
      ],
      "catch_all": "echo",
      "embed": {"grid": 4, "jitter": 0.0, "seed": 0}
    }

``route`` is ``complete``, ``judge`` (verify-template prompts, or any call
under ``/judge``) or ``embed``. Missing match fields mean "any". The first
matching rule answers; ``responses`` advance per (rule, image, node) and
stick on the last entry. Text responses may use ``{template}``, ``{image}``,
``{node}`` and ``{count}`` placeholders; dict responses are sent as JSON text.
Without a match and with ``catch_all`` null the server answers 500.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from .prompts import parse_marker

log = logging.getLogger(__name__)

JUDGE_OK = {"accurate": True, "unique": True}


@dataclass
class MockScript:
    rules: list[dict] = field(default_factory=list)
    catch_all: str | None = "echo"
    embed: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "MockScript":
        return cls(list(obj.get("rules", [])), obj.get("catch_all", "echo"), dict(obj.get("embed", {})))

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def echo_text(template: str, image: str, node: str) -> str:
    return f"{template} caption for {image}/{node}"


def image_embedding(png_bytes: bytes, grid: int = 4) -> np.ndarray:
    """Mean-centred coarse colour layout plus a small constant term (never zero).

    Centring keeps unrelated crops apart; raw colours are all positive and
    would give every pair a high cosine.
    """
    with Image.open(io.BytesIO(png_bytes)) as im:
        small = im.convert("RGB").resize((grid, grid), Image.Resampling.BOX)
    vec = np.asarray(small, dtype=np.float64).ravel() / 255.0
    return np.concatenate([vec - vec.mean(), [0.05]])


def token_embedding(token: str, width: int = 16) -> np.ndarray:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    vec = np.frombuffer(digest[:width], dtype=np.uint8).astype(np.float64) - 127.5
    return vec if np.any(vec) else np.ones(width)


class MockBackend:
    """Request matching and bookkeeping, independent of the HTTP layer."""

    def __init__(self, script: MockScript, seed: int = 0):
        self.script = script
        self.seed = seed
        self.requests: list[dict] = []
        self._counts: dict[tuple, int] = {}
        self._lock = threading.Lock()

    def _match(self, route: str, template: str, image: str, node: str):
        for idx, rule in enumerate(self.script.rules):
            if rule.get("route", route) != route:
                continue
            if any(rule.get(k, "*") not in ("*", v) for k, v in (("template", template), ("image", image), ("node", node))):
                continue
            return idx, rule
        return None, None

    def _respond(self, idx: int, rule: dict, template: str, image: str, node: str):
        key = (idx, image, node)
        with self._lock:
            count = self._counts.get(key, 0)
            self._counts[key] = count + 1
        if "status" in rule and rule["status"] != 200:
            return rule["status"], {"error": "scripted failure"}
        responses = rule.get("responses")
        resp = responses[min(count, len(responses) - 1)] if responses else rule.get("response")
        if resp is None:
            resp = echo_text(template, image, node)
        if isinstance(resp, (dict, list)):
            return 200, {"text": json.dumps(resp)}
        return 200, {"text": str(resp).format(template=template, image=image, node=node, count=count)}

    def handle(self, path: str, body: dict) -> tuple[int, dict]:
        if path.endswith("/v1/embed"):
            status, resp, matched = self._embed(body)
        elif path.endswith("/v1/complete"):
            status, resp, matched = self._complete(path, body)
        else:
            status, resp, matched = 404, {"error": f"unknown route {path}"}, None
        with self._lock:
            self.requests.append({"path": path, "body": body, "status": status, "matched": matched})
        return status, resp

    def _complete(self, path: str, body: dict):
        prompt = body.get("prompt", "")
        marker = parse_marker(prompt) or ("", "", "")
        template, image, node = marker
        route = "judge" if path.startswith("/judge") or template == "verify" else "complete"
        idx, rule = self._match(route, template, image, node)
        if rule is not None:
            status, resp = self._respond(idx, rule, template, image, node)
            return status, resp, idx
        if self.script.catch_all == "echo":
            if route == "judge":
                return 200, {"text": json.dumps(JUDGE_OK)}, "catch_all"
            if not template:
                return 200, {"text": "echo: " + prompt[:40]}, "catch_all"
            return 200, {"text": echo_text(template, image, node)}, "catch_all"
        return 500, {"error": "no rule matched and no catch-all"}, None

    def _embed(self, body: dict):
        idx, rule = self._match("embed", "", "", "")
        if rule is not None and rule.get("status", 200) != 200:
            return rule["status"], {"error": "scripted failure"}, idx
        if rule is None and self.script.catch_all is None:
            return 500, {"error": "no rule matched and no catch-all"}, None
        opts = {**self.script.embed, **(rule or {})}
        if "tokens" in body:
            vecs = [token_embedding(t) for t in body["tokens"]]
            return 200, {"vectors": [v.tolist() for v in vecs]}, idx if rule else "catch_all"
        if "vector" in opts:
            return 200, {"vector": list(opts["vector"])}, idx
        png = base64.b64decode(body["image_b64"])
        vec = image_embedding(png, int(opts.get("grid", 4)))
        jitter = float(opts.get("jitter", 0.0))
        if jitter:
            h = int.from_bytes(hashlib.sha256(png).digest()[:8], "little")
            rng = np.random.default_rng([int(opts.get("seed", self.seed)), h])
            vec = vec + rng.normal(0.0, jitter, size=vec.shape)
        return 200, {"vector": vec.tolist()}, idx if rule else "catch_all"

    def bodies(self, route_suffix: str = "/v1/complete") -> list[dict]:
        with self._lock:
            return [r["body"] for r in self.requests if r["path"].endswith(route_suffix)]


def _handler_for(backend: MockBackend, log_file: Path | None):
    lock = threading.Lock()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw or b"{}")
            except json.JSONDecodeError:
                self._send(400, {"error": "invalid JSON"})
                return
            status, resp = backend.handle(self.path, body)
            if log_file is not None:
                slim = {k: v for k, v in body.items() if k != "images_b64" and k != "image_b64"}
                slim["n_images"] = len(body.get("images_b64", [])) + ("image_b64" in body)
                with lock, open(log_file, "a", encoding="utf-8") as f:
                    f.write(json.dumps({"path": self.path, "status": status, "body": slim}) + "\n")
            self._send(status, resp)

        def _send(self, status, obj):
            data = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, fmt, *args):
            log.debug("mock: " + fmt, *args)

    return Handler


class MockServer:
    """Threaded HTTP server around a :class:`MockBackend`; port 0 picks a free port."""

    def __init__(self, script: MockScript | None = None, host: str = "127.0.0.1", port: int = 0, seed: int = 0, log_file: str | Path | None = None):
        self.backend = MockBackend(script or MockScript(), seed)
        self._httpd = ThreadingHTTPServer((host, port), _handler_for(self.backend, Path(log_file) if log_file else None))
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def requests(self) -> list[dict]:
        return self.backend.requests

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
