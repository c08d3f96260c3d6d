"""Shared test plumbing: mock-backed clients and an interruptible wrapper."""

import base64
import io

import numpy as np
from PIL import Image

from ureca_forge.clients import HttpEmbeddingClient, HttpMllmClient, RetryPolicy
from ureca_forge.pipeline import Clients, PipelineConfig

FAST_RETRY = RetryPolicy(base_delay=0.001, factor=1.0, max_attempts=2)


class Interrupted(BaseException):
    """Stands in for a kill signal; not an Exception, so nothing swallows it."""


class CountdownClient:
    """Delegates to ``inner`` and raises :class:`Interrupted` on call ``limit + 1``."""

    def __init__(self, inner, limit: int):
        self.inner, self.limit, self.calls = inner, limit, 0
        self.model = inner.model

    def complete(self, prompt, images):
        if self.calls >= self.limit:
            raise Interrupted()
        self.calls += 1
        return self.inner.complete(prompt, images)


def http_clients(url: str, judge: bool = False) -> Clients:
    mllm = HttpMllmClient(url, "mock-mllm", 10.0, FAST_RETRY)
    embed = HttpEmbeddingClient(url, "mock-embed", 10.0, FAST_RETRY)
    jc = HttpMllmClient(url + "/judge", "mock-judge", 10.0, FAST_RETRY) if judge else None
    return Clients(mllm, embed, jc)


def fixed_cfg(**kw) -> PipelineConfig:
    return PipelineConfig(fixed_timestamp=1_700_000_000, **kw)


def decode_png(b64: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(b64))) as im:
        return np.asarray(im.convert("RGB"))
