"""HTTP clients for the annotation MLLM, the judge and the embedding service."""

from __future__ import annotations

import base64
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .errors import ClientError

log = logging.getLogger(__name__)


class MllmClient(Protocol):
    model: str

    def complete(self, prompt: str, images: Sequence[bytes]) -> str: ...


class EmbeddingClient(Protocol):
    model: str

    def embed(self, image_png: bytes) -> np.ndarray: ...

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray: ...


@dataclass(frozen=True)
class RetryPolicy:
    base_delay: float = 1.0
    factor: float = 2.0
    max_attempts: int = 5

    def delays(self):
        for k in range(self.max_attempts - 1):
            yield self.base_delay * self.factor**k


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


@dataclass
class _HttpBase:
    endpoint: str
    model: str
    timeout: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        self.endpoint = self.endpoint.rstrip("/")
        self._http = httpx.Client(timeout=self.timeout)

    def close(self):
        self._http.close()

    def _post(self, path: str, body: dict, check: Callable[[dict], object]):
        """POST with exponential backoff; ``check`` extracts the result or raises ValueError."""
        url = f"{self.endpoint}{path}"
        delays = list(self.retry.delays())
        last = ""
        for attempt in range(self.retry.max_attempts):
            try:
                resp = self._http.post(url, json=body)
                if resp.status_code == 200:
                    return check(resp.json())
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
            except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
                last = f"{type(exc).__name__}: {exc}"
            log.debug("%s attempt %d failed: %s", url, attempt + 1, last)
            if attempt < len(delays):
                self.sleep(delays[attempt])
        raise ClientError(f"{url} failed after {self.retry.max_attempts} attempts ({last})")


@dataclass
class HttpMllmClient(_HttpBase):
    temperature: float = 0.2
    max_tokens: int = 512

    def complete(self, prompt: str, images: Sequence[bytes]) -> str:
        body = {
            "model": self.model,
            "prompt": prompt,
            "images_b64": [b64(im) for im in images],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

        def check(obj):
            text = obj["text"]
            if not isinstance(text, str) or not text.strip():
                raise ValueError("empty completion")
            return text

        return self._post("/v1/complete", body, check)


def _vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0 or not np.isfinite(arr).all():
        raise ValueError("embedding must be a non-empty finite vector")
    return arr


@dataclass
class HttpEmbeddingClient(_HttpBase):
    def embed(self, image_png: bytes) -> np.ndarray:
        body = {"model": self.model, "image_b64": b64(image_png)}
        return self._post("/v1/embed", body, lambda obj: _vector(obj["vector"]))

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        """One vector per token, via the ``tokens`` request variant."""
        body = {"model": self.model, "tokens": list(tokens)}

        def check(obj):
            vecs = [_vector(v) for v in obj["vectors"]]
            if len(vecs) != len(tokens):
                raise ValueError(f"expected {len(tokens)} vectors, got {len(vecs)}")
            return np.stack(vecs) if vecs else np.zeros((0, 0))

        return self._post("/v1/embed", body, check)
