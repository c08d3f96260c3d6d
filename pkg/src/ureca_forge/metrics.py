"""Single-reference caption metrics: BLEU@1-4, ROUGE-L, METEOR and BERTScore.

METEOR runs only the exact and Porter-stem matching stages (no synonym
table). BERTScore uses greedy cosine matching without baseline rescaling.
"""

from __future__ import annotations

import json
import logging
import math
import string
import unicodedata
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from .errors import ClientError, EmptyJoinError, MalformedInputError

log = logging.getLogger(__name__)

METRIC_NAMES = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor", "bert_f")


def tokenize(text: str) -> list[str]:
    text = unicodedata.normalize("NFC", text).lower()
    tokens = (t.strip(string.punctuation) for t in text.split())
    return [t for t in tokens if t]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def clipped_counts(cand: Sequence[str], ref: Sequence[str], n: int) -> tuple[int, int]:
    """(clipped matching n-grams, total candidate n-grams)."""
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    return sum(min(k, r[g]) for g, k in c.items()), sum(c.values())


def bleu(cand: Sequence[str], ref: Sequence[str], max_n: int = 4) -> list[float]:
    """BLEU@1..max_n for one candidate/reference pair."""
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    if not cand:
        return [0.0] * max_n
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    logs, out = [], []
    for n in range(1, max_n + 1):
        match, total = clipped_counts(cand, ref, n)
        if match == 0 or total == 0:
            logs.append(-math.inf)
        else:
            logs.append(math.log(match / total))
        if math.isinf(min(logs)):
            out.append(0.0)
        else:
            out.append(bp * math.exp(sum(logs) / n))
    return out


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cand: Sequence[str], ref: Sequence[str]) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer.stem(word)


def _align_stage(cand_keys, ref_keys, links: dict[int, int]) -> None:
    """Add one-to-one links between unaligned positions with equal keys.

    Repeatedly links the longest run of equal keys still free on both sides
    (leftmost in the candidate, then in the reference, on ties). Every
    matchable pair ends up linked, and long runs keep the chunk count low.
    """
    used = set(links.values())
    nc, nr = len(cand_keys), len(ref_keys)
    while True:
        best = None
        for i in range(nc):
            if i in links:
                continue
            for j in range(nr):
                if j in used or ref_keys[j] != cand_keys[i]:
                    continue
                k = 1
                while (
                    i + k < nc
                    and j + k < nr
                    and i + k not in links
                    and j + k not in used
                    and cand_keys[i + k] == ref_keys[j + k]
                ):
                    k += 1
                if best is None or k > best[0]:
                    best = (k, i, j)
        if best is None:
            return
        k, i, j = best
        for d in range(k):
            links[i + d] = j + d
            used.add(j + d)


def meteor_alignment(cand: Sequence[str], ref: Sequence[str]) -> dict[int, int]:
    links: dict[int, int] = {}
    _align_stage(list(cand), list(ref), links)
    _align_stage([stem(t) for t in cand], [stem(t) for t in ref], links)
    return links


def count_chunks(links: dict[int, int]) -> int:
    chunks, prev = 0, None
    for i in sorted(links):
        j = links[i]
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(cand: Sequence[str], ref: Sequence[str]) -> float:
    links = meteor_alignment(cand, ref)
    m = len(links)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(links) / m) ** 3
    return fmean * (1 - penalty)


def greedy_match_f(cand_vecs: np.ndarray, ref_vecs: np.ndarray) -> float:
    """BERTScore F1 from per-token vectors of candidate and reference."""
    if len(cand_vecs) == 0 or len(ref_vecs) == 0:
        return 0.0
    c = cand_vecs / np.linalg.norm(cand_vecs, axis=1, keepdims=True)
    r = ref_vecs / np.linalg.norm(ref_vecs, axis=1, keepdims=True)
    sims = r @ c.T  # (ref, cand)
    recall = float(sims.max(axis=1).mean())
    precision = float(sims.max(axis=0).mean())
    if precision + recall <= 0:
        return 0.0
    return min(1.0, max(0.0, 2 * precision * recall / (precision + recall)))


def bert_score(cand: Sequence[str], ref: Sequence[str], embed_client) -> float:
    if not cand or not ref:
        return 0.0
    return greedy_match_f(embed_client.embed_tokens(list(cand)), embed_client.embed_tokens(list(ref)))


def score_pair(cand_text: str, ref_text: str, embed_client=None) -> dict[str, float | None]:
    cand, ref = tokenize(cand_text), tokenize(ref_text)
    b = bleu(cand, ref, 4)
    scores: dict[str, float | None] = {f"bleu{n}": b[n - 1] for n in range(1, 5)}
    scores["rouge_l"] = rouge_l(cand, ref)
    scores["meteor"] = meteor(cand, ref)
    scores["bert_f"] = None
    if embed_client is not None:
        try:
            scores["bert_f"] = bert_score(cand, ref, embed_client)
        except ClientError as exc:
            log.warning("BERTScore unavailable for pair: %s", exc)
    return scores


@dataclass
class MetricReport:
    pairs: list[dict] = field(default_factory=list)  # {"image_id", "node_id", **scores}
    means: dict[str, float | None] = field(default_factory=dict)
    pair_count: int = 0
    unmatched_pred: list[list] = field(default_factory=list)
    unmatched_ref: list[list] = field(default_factory=list)
    scale: float = 1.0

    def to_json(self) -> dict:
        return {
            "pair_count": self.pair_count,
            "scale": self.scale,
            "means": self.means,
            "pairs": self.pairs,
            "unmatched": {"pred_only": self.unmatched_pred, "ref_only": self.unmatched_ref},
        }


def read_captions(path: str | Path, stage: str | None = "unique") -> dict[tuple[str, int], str]:
    """Key (image_id, node_id) -> caption text.

    Accepts caption records (``text`` + optional ``stage``), flat
    ``{"image_id", "node_id", "caption"}`` lines, or exported dataset lines
    with a ``regions`` list.
    """
    out: dict[tuple[str, int], str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedInputError(f"{path}:{lineno}: {exc.msg}") from None
            if "regions" in obj:
                for reg in obj["regions"]:
                    text = reg.get(f"{stage}_caption") if stage else reg.get("unique_caption")
                    if text:
                        out[(str(obj["image_id"]), int(reg["node_id"]))] = text
                continue
            if stage and "stage" in obj and obj["stage"] != stage:
                continue
            if obj.get("status") == "rejected":
                continue
            text = obj.get("text", obj.get("caption"))
            if text is None:
                raise MalformedInputError(f"{path}:{lineno}: no 'text' or 'caption' field")
            key = (str(obj["image_id"]), int(obj["node_id"]))
            if key in out:
                raise MalformedInputError(f"{path}:{lineno}: duplicate key {key}")
            out[key] = text
    return out


def evaluate_pairs(
    preds: dict[tuple[str, int], str],
    refs: dict[tuple[str, int], str],
    embed_client=None,
    percent: bool = False,
    workers: int = 4,
) -> MetricReport:
    keys = sorted(preds.keys() & refs.keys())
    if not keys:
        raise EmptyJoinError("predictions and references share no (image_id, node_id) keys")

    def one(key):
        return score_pair(preds[key], refs[key], embed_client)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, keys))
    scale = 100.0 if percent else 1.0
    pairs, means = [], {}
    for key, scores in zip(keys, results):
        pairs.append({"image_id": key[0], "node_id": key[1], **{k: (None if v is None else v * scale) for k, v in scores.items()}})
    for name in METRIC_NAMES:
        vals = [r[name] for r in results if r[name] is not None]
        means[name] = (sum(vals) / len(vals)) * scale if vals else None
    return MetricReport(
        pairs=pairs,
        means=means,
        pair_count=len(keys),
        unmatched_pred=[list(k) for k in sorted(preds.keys() - refs.keys())],
        unmatched_ref=[list(k) for k in sorted(refs.keys() - preds.keys())],
        scale=scale,
    )


def evaluate_corpus(pred_path, ref_path, embed_client=None, percent: bool = False, stage: str | None = "unique") -> MetricReport:
    return evaluate_pairs(read_captions(pred_path, stage), read_captions(ref_path, stage), embed_client, percent)
