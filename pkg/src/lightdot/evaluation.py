"""Recall@K, average recall, and the retrieval evaluation over a corpus split.

Image retrieval (IR): caption queries against an image pool. Text retrieval
(TR): image queries against a caption pool. A query hits at K if any of its
gold ids is in its top-K list.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoders import DualEncoder, encode_images, encode_texts
from .index import EmbeddingIndex, RetrievalResult, batch_top_k, build_index
from .rerank import CrossScorer, retrieve_rerank

KS = (1, 5, 10)
RECALL_FIELDS = ("ir_r1", "ir_r5", "ir_r10", "tr_r1", "tr_r5", "tr_r10")


def recall_at_k(results: Sequence, gold: Sequence, k: int) -> float:
    """Fraction of queries whose top-``k`` contains at least one gold id.

    ``results`` items are RetrievalResult or id sequences, best first.
    """
    if len(results) != len(gold):
        raise ValueError(f"{len(results)} result lists for {len(gold)} gold sets")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no queries")
    hits = 0
    for res, g in zip(results, gold):
        g = {int(x) for x in g}
        if not g:
            raise ValueError("empty gold set")
        ids = res.ids if isinstance(res, RetrievalResult) else res
        hits += any(int(i) in g for i in list(ids)[:k])
    return hits / len(results)


def average_recall(recalls: Sequence[float] | Mapping[str, float]) -> float:
    """Mean of the six recalls (R@1/5/10 for both directions)."""
    vals = [recalls[f] for f in RECALL_FIELDS] if isinstance(recalls, Mapping) else list(recalls)
    if len(vals) != 6:
        raise ValueError(f"need 6 recalls, got {len(vals)}")
    return float(sum(vals) / 6.0)


@dataclass(frozen=True)
class EvalReport:
    ir_r1: float
    ir_r5: float
    ir_r10: float
    tr_r1: float
    tr_r5: float
    tr_r10: float
    ar: float
    pool_size: int
    queries: int
    config_hash: str
    split: str = "test"
    rerank: str = "none"

    def __post_init__(self):
        for f in RECALL_FIELDS:
            if not 0.0 <= getattr(self, f) <= 1.0:
                raise ValueError(f"{f} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """``key=value`` lines in field order."""
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())

    def to_tsv(self) -> str:
        d = self.to_dict()
        return "\t".join(d) + "\n" + "\t".join(_fmt(v) for v in d.values()) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class Pool:
    """Candidate ids (both modalities share pair ids) and the query ids."""

    candidates: list[int]
    queries: list[int]


def build_full_pool(corpus, split: str = "test") -> Pool:
    """Every pair id across all splits as candidates; queries stay the ``split`` ids."""
    cands = sorted({i for s in ("train", "val", "test") for i in corpus.ids(s)})
    return Pool(cands, list(corpus.ids(split)))


def split_pool(corpus, split: str = "test") -> Pool:
    ids = list(corpus.ids(split))
    return Pool(ids, ids)


def _direction(results: list, gold: list[set[int]]) -> list[float]:
    return [recall_at_k(results, gold, k) for k in KS]


def evaluate(model: DualEncoder, corpus, split: str = "test", full_pool: bool = False,
             scorer: CrossScorer | None = None, m: int = 50) -> EvalReport:
    """R@1/5/10 both ways on ``split``; with ``scorer`` each list is re-ranked from the top ``m``."""
    pool = build_full_pool(corpus, split) if full_pool else split_pool(corpus, split)
    if not pool.queries:
        raise ValueError(f"split {split!r} has no queries")
    ids = np.asarray(pool.candidates, dtype=np.uint64)
    img_index = build_index(encode_images(model, corpus.regions(pool.candidates)), ids)
    txt_index = build_index(encode_texts(model, corpus.texts(pool.candidates)), ids)
    q_text = encode_texts(model, corpus.texts(pool.queries))
    q_img = encode_images(model, corpus.regions(pool.queries))
    gold = [{q} for q in pool.queries]
    kmax = min(max(KS), len(pool.candidates))
    if scorer is None:
        ir = batch_top_k(img_index, q_text, kmax)
        tr = batch_top_k(txt_index, q_img, kmax)
    else:
        mm = min(m, len(pool.candidates))
        k = min(kmax, mm)
        ir = [retrieve_rerank(img_index, v, scorer, mm, k, query=t, lookup=lambda i: corpus.examples[i].regions)
              for v, t in zip(q_text, corpus.texts(pool.queries))]
        tr = [retrieve_rerank(txt_index, v, scorer, mm, k, query=r, lookup=lambda i: corpus.examples[i].tokens)
              for v, r in zip(q_img, corpus.regions(pool.queries))]
    rec = _direction(ir, gold) + _direction(tr, gold)
    return EvalReport(*rec, ar=average_recall(rec), pool_size=len(pool.candidates), queries=len(pool.queries),
                      config_hash=model.config.hash(), split=split,
                      rerank="none" if scorer is None else f"{scorer.name}:m={m}")


def validation_ar(model: DualEncoder, corpus, split: str = "val") -> float:
    if not corpus.ids(split):
        return math.nan
    return evaluate(model, corpus, split).ar
