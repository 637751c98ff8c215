"""Per-query latency of dense retrieval, dense+rerank, and exhaustive cross-attention.

Timed sections include query encoding and exclude index build and candidate
preparation, which happen offline. Each configuration runs ``warmup`` untimed
queries first, then ``reps`` timed passes over the query set; ``seconds`` is
the median over passes of the mean per-query time.

When the projected cost of a (method, pool) cell exceeds ``budget`` seconds,
the cell is not run: its time is extrapolated linearly from the largest pool
measured for that method and the row is flagged ``estimated``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .encoders import DualEncoder, RegionSequence, TokenSequence, encode_images, encode_texts
from .index import EmbeddingIndex, batch_top_k, build_index, top_k
from .rerank import CrossAttentionScorer, retrieve_rerank
from .synth import sample_regions

METHODS = ("dense", "dense+rerank", "cross")
DEFAULT_M = 50


@dataclass(frozen=True)
class LatencyRow:
    method: str
    pool: int
    queries: int
    seconds: float  # median over repetitions of mean per-query time
    mean: float
    median: float
    p95: float
    speedup: float = math.nan  # cross-attention seconds / this method's seconds
    estimated: bool = False


@dataclass
class LatencyReport:
    rows: list[LatencyRow] = field(default_factory=list)
    reps: int = 5
    threads: int = 1
    config_hash: str = ""
    notes: dict = field(default_factory=dict)

    def get(self, method: str, pool: int) -> LatencyRow:
        for r in self.rows:
            if r.method == method and r.pool == pool:
                return r
        raise KeyError((method, pool))

    def to_text(self) -> str:
        lines = [f"reps={self.reps}", f"threads={self.threads}", f"config_hash={self.config_hash}"]
        lines += [f"note.{k}={v}" for k, v in sorted(self.notes.items())]
        for r in self.rows:
            for k, v in asdict(r).items():
                if k not in ("method", "pool"):
                    lines.append(f"{r.method}.{r.pool}.{k}={v!r}" if isinstance(v, float) else
                                 f"{r.method}.{r.pool}.{k}={v}")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        names = list(LatencyRow.__dataclass_fields__)
        out = ["\t".join(names)]
        out += ["\t".join(str(getattr(r, n)) for n in names) for r in self.rows]
        return "\n".join(out) + "\n"

    def to_json_lines(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.rows)


def build_pool(corpus, size: int, seed: int = 0) -> list[RegionSequence]:
    """Corpus images first, then synthetic extras from the same concepts up to ``size``."""
    base = corpus.regions(corpus.ids())[:size]
    return base + sample_regions(corpus, size - len(base), seed) if size > len(base) else base


def _stats(per_rep: list[list[float]]) -> tuple[float, float, float, float]:
    flat = np.concatenate([np.asarray(r) for r in per_rep])
    rep_means = [float(np.mean(r)) for r in per_rep]
    return float(np.median(rep_means)), float(flat.mean()), float(np.median(flat)), float(np.percentile(flat, 95))


def _time_queries(fn, queries: Sequence, reps: int, warmup: int) -> list[list[float]]:
    for q in queries[:warmup]:
        fn(q)
    out = []
    for _ in range(reps):
        times = []
        for q in queries:
            t0 = time.perf_counter()
            fn(q)
            times.append(time.perf_counter() - t0)
        out.append(times)
    return out


def bench_latency(model: DualEncoder, corpus, pools: Sequence[int], queries: int = 5,
                  methods: Sequence[str] = METHODS, reps: int = 5, warmup: int = 1, m: int = DEFAULT_M,
                  scorer: CrossAttentionScorer | None = None, budget: float = 120.0, seed: int = 0,
                  batched: bool = True, threads: int = 1) -> LatencyReport:
    """Caption queries against image pools of the given sizes (ascending)."""
    pools = list(pools)
    if pools != sorted(pools) or not pools or pools[0] < 1:
        raise ValueError("pool sizes must be positive and ascending")
    bad = [x for x in methods if x not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
    scorer = scorer or CrossAttentionScorer.create(model.config, seed=seed)
    qids = list(corpus.ids("test"))[:queries] or list(corpus.ids())[:queries]
    texts: list[TokenSequence] = corpus.texts(qids)
    report = LatencyReport(reps=reps, threads=threads, config_hash=model.config.hash())
    report.notes["timing"] = "single-query wall clock; query encoding included; index build excluded"
    largest = max(pools)
    images = build_pool(corpus, largest, seed)
    vecs = encode_images(model, images)
    last: dict[str, tuple[int, float]] = {}

    for pool in pools:
        items = images[:pool]
        index = build_index(vecs[:pool], np.arange(pool, dtype=np.uint64))
        row_secs: dict[str, float] = {}
        for method in methods:
            prev = last.get(method)
            if prev is not None:
                projected = prev[1] * pool / prev[0]
                if projected * len(texts) * (reps + 1) > budget:
                    row_secs[method] = projected
                    report.rows.append(LatencyRow(method, pool, len(texts), projected, projected, projected,
                                                  projected, estimated=True))
                    continue
            fn = _method_fn(method, model, index, items, scorer, m)
            scanned = index.rows_scanned
            per_rep = _time_queries(fn, texts, reps, warmup)
            if method != "cross":
                calls = (reps * len(texts) + min(warmup, len(texts)))
                if index.rows_scanned - scanned != calls * pool:
                    raise AssertionError("dense scan did not visit every row")
            secs, mean, med, p95 = _stats(per_rep)
            row_secs[method] = secs
            last[method] = (pool, secs)
            report.rows.append(LatencyRow(method, pool, len(texts), secs, mean, med, p95))
        if batched and "dense" in methods:
            report.rows.append(_batched_row(model, index, texts, reps, pool, threads))
        cross = row_secs.get("cross")
        if cross is not None:
            report.rows = [
                LatencyRow(**{**asdict(r), "speedup": cross / r.seconds}) if r.pool == pool else r
                for r in report.rows
            ]
    return report


def _method_fn(method: str, model: DualEncoder, index: EmbeddingIndex, items, scorer: CrossAttentionScorer, m: int):
    if method == "dense":
        return lambda q: top_k(index, encode_texts(model, [q])[0], 10)
    if method == "dense+rerank":
        mm = min(m, index.count)
        return lambda q: retrieve_rerank(index, encode_texts(model, [q])[0], scorer, mm, min(10, mm), query=q,
                                         lookup=lambda i: items[i])
    prepared = scorer.prepare(items)
    return lambda q: np.argsort(-scorer.score_prepared(q, prepared), kind="stable")[:10]


def _batched_row(model, index, texts, reps: int, pool: int, threads: int) -> LatencyRow:
    """All queries encoded as one batch and scanned together; reported per query."""
    times = []
    for _ in range(reps + 1):
        t0 = time.perf_counter()
        batch_top_k(index, encode_texts(model, texts), 10, threads=threads)
        times.append((time.perf_counter() - t0) / len(texts))
    times = times[1:]
    med = float(np.median(times))
    return LatencyRow("dense-batched", pool, len(texts), med, float(np.mean(times)), med,
                      float(np.percentile(times, 95)))


def scorer_call_seconds(scorer: CrossAttentionScorer, corpus, n: int = DEFAULT_M, reps: int = 5, seed: int = 0) -> float:
    """Seconds for one query's worth of ``n`` scorer calls (the rerank stage cost)."""
    q = corpus.texts(corpus.ids())[:1][0]
    items = build_pool(corpus, n, seed)
    scorer.score_many(q, items)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        scorer.score_many(q, items)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
