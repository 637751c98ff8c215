"""Two-stage retrieval: dense top-M from the index, re-scored by a pluggable scorer.

A scorer is anything implementing :class:`CrossScorer`. Built-ins:

``dot``     inner product of the stored embeddings (consistent with stage 1)
``oracle``  1 for gold pairs, 0 otherwise (tests only)
``cross``   single-stream transformer over [image [CLS] + regions ; caption]

Stage-2 scores replace stage-1 scores outright; stage-1 score and then item id
only break ties.
"""

from __future__ import annotations

import abc
import math
from typing import Callable, Collection, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Graph, Tensor
from .encoders import (
    ModelConfig,
    RegionBatch,
    RegionSequence,
    TokenBatch,
    TokenSequence,
    _layer_shapes,
    image_embed,
    init_params,
    no_decay_names,
    text_embed,
    transformer_stack,
)
from .index import EmbeddingIndex, RetrievalResult, top_k
from .optim import AdamState, AdamWHyper, adamw_step, lr_schedule

CHUNK = 400


class ScorerError(RuntimeError):
    def __init__(self, candidate_id, cause: BaseException | None = None):
        self.candidate_id = candidate_id
        super().__init__(f"scorer failed on candidate {candidate_id}: {cause!r}")


class CrossScorer(abc.ABC):
    """Scores (query, candidate) pairs; ``calls`` counts pairs scored."""

    name = "base"
    latency_class = "slow"

    def __init__(self):
        self.calls = 0

    def resolve(self, item_id: int):
        """Map an index id to whatever this scorer takes as a candidate."""
        return item_id

    def score(self, query, candidate) -> float:
        return float(self.score_many(query, [candidate])[0])

    def score_many(self, query, candidates: Sequence) -> np.ndarray:
        self.calls += len(candidates)
        return np.asarray(self._score_many(query, candidates), dtype=np.float64)

    @abc.abstractmethod
    def _score_many(self, query, candidates: Sequence) -> np.ndarray:
        ...


SCORERS: dict[str, Callable[..., CrossScorer]] = {}


def register_scorer(name: str):
    def deco(factory):
        SCORERS[name] = factory
        return factory

    return deco


def make_scorer(name: str, **context) -> CrossScorer:
    if name not in SCORERS:
        raise KeyError(f"unknown scorer {name!r}; registered: {sorted(SCORERS)}")
    return SCORERS[name](**context)


class DotScorer(CrossScorer):
    """Inner product against the index's stored float32 vectors, same arithmetic as the scan."""

    name = "dot"
    latency_class = "fast"

    def __init__(self, index: EmbeddingIndex):
        super().__init__()
        self.index = index

    def resolve(self, item_id: int):
        return self.index.vector(item_id)

    def _score_many(self, query, candidates):
        vecs = np.ascontiguousarray(np.stack(candidates), dtype=np.float32)
        out = np.empty(len(candidates))
        kernels.scan_scores(vecs, np.ascontiguousarray(query, dtype=np.float64), out)
        return out


class OracleScorer(CrossScorer):
    name = "oracle"
    latency_class = "fast"

    def __init__(self, gold: Mapping[object, Collection[int]]):
        super().__init__()
        self.gold = {k: set(int(x) for x in v) for k, v in gold.items()}

    def _score_many(self, query, candidates):
        gold = self.gold[query]
        return np.array([1.0 if int(c) in gold else 0.0 for c in candidates])


# -- cross-attention scorer -------------------------------------------------------


def cross_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes = {
        "cross/img/cls": (d,), "cross/img/feat.w": (cfg.feat_dim, d), "cross/img/feat.b": (d,),
        "cross/img/geo.w": (7, d), "cross/img/geo.b": (d,), "cross/img/emb_ln.g": (d,), "cross/img/emb_ln.b": (d,),
        "cross/txt/tok_emb": (cfg.vocab, d), "cross/txt/pos_emb": (cfg.max_tokens + 1, d),
        "cross/txt/emb_ln.g": (d,), "cross/txt/emb_ln.b": (d,),
        "cross/type_emb": (2, d),
    }
    shapes.update(_layer_shapes("cross/", cfg))
    shapes["cross/match.w"] = (d, 1)
    shapes["cross/match.b"] = (1,)
    return shapes


def cross_logits(P: Mapping[str, Tensor], cfg: ModelConfig, regions: RegionBatch, tokens: TokenBatch) -> Tensor:
    """Matching logit per row for paired batches of equal size."""
    img = image_embed(P, regions, prefix="cross/img/") + P["cross/type_emb"][0]
    txt = text_embed(P, tokens, prefix="cross/txt/") + P["cross/type_emb"][1]
    x = ad.concat([img, txt], axis=1)
    ni, nt = img.shape[1], txt.shape[1]
    valid = np.concatenate([np.arange(ni)[None] < (regions.lengths + 1)[:, None],
                            np.arange(nt)[None] < tokens.lengths[:, None]], axis=1)
    bias = None if valid.all() else np.where(valid, 0.0, -1e9)[:, None, None, :]
    h = transformer_stack(P, "cross/", x, bias, cfg)
    return (h[:, 0] @ P["cross/match.w"] + P["cross/match.b"]).reshape((-1,))


class CrossAttentionScorer(CrossScorer):
    """Joint encoder over the concatenated pair; one full forward per (query, candidate).

    Accepts a caption query with region candidates or the reverse. Candidates
    are scored in chunks of ``chunk`` pairs.
    """

    name = "cross"
    latency_class = "slow"

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], items: Mapping[int, object] | None = None,
                 chunk: int = CHUNK):
        super().__init__()
        self.config = config
        self.params = params
        self.items = items or {}
        self.chunk = chunk

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, **kw) -> CrossAttentionScorer:
        return cls(config, init_params(cross_param_shapes(config), np.random.default_rng(seed)), **kw)

    def resolve(self, item_id: int):
        return self.items[item_id]

    def prepare(self, candidates: Sequence) -> list:
        """Pad candidates into chunk batches once, so repeated queries skip that work."""
        out = []
        for i in range(0, len(candidates), self.chunk):
            part = candidates[i:i + self.chunk]
            if isinstance(part[0], RegionSequence):
                out.append(("regions", RegionBatch.from_sequences(part)))
            else:
                out.append(("tokens", TokenBatch.from_sequences(part)))
        return out

    def score_prepared(self, query, prepared: list) -> np.ndarray:
        P = Graph(record=False).bind(self.params)
        out = []
        for kind, batch in prepared:
            n = batch.lengths.size
            if kind == "regions":
                tb = TokenBatch.from_sequences([query])
                tb = TokenBatch(np.repeat(tb.ids, n, axis=0), np.repeat(tb.lengths, n))
                out.append(cross_logits(P, self.config, batch, tb).data)
            else:
                rb = RegionBatch.from_sequences([query])
                rb = RegionBatch(np.repeat(rb.features, n, axis=0), np.repeat(rb.boxes, n, axis=0),
                                 np.repeat(rb.lengths, n))
                out.append(cross_logits(P, self.config, rb, batch).data)
            self.calls += n
        return np.concatenate(out) if out else np.empty(0)

    def _score_many(self, query, candidates):
        self.calls -= len(candidates)  # score_prepared counts pairs itself
        return self.score_prepared(query, self.prepare(list(candidates)))

    def pair_logits(self, regions: Sequence[RegionSequence], tokens: Sequence[TokenSequence]) -> np.ndarray:
        P = Graph(record=False).bind(self.params)
        return cross_logits(P, self.config, RegionBatch.from_sequences(regions), TokenBatch.from_sequences(tokens)).data


def train_cross_scorer(corpus, config: ModelConfig, steps: int = 300, batch_size: int = 32, lr: float = 1e-3,
                       seed: int = 0, split: str = "train") -> tuple[CrossAttentionScorer, list[float]]:
    """Binary matched/mismatched cross-entropy; each batch pairs every image with its
    own caption (positive) and with another batch member's caption (negative)."""
    rng = np.random.default_rng(seed)
    scorer = CrossAttentionScorer.create(config, seed=seed)
    params = scorer.params
    ids = np.asarray(corpus.ids(split))
    n = min(batch_size, ids.size)
    state, skip = AdamState(), no_decay_names(params)
    losses = []
    for step in range(steps):
        picked = rng.choice(ids, size=n, replace=False)
        shift = int(rng.integers(1, n)) if n > 1 else 0
        regs = corpus.regions(picked)
        texts = corpus.texts(picked)
        negs = corpus.texts(np.roll(picked, shift))
        g = Graph()
        P = g.bind(params)
        logits = cross_logits(P, config, RegionBatch.from_sequences(regs + regs),
                              TokenBatch.from_sequences(texts + negs))
        sign = np.concatenate([-np.ones(n), np.ones(n)])
        loss = ad.softplus(logits * sign).mean()
        value, grads = ad.value_and_grad(g, loss)
        if not math.isfinite(value):
            raise FloatingPointError(f"cross scorer loss is non-finite at step {step}")
        hyper = AdamWHyper(lr=lr_schedule(step + 1, steps, lr), weight_decay=0.01)
        adamw_step(params, grads, state, hyper, skip)
        losses.append(value)
    scorer.items = {}
    return scorer, losses


@register_scorer("dot")
def _dot_factory(index: EmbeddingIndex, **_):
    return DotScorer(index)


@register_scorer("oracle")
def _oracle_factory(gold: Mapping, **_):
    return OracleScorer(gold)


@register_scorer("cross")
def _cross_factory(cross: CrossAttentionScorer, **_):
    return cross


# -- pipeline ---------------------------------------------------------------------


def retrieve_rerank(index: EmbeddingIndex, query_vector, scorer: CrossScorer, m: int, k: int,
                    query=None, lookup: Callable[[int], object] | None = None) -> RetrievalResult:
    """Top-``m`` by inner product, re-scored by ``scorer``; returns the best ``k`` by stage-2 score.

    ``query`` is what the scorer sees (defaults to ``query_vector``);
    candidates are ``lookup(id)`` (defaults to ``scorer.resolve``).
    """
    if k > m:
        raise ValueError(f"k={k} exceeds m={m}")
    first = top_k(index, query_vector, m)
    resolve = lookup or scorer.resolve
    q = query_vector if query is None else query
    cands = [resolve(int(i)) for i in first.ids]
    try:
        second = scorer.score_many(q, cands)
    except Exception as exc:
        for cid, cand in zip(first.ids, cands):
            try:
                scorer.score(q, cand)
            except Exception as inner:
                raise ScorerError(int(cid), inner) from inner
        raise ScorerError(None, exc) from exc
    if second.shape != (len(cands),):
        raise ScorerError(None, ValueError(f"scorer returned shape {second.shape} for {len(cands)} candidates"))
    order = np.lexsort((first.ids, -first.scores, -second))[:k]
    return RetrievalResult(first.ids[order], second[order])
