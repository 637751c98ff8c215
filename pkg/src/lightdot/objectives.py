"""Pre-training losses: MLM/VMLM, MRFR/MRC-kl with optional text fusion, and CMR.

Every loss takes bound parameters (``name -> Tensor``, see
:meth:`DualEncoder.bind`) and returns a scalar :class:`Tensor`, so the same
code serves evaluation (inference graph) and training (recording graph).
Batched inputs average the per-example losses; each per-example loss is
normalised by its own mask size M.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (
    FIRST_WORD_ID,
    MASK_ID,
    ModelConfig,
    RegionBatch,
    RegionSequence,
    TokenBatch,
    TokenSequence,
    image_hidden,
    mask_regions,
    mask_tokens,
    text_hidden,
)

TEXT_ACTION_PROBS = (0.8, 0.1, 0.1)


class MaskAction(IntEnum):
    MASK = 0
    RANDOM = 1
    KEEP = 2


@dataclass
class MaskPlan:
    """Masked positions (sorted, never 0) with what to show and what to predict.

    Text plans carry per-position ``actions`` and the resolved ``replacements``;
    image plans always zero the feature, so ``actions`` is None.
    ``originals`` holds the target ids (text) or feature rows (image);
    ``orig_class`` the class distributions of masked regions.
    """

    indices: np.ndarray
    originals: np.ndarray
    actions: np.ndarray | None = None
    replacements: np.ndarray | None = None
    orig_class: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.indices.size)


def _select_positions(length: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    picked = np.flatnonzero(rng.random(length) < rate) + 1
    if picked.size == 0:
        picked = np.array([rng.integers(1, length + 1)])
    return picked.astype(np.int64)


def plan_text_mask(tokens: TokenSequence, rate: float, rng: np.random.Generator, vocab: int) -> MaskPlan:
    """Bernoulli(rate) selection of non-[CLS] positions, then MASK/RANDOM/KEEP at 80/10/10.

    A draw that selects nothing is forced to mask exactly one uniform position.
    RANDOM replacements are drawn uniformly from the non-special ids.
    """
    n = len(tokens) - 1
    if n < 1:
        raise ValueError("caption has no tokens to mask")
    idx = _select_positions(n, rate, rng)
    u = rng.random(idx.size)
    actions = np.where(u < TEXT_ACTION_PROBS[0], MaskAction.MASK,
                       np.where(u < TEXT_ACTION_PROBS[0] + TEXT_ACTION_PROBS[1], MaskAction.RANDOM, MaskAction.KEEP))
    random_ids = rng.integers(FIRST_WORD_ID, vocab, size=idx.size)
    originals = tokens.ids[idx].copy()
    replacements = np.where(actions == MaskAction.MASK, MASK_ID,
                            np.where(actions == MaskAction.RANDOM, random_ids, originals))
    return MaskPlan(idx, originals, actions.astype(np.int64), replacements.astype(np.int64))


def plan_region_mask(regions: RegionSequence, rate: float, rng: np.random.Generator) -> MaskPlan:
    idx = _select_positions(len(regions), rate, rng)
    return MaskPlan(idx, regions.features[idx - 1].copy(), orig_class=regions.class_dist[idx - 1].copy())


def _as_list(x) -> list:
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _gather_plan(plans: Sequence[MaskPlan]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened (batch row, position, weight) for every masked slot.

    Weight 1/(M_b * B) makes the weighted sum the batch mean of per-example means.
    """
    rows, pos, w = [], [], []
    for b, plan in enumerate(plans):
        if len(plan) == 0:
            raise ValueError("mask plan is empty; losses need M >= 1")
        rows.append(np.full(len(plan), b))
        pos.append(plan.indices)
        w.append(np.full(len(plan), 1.0 / (len(plan) * len(plans))))
    return np.concatenate(rows), np.concatenate(pos), np.concatenate(w)


def _mlp(P: Mapping[str, Tensor], p: str, x: Tensor) -> Tensor:
    return ad.gelu(x @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]


def mlm_head_loss(P: Mapping[str, Tensor], hidden: Tensor, plans: Sequence[MaskPlan],
                  fused: Tensor | None = None) -> Tensor:
    rows, pos, w = _gather_plan(plans)
    z = hidden[rows, pos]
    if fused is not None:
        z = z + fused[rows]
    logp = ad.log_softmax(z @ P["text/mlm.w"] + P["text/mlm.b"], axis=-1)
    targets = np.concatenate([p.originals for p in plans])
    nll = -logp[np.arange(targets.size), targets]
    return (nll * w).sum()


def loss_mlm(P: Mapping[str, Tensor], cfg: ModelConfig, tokens, plans) -> Tensor:
    tokens, plans = _as_list(tokens), _as_list(plans)
    masked = [mask_tokens(t, p) for t, p in zip(tokens, plans)]
    return mlm_head_loss(P, text_hidden(P, cfg, TokenBatch.from_sequences(masked)), plans)


def loss_vmlm(P: Mapping[str, Tensor], cfg: ModelConfig, tokens, regions, plans) -> Tensor:
    """MLM whose prediction input is the masked token state plus the paired image's h_0."""
    tokens, regions, plans = _as_list(tokens), _as_list(regions), _as_list(plans)
    masked = [mask_tokens(t, p) for t, p in zip(tokens, plans)]
    h0 = image_hidden(P, cfg, RegionBatch.from_sequences(regions))[:, 0]
    return mlm_head_loss(P, text_hidden(P, cfg, TokenBatch.from_sequences(masked)), plans, fused=h0)


def _masked_image_states(P, cfg, regions, plans):
    masked = [mask_regions(r, p) for r, p in zip(regions, plans)]
    return image_hidden(P, cfg, RegionBatch.from_sequences(masked))


def mrfr_head_loss(P: Mapping[str, Tensor], hidden: Tensor, plans: Sequence[MaskPlan],
                   fused: Tensor | None = None) -> Tensor:
    rows, pos, w = _gather_plan(plans)
    h = hidden[rows, pos]
    if fused is not None:
        h = h + fused[rows]
    target = np.concatenate([p.originals for p in plans])
    return (ad.sq_norm(_mlp(P, "image/fr.", h) - target, axis=-1) * w).sum()


def mrc_kl_head_loss(P: Mapping[str, Tensor], hidden: Tensor, plans: Sequence[MaskPlan],
                     fused: Tensor | None = None) -> Tensor:
    rows, pos, w = _gather_plan(plans)
    h = hidden[rows, pos]
    if fused is not None:
        h = h + fused[rows]
    p = np.concatenate([pl.orig_class for pl in plans])
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    logq = ad.log_softmax(_mlp(P, "image/mrc.", h), axis=-1)
    kl = ad.tsum(plogp - p * logq, axis=-1)
    return (kl * w).sum()


def _text_globals(P, cfg, tokens) -> Tensor:
    return text_hidden(P, cfg, TokenBatch.from_sequences(tokens))[:, 0]


def loss_mrfr(P: Mapping[str, Tensor], cfg: ModelConfig, regions, plans, tokens=None) -> Tensor:
    """Masked-region feature regression; with ``tokens`` the caption's z_0 is fused in (SMRFR)."""
    regions, plans = _as_list(regions), _as_list(plans)
    fused = None if tokens is None else _text_globals(P, cfg, _as_list(tokens))
    return mrfr_head_loss(P, _masked_image_states(P, cfg, regions, plans), plans, fused)


def loss_mrc_kl(P: Mapping[str, Tensor], cfg: ModelConfig, regions, plans, tokens=None) -> Tensor:
    """KL(target class dist || predicted); with ``tokens`` the caption's z_0 is fused in (SMRC-kl)."""
    regions, plans = _as_list(regions), _as_list(plans)
    fused = None if tokens is None else _text_globals(P, cfg, _as_list(tokens))
    return mrc_kl_head_loss(P, _masked_image_states(P, cfg, regions, plans), plans, fused)


def similarity(z0, h0) -> float:
    z0, h0 = np.asarray(z0, dtype=np.float64), np.asarray(h0, dtype=np.float64)
    if z0.shape != h0.shape or z0.ndim != 1:
        raise ad.ShapeError("similarity", z0.shape, h0.shape)
    return float(z0 @ h0)


def loss_cmr(text_globals, image_globals) -> Tensor:
    """Bidirectional in-batch contrastive loss over S = Z H^T.

    Row k of S scores text k against every image (image retrieval), column k
    scores image k against every text (text retrieval); the diagonal holds the
    positive pairs. Returns the mean of the 2n cross-entropy terms.
    """
    z, h = ad.as_tensor(text_globals), ad.as_tensor(image_globals)
    if z.ndim != 2 or z.shape != h.shape:
        raise ad.ShapeError("loss_cmr", z.shape, h.shape)
    n = z.shape[0]
    if n == 0:
        raise ValueError("loss_cmr needs at least one pair")
    sim = z @ h.transpose()
    diag = (np.arange(n), np.arange(n))
    ir = ad.log_softmax(sim, axis=1)[diag]
    tr = ad.log_softmax(sim, axis=0)[diag]
    return (ir.sum() + tr.sum()) * (-1.0 / (2 * n))
