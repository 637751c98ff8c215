from __future__ import annotations

import math

import numpy as np
import pytest
from _util import TINY, LOSSES, grad_check, loss_case, perturbed_model, random_regions, random_tokens
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lightdot import autodiff as ad
from lightdot.autodiff import Graph
from lightdot.encoders import TokenSequence, CLS_ID
from lightdot.objectives import (
    MaskAction,
    MaskPlan,
    loss_cmr,
    loss_mlm,
    loss_mrc_kl,
    loss_mrfr,
    mlm_head_loss,
    mrc_kl_head_loss,
    plan_region_mask,
    plan_text_mask,
    similarity,
)


@pytest.mark.parametrize("name", LOSSES)
def test_loss_gradients_small_sample(name):
    ok, worst, _ = grad_check(*loss_case(name, seed=101), seed=101)
    assert ok, worst


@pytest.mark.parametrize("name", LOSSES)
def test_losses_are_nonnegative(name):
    for seed in range(3):
        params, build = loss_case(name, seed)
        assert build(Graph(record=False).bind(params)).item() >= 0.0


def test_text_plan_full_rate_masks_everything():
    toks = TokenSequence([CLS_ID, 5, 6, 7, 8])
    plan = plan_text_mask(toks, 1.0, np.random.default_rng(0), 20)
    assert list(plan.indices) == [1, 2, 3, 4]
    assert list(plan.originals) == [5, 6, 7, 8]


def test_zero_rate_forces_exactly_one_position():
    rng = np.random.default_rng(0)
    toks = TokenSequence([CLS_ID, 5, 6, 7, 8])
    regs = random_regions(rng, TINY, n=4)
    for _ in range(20):
        assert len(plan_text_mask(toks, 0.0, rng, 20)) == 1
        p = plan_region_mask(regs, 0.0, rng)
        assert len(p) == 1 and 1 <= p.indices[0] <= 4


def test_region_plan_keeps_exact_originals():
    rng = np.random.default_rng(1)
    regs = random_regions(rng, TINY, n=4)
    plan = plan_region_mask(regs, 1.0, rng)
    assert list(plan.indices) == [1, 2, 3, 4]
    np.testing.assert_array_equal(plan.originals, regs.features)
    np.testing.assert_array_equal(plan.orig_class, regs.class_dist)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.floats(0.0, 1.0))
def test_plan_indices_sorted_unique_nonzero(seed, t, rate):
    rng = np.random.default_rng(seed)
    toks = TokenSequence([CLS_ID] + [4] * t)
    plan = plan_text_mask(toks, rate, rng, 20)
    idx = plan.indices
    assert len(idx) >= 1 and np.all(np.diff(idx) > 0) and idx.min() >= 1 and idx.max() <= t
    for a, r, o in zip(plan.actions, plan.replacements, plan.originals):
        if a == MaskAction.MASK:
            assert r == 2
        elif a == MaskAction.KEEP:
            assert r == o
        else:
            assert 4 <= r < 20


def _head_params(d, v, target_logits):
    return {"text/mlm.w": np.zeros((d, v)), "text/mlm.b": np.asarray(target_logits, dtype=np.float64)}


def test_mlm_head_loss_is_ln2_at_half_probability():
    # two classes with equal logits: correct token has probability 0.5
    P = Graph(record=False).bind(_head_params(4, 2, [0.0, 0.0]))
    plan = MaskPlan(np.array([1]), np.array([0]))
    loss = mlm_head_loss(P, ad.as_tensor(np.zeros((1, 3, 4))), [plan])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_mlm_uniform_logits_give_ln_vocab():
    P = Graph(record=False).bind(_head_params(4, 20, np.zeros(20)))
    plan = MaskPlan(np.array([1, 2]), np.array([5, 7]))
    assert mlm_head_loss(P, ad.as_tensor(np.ones((1, 3, 4))), [plan]).item() == pytest.approx(math.log(20), abs=1e-12)


def test_mrc_kl_zero_at_exact_match():
    p = np.array([[0.7, 0.2, 0.1]])
    params = {"image/mrc.w1": np.zeros((2, 2)), "image/mrc.b1": np.zeros(2), "image/mrc.w2": np.zeros((2, 3)),
              "image/mrc.b2": np.log(p[0])}
    plan = MaskPlan(np.array([1]), np.zeros((1, 6)), orig_class=p)
    loss = mrc_kl_head_loss(Graph(record=False).bind(params), ad.as_tensor(np.zeros((1, 2, 2))), [plan])
    assert abs(loss.item()) < 1e-15


def test_empty_plan_rejected():
    P = Graph(record=False).bind(_head_params(4, 2, [0.0, 0.0]))
    with pytest.raises(ValueError):
        mlm_head_loss(P, ad.as_tensor(np.zeros((1, 3, 4))), [MaskPlan(np.array([], dtype=np.int64), np.array([]))])


def test_per_example_normalization_then_batch_mean():
    # example 0 has one masked slot with loss ln2, example 1 has two slots with loss ln2 each
    P = Graph(record=False).bind(_head_params(4, 2, [0.0, 0.0]))
    plans = [MaskPlan(np.array([1]), np.array([0])), MaskPlan(np.array([1, 2]), np.array([1, 0]))]
    assert mlm_head_loss(P, ad.as_tensor(np.zeros((2, 3, 4))), plans).item() == pytest.approx(math.log(2))


def test_cmr_single_pair_is_zero():
    assert loss_cmr(np.ones((1, 3)), np.ones((1, 3))).item() == 0.0


def test_cmr_rejects_empty_batch_and_shape_mismatch():
    with pytest.raises(ValueError):
        loss_cmr(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ad.ShapeError):
        loss_cmr(np.zeros((2, 3)), np.zeros((2, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_cmr_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    z, h = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    perm = rng.permutation(n)
    assert loss_cmr(z, h).item() == pytest.approx(loss_cmr(z[perm], h[perm]).item(), rel=1e-12, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1), st.floats(0.01, 2.0))
def test_cmr_decreases_when_diagonal_grows(n, seed, bump):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, n))
    # S = Z H^T with H = I recovers S exactly, so the diagonal can be raised in isolation
    lo = loss_cmr(s, np.eye(n)).item()
    hi = loss_cmr(s + bump * np.eye(n), np.eye(n)).item()
    assert hi < lo


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-5, 5)), arrays(np.float64, 5, elements=st.floats(-5, 5)))
def test_similarity_is_inner_product(z, h):
    assert similarity(z, h) == pytest.approx(float(np.dot(z, h)), abs=1e-9)


def test_similarity_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        similarity(np.ones(3), np.ones(4))


def test_smrm_with_zero_text_global_equals_mrm(monkeypatch):
    import lightdot.objectives as obj

    params, _ = loss_case("mrfr", 5)
    rng = np.random.default_rng(5)
    regs = [random_regions(rng) for _ in range(3)]
    toks = [random_tokens(rng) for _ in range(3)]
    plans = [plan_region_mask(r, 0.3, rng) for r in regs]
    P = Graph(record=False).bind(params)
    monkeypatch.setattr(obj, "_text_globals", lambda P, cfg, t: ad.as_tensor(np.zeros((len(t), TINY.dim))))
    for fn in (loss_mrfr, loss_mrc_kl):
        assert fn(P, TINY, regs, plans, tokens=toks).item() == fn(P, TINY, regs, plans).item()
